"""Inference: anomaly maps at input resolution, image scores and heatmap overlays."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .training import anomaly_map


@dataclass
class AnomalyMap:
    map: np.ndarray  # S x S
    image_score: float
    layer_maps: dict[int, np.ndarray] = field(default_factory=dict)


def aggregate_maps(layer_maps: dict[int, torch.Tensor], size: int) -> torch.Tensor:
    """Upsample each B x H_k x W_k map bilinearly to size x size and sum over layers."""
    total = None
    for k in sorted(layer_maps):
        up = F.interpolate(layer_maps[k][:, None], size=(size, size), mode="bilinear", align_corners=False)[:, 0]
        total = up if total is None else total + up
    return total


def finalize(map_: np.ndarray, smoothing_sigma: float | None) -> AnomalyMap:
    if smoothing_sigma:
        map_ = gaussian_filter(map_, sigma=smoothing_sigma, truncate=4.0, mode="reflect")
    return AnomalyMap(map_, float(map_.max()))


@torch.no_grad()
def score(
    model,
    teachers,
    images: torch.Tensor,
    smoothing_sigma: float | None = 4.0,
    keep_layers: bool = False,
) -> list[AnomalyMap]:
    """Clean path only: teacher vs student discrepancy, never reads noise statistics."""
    model.eval()
    local, global_ = teachers.extract(images)
    student = model(local.maps, global_.maps if global_ is not None else None)
    layer_maps = {k: anomaly_map(local[k], student[k]) for k in student}
    full = aggregate_maps(layer_maps, images.shape[-1]).cpu().numpy().astype(np.float64)
    out = []
    for i in range(len(full)):
        result = finalize(full[i], smoothing_sigma)
        if keep_layers:
            result.layer_maps = {k: v[i].cpu().numpy() for k, v in layer_maps.items()}
        out.append(result)
    return out


def _colormap_lut() -> np.ndarray:
    from matplotlib import colormaps

    return (colormaps["viridis"](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)


def normalize_map(map_: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(map_.min()), float(map_.max())
    if hi - lo <= 0:
        return np.zeros_like(map_, dtype=np.float64)
    return (map_ - lo) / (hi - lo)


def render_overlay(map_: np.ndarray, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colour-mapped anomaly map over an H x W x 3 image in [0, 1]; returns uint8."""
    if map_.shape != image.shape[:2]:
        raise ValueError(f"map {map_.shape} and image {image.shape[:2]} differ in size")
    idx = (normalize_map(map_) * 255).round().astype(np.int64)
    colour = _colormap_lut()[idx].astype(np.float64) / 255.0
    blend = alpha * colour + (1 - alpha) * np.clip(image, 0, 1)
    return (blend * 255).round().astype(np.uint8)


def export_heatmap(result: AnomalyMap, image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    try:
        Image.fromarray(render_overlay(result.map, image), mode="RGB").save(path)
    except OSError as exc:
        raise OSError(f"cannot write heatmap {path}: {exc}") from exc
    return path


def denormalize(image: torch.Tensor, mean, std) -> np.ndarray:
    """3 x S x S normalised tensor -> S x S x 3 array in [0, 1]."""
    arr = image.cpu().numpy().transpose(1, 2, 0) * np.asarray(std) + np.asarray(mean)
    return np.clip(arr, 0, 1)
