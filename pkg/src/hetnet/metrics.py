"""Image AUROC, pixel AUROC and per-region overlap, plus the evaluation report."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(pos > neg) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    return auroc(np.asarray(maps).ravel(), np.asarray(masks).ravel())


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise MetricError("connectivity must be 4 or 8")


def pro_curve(maps, masks, thresholds, connectivity: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """False-positive rate and mean region overlap for each threshold (prediction = score >= t)."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if maps.shape != masks.shape:
        raise MetricError(f"maps {maps.shape} and masks {masks.shape} differ")
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    structure = _structure(connectivity)
    region_scores = []
    for m, gt in zip(maps, masks):
        labels, n = ndimage.label(gt, structure=structure)
        for r in range(1, n + 1):
            region_scores.append(np.sort(m[labels == r]))
    if not region_scores:
        raise MetricError("PRO needs at least one defect region")
    normal = np.sort(maps[~masks])
    if normal.size == 0:
        raise MetricError("PRO needs at least one normal pixel")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    # count of values >= t in a sorted array = size - searchsorted(left)
    fprs = (normal.size - np.searchsorted(normal, thresholds, side="left")) / normal.size
    overlaps = np.zeros_like(thresholds)
    for rs in region_scores:
        overlaps += (rs.size - np.searchsorted(rs, thresholds, side="left")) / rs.size
    return fprs, overlaps / len(region_scores)


def integrate_pro(fprs: np.ndarray, overlaps: np.ndarray, fpr_limit: float) -> float:
    """Normalised trapezoid area under overlap-vs-FPR on [0, fpr_limit].

    Points must be ordered by decreasing threshold (so FPR is nondecreasing).
    """
    x = np.concatenate([[0.0], fprs])
    y = np.concatenate([[0.0], overlaps])
    inside = x <= fpr_limit
    xs, ys = list(x[inside]), list(y[inside])
    beyond = np.nonzero(~inside)[0]
    if len(beyond):
        j = beyond[0]
        x0, y0, x1, y1 = x[j - 1], y[j - 1], x[j], y[j]
        ys.append(y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0))
        xs.append(fpr_limit)
    xs, ys = np.asarray(xs), np.asarray(ys)
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area / fpr_limit


def pro(maps, masks, fpr_limit: float = 0.3, n_thresholds: int = 200, connectivity: int = 8) -> float:
    """Per-region overlap integrated up to ``fpr_limit`` and normalised to [0, 1].

    Thresholds run uniformly over the score range (both ends included), from
    high to low; the curve is anchored at (0, 0), the point above the maximum
    score where nothing is predicted.
    """
    if not 0 < fpr_limit <= 1:
        raise MetricError("fpr_limit must lie in (0, 1]")
    maps = np.asarray(maps, dtype=np.float64)
    thresholds = np.linspace(maps.min(), maps.max(), n_thresholds)[::-1]
    fprs, overlaps = pro_curve(maps, masks, thresholds, connectivity)
    return float(np.clip(integrate_pro(fprs, overlaps, fpr_limit), 0.0, 1.0))


@dataclass
class EvalReport:
    category: str
    image_auroc: float
    pixel_auroc: float
    pro: float
    n_images: int
    n_defect: int
    n_pixels: int
    fpr_limit: float
    n_thresholds: int
    smoothing_sigma: float | None
    image_score: str
    config_fingerprint: str

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js = out / "report.json"
        js.write_text(json.dumps(asdict(self), indent=2))
        cs = out / "report.csv"
        row = asdict(self)
        with open(cs, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)
        return js, cs


def collect_scores(model, teachers, test_index, cfg, batch_size: int = 16):
    """Score every test image; returns (maps N x S x S, masks, labels, image scores)."""
    import torch

    from .dataset import load_batch
    from .scoring import score

    entries = list(test_index)
    maps, masks, labels, scores = [], [], [], []
    for s in range(0, len(entries), batch_size):
        images, m, lab = load_batch(entries[s : s + batch_size], cfg.image_size, cfg.normalization_mean, cfg.normalization_std)
        with torch.no_grad():
            results = score(model, teachers, images.to(cfg.device), cfg.smoothing_sigma)
        maps.extend(r.map for r in results)
        scores.extend(r.image_score for r in results)
        masks.append(m.numpy())
        labels.append(lab.numpy())
    return np.stack(maps), np.concatenate(masks), np.concatenate(labels), np.asarray(scores)


def evaluate(model, teachers, test_index, cfg) -> EvalReport:
    if len(test_index) == 0:
        raise MetricError("test set is empty")
    if any(e.is_defect and e.mask is None for e in test_index):
        raise MetricError("defect test images without masks")
    maps, masks, labels, scores = collect_scores(model, teachers, test_index, cfg)
    return EvalReport(
        category=cfg.category,
        image_auroc=auroc(scores, labels),
        pixel_auroc=pixel_auroc(maps, masks),
        pro=pro(maps, masks, cfg.pro_fpr_limit, cfg.pro_n_thresholds, cfg.connectivity),
        n_images=len(labels),
        n_defect=int(labels.sum()),
        n_pixels=int(masks.size),
        fpr_limit=cfg.pro_fpr_limit,
        n_thresholds=cfg.pro_n_thresholds,
        smoothing_sigma=cfg.smoothing_sigma,
        image_score="max of map after smoothing" if cfg.smoothing_sigma else "max of map",
        config_fingerprint=cfg.fingerprint(),
    )
