"""Local multivariate Gaussian noise.

Per-position Gaussian statistics of normal-class local-teacher features are
fitted once over the training set; during training a randomly sized square
patch per layer is filled with draws from those per-position distributions
and added to the local features.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import torch

from .utils import tensor_checksum

logger = logging.getLogger(__name__)

STATS_FORMAT = "hetnet-noise-stats"
STATS_VERSION = 1


class NoiseError(RuntimeError):
    pass


@dataclass
class GaussianFieldStats:
    """Per-layer mean fields (C x H x W) and covariance fields.

    ``cov[k]`` is H x W x C x C in full mode or C x H x W in diagonal mode and
    already includes the ``eps * I`` regulariser.
    """

    mean: dict[int, torch.Tensor]
    cov: dict[int, torch.Tensor]
    n_samples: int
    eps: float
    mode: str
    backbone_id: str
    _factor: dict[int, torch.Tensor] = field(default_factory=dict, repr=False)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.mean))

    def shape(self, k: int) -> tuple[int, int, int]:
        return tuple(self.mean[k].shape)

    def factor(self, k: int) -> torch.Tensor:
        """Cholesky factor (full) or standard deviation (diagonal), cached."""
        if k not in self._factor:
            if self.mode == "full":
                L, info = torch.linalg.cholesky_ex(self.cov[k])
                bad = torch.nonzero(info.reshape(-1))
                if len(bad):
                    h, w = divmod(int(bad[0]), self.cov[k].shape[1])
                    raise NoiseError(f"Cholesky failed at layer {k}, position ({h}, {w})")
                self._factor[k] = L
            else:
                self._factor[k] = self.cov[k].clamp_min(0).sqrt()
        return self._factor[k]

    def check_cholesky(self) -> None:
        for k in self.layers:
            self.factor(k)

    def save(self, path: str | Path) -> None:
        tensors = {f"mean.{k}": v for k, v in self.mean.items()} | {f"cov.{k}": v for k, v in self.cov.items()}
        torch.save(
            {
                "format": STATS_FORMAT,
                "version": STATS_VERSION,
                "layers": list(self.layers),
                "n_samples": self.n_samples,
                "eps": self.eps,
                "mode": self.mode,
                "backbone_id": self.backbone_id,
                "checksum": tensor_checksum(tensors),
                "tensors": tensors,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "GaussianFieldStats":
        path = Path(path)
        if not path.is_file():
            raise NoiseError(f"noise statistics file not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != STATS_FORMAT:
            raise NoiseError(f"{path} is not a noise statistics file")
        if blob["version"] != STATS_VERSION:
            raise NoiseError(f"{path}: unsupported version {blob['version']}")
        tensors = blob["tensors"]
        if tensor_checksum(tensors) != blob["checksum"]:
            raise NoiseError(f"{path}: checksum mismatch")
        layers = blob["layers"]
        stats = cls(
            mean={k: tensors[f"mean.{k}"] for k in layers},
            cov={k: tensors[f"cov.{k}"] for k in layers},
            n_samples=blob["n_samples"],
            eps=blob["eps"],
            mode=blob["mode"],
            backbone_id=blob["backbone_id"],
        )
        stats.check_cholesky()
        return stats


class _Accumulator:
    """Streaming mean / scatter per position using pairwise batch merges."""

    def __init__(self, mode: str):
        self.mode = mode
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, feats: torch.Tensor) -> None:
        b, c, h, w = feats.shape
        x = feats.detach().to(torch.float64).permute(2, 3, 0, 1).reshape(h * w, b, c)
        bmean = x.mean(dim=1)
        centred = x - bmean[:, None, :]
        if self.mode == "full":
            bm2 = centred.transpose(1, 2) @ centred
        else:
            bm2 = (centred**2).sum(dim=1)
        if self.n == 0:
            self.n, self.mean, self.m2, self.shape = b, bmean, bm2, (c, h, w)
            return
        total = self.n + b
        delta = bmean - self.mean
        if self.mode == "full":
            self.m2 = self.m2 + bm2 + delta[:, :, None] * delta[:, None, :] * (self.n * b / total)
        else:
            self.m2 = self.m2 + bm2 + delta**2 * (self.n * b / total)
        self.mean = self.mean + delta * (b / total)
        self.n = total

    def finalize(self, eps: float) -> tuple[torch.Tensor, torch.Tensor]:
        c, h, w = self.shape
        cov = self.m2 / (self.n - 1) if self.n > 1 else torch.zeros_like(self.m2)
        mean = self.mean.T.reshape(c, h, w).contiguous()
        if self.mode == "full":
            cov = cov + eps * torch.eye(c, dtype=cov.dtype)
            return mean, cov.reshape(h, w, c, c).contiguous()
        cov = cov + eps
        return mean, cov.T.reshape(c, h, w).contiguous()


def fit_stats_from_features(
    batches: Iterable[dict[int, torch.Tensor]],
    eps: float = 0.01,
    mode: str = "full",
    backbone_id: str = "",
) -> GaussianFieldStats:
    """Fit statistics from an iterable of per-layer feature batches (B x C x H x W)."""
    accs: dict[int, _Accumulator] = {}
    for batch in batches:
        for k, feats in batch.items():
            accs.setdefault(k, _Accumulator(mode)).update(feats)
    if not accs or min(a.n for a in accs.values()) == 0:
        raise NoiseError("cannot fit noise statistics from zero samples")
    mean, cov = {}, {}
    for k, acc in sorted(accs.items()):
        mean[k], cov[k] = acc.finalize(eps)
    n = next(iter(accs.values())).n
    stats = GaussianFieldStats(mean, cov, n, eps, mode, backbone_id)
    stats.check_cholesky()
    return stats


def fit_stats(teacher, train_index, cfg, batch_size: int | None = None) -> GaussianFieldStats:
    """Fit statistics of the local-role teacher over every training image."""
    from .dataset import load_batch
    from .teacher import extract

    if len(train_index) == 0:
        raise NoiseError("training index is empty")
    entries = list(train_index)
    step = batch_size or cfg.batch_size
    layers = cfg.noise_layers or cfg.layers_used

    def batches():
        for start in range(0, len(entries), step):
            images, _, _ = load_batch(
                entries[start : start + step], cfg.image_size, cfg.normalization_mean, cfg.normalization_std
            )
            pyramid = extract(teacher, images.to(cfg.device), layers)
            yield {k: v.cpu() for k, v in pyramid.maps.items()}

    stats = fit_stats_from_features(batches(), cfg.covariance_eps, cfg.covariance_mode, teacher.backbone_id)
    logger.info("fitted noise statistics over %d images, layers %s", stats.n_samples, stats.layers)
    return stats


# ---------------------------------------------------------------------------
# patch plans


@dataclass(frozen=True)
class Patch:
    top: int
    left: int
    side: int


@dataclass
class NoisePatchPlan:
    """One square patch per layer for a single sample."""

    patches: dict[int, Patch]

    def validate(self, shapes: dict[int, tuple[int, int]]) -> None:
        for k, p in self.patches.items():
            if k not in shapes:
                raise NoiseError(f"plan layer {k} not present in statistics")
            h, w = shapes[k]
            if p.side < 1:
                raise NoiseError(f"layer {k}: patch side must be >= 1")
            if p.top < 0 or p.left < 0 or p.top + p.side > h or p.left + p.side > w:
                raise NoiseError(f"layer {k}: patch {p} leaves the {h}x{w} map")

    def mask(self, k: int, h: int, w: int) -> torch.Tensor:
        m = torch.zeros(h, w, dtype=torch.bool)
        p = self.patches.get(k)
        if p is not None:
            m[p.top : p.top + p.side, p.left : p.left + p.side] = True
        return m


def side_bounds(h: int, fractions: tuple[float, float]) -> tuple[int, int]:
    lo = max(1, math.ceil(fractions[0] * h))
    hi = max(lo, min(h, math.floor(fractions[1] * h)))
    return lo, hi


def make_patch(k: int, center: tuple[int, int], side: int, h: int, w: int) -> Patch:
    if side < 1:
        raise NoiseError(f"layer {k}: patch side must be >= 1")
    side = min(side, h, w)
    top = min(max(center[0] - side // 2, 0), h - side)
    left = min(max(center[1] - side // 2, 0), w - side)
    return Patch(top, left, side)


def random_plan(
    shapes: dict[int, tuple[int, int]],
    fractions: tuple[float, float],
    gen: torch.Generator,
) -> NoisePatchPlan:
    patches = {}
    for k in sorted(shapes):
        h, w = shapes[k]
        lo, hi = side_bounds(h, fractions)
        side = min(int(torch.randint(lo, hi + 1, (1,), generator=gen)), w)
        # uniform over every placement that keeps the square inside the map
        top = int(torch.randint(0, h - side + 1, (1,), generator=gen))
        left = int(torch.randint(0, w - side + 1, (1,), generator=gen))
        patches[k] = Patch(top, left, side)
    return NoisePatchPlan(patches)


# ---------------------------------------------------------------------------
# sampling and injection


@dataclass
class NoiseField:
    """Noise values and the per-position mean, both zero outside the patches."""

    values: dict[int, torch.Tensor]
    means: dict[int, torch.Tensor]
    masks: dict[int, torch.Tensor]  # B x H x W bool


def _plan_masks(plans: list[NoisePatchPlan], k: int, h: int, w: int) -> torch.Tensor:
    return torch.stack([p.mask(k, h, w) for p in plans])


_CHUNK_ELEMS = 1 << 22


def sample_noise(stats: GaussianFieldStats, plans: list[NoisePatchPlan], gen: torch.Generator) -> NoiseField:
    shapes = {k: stats.shape(k)[1:] for k in stats.layers}
    for plan in plans:
        plan.validate(shapes)
    layers = sorted({k for plan in plans for k in plan.patches})
    values, means, masks = {}, {}, {}
    for k in layers:
        c, h, w = stats.shape(k)
        mask = _plan_masks(plans, k, h, w)
        idx = mask.nonzero()  # n x 3 (b, i, j)
        mu = stats.mean[k].permute(1, 2, 0)[idx[:, 1], idx[:, 2]]  # n x C
        z = torch.randn(len(idx), c, generator=gen, dtype=torch.float64)
        factor = stats.factor(k)
        if stats.mode == "full":
            draws = torch.empty_like(z)
            chunk = max(1, _CHUNK_ELEMS // (c * c))
            for s in range(0, len(idx), chunk):
                sl = slice(s, s + chunk)
                L = factor[idx[sl, 1], idx[sl, 2]]
                draws[sl] = (L @ z[sl, :, None]).squeeze(-1)
        else:
            draws = factor.permute(1, 2, 0)[idx[:, 1], idx[:, 2]] * z
        xi = mu + draws
        field_ = torch.zeros(len(plans), h, w, c, dtype=torch.float64)
        mean_field = torch.zeros_like(field_)
        field_[idx[:, 0], idx[:, 1], idx[:, 2]] = xi
        mean_field[idx[:, 0], idx[:, 1], idx[:, 2]] = mu
        values[k] = field_.permute(0, 3, 1, 2).float().contiguous()
        means[k] = mean_field.permute(0, 3, 1, 2).float().contiguous()
        masks[k] = mask
    return NoiseField(values, means, masks)


def standard_normal_noise(
    shapes: dict[int, tuple[int, int, int]],
    plans: list[NoisePatchPlan],
    gen: torch.Generator,
    scale: float = 1.0,
) -> NoiseField:
    """i.i.d. N(0, scale^2) inside the same kind of patches."""
    for plan in plans:
        plan.validate({k: s[1:] for k, s in shapes.items()})
    values, means, masks = {}, {}, {}
    for k in sorted({k for plan in plans for k in plan.patches}):
        c, h, w = shapes[k]
        mask = _plan_masks(plans, k, h, w)
        z = torch.randn(len(plans), c, h, w, generator=gen) * scale
        values[k] = z * mask[:, None]
        means[k] = torch.zeros_like(z)
        masks[k] = mask
    return NoiseField(values, means, masks)


def inject(features: dict[int, torch.Tensor], noise: NoiseField, mode: str = "add_xi") -> dict[int, torch.Tensor]:
    """Add the noise field to local features; layers without noise pass through."""
    if mode not in ("add_xi", "add_centered"):
        raise NoiseError(f"unknown injection mode {mode!r}")
    out = {}
    for k, f in features.items():
        if k not in noise.values:
            out[k] = f
            continue
        v = noise.values[k].to(f.device, f.dtype)
        if v.shape != f.shape:
            raise NoiseError(f"layer {k}: noise shape {tuple(v.shape)} vs feature shape {tuple(f.shape)}")
        if mode == "add_centered":
            v = v - noise.means[k].to(f.device, f.dtype)
        out[k] = torch.where(noise.masks[k].to(f.device)[:, None], f + v, f)
    return out
