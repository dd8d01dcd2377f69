"""MVTec-style dataset layouts, sample loading and the synthetic defect corpus.

Layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<label>/*.png
    <root>/<category>/ground_truth/<label>/<stem>_mask.png
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .utils import numpy_rng

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
GOOD = "good"
GEOMETRY_FILE = "defects.json"


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Entry:
    image: Path
    label: str
    mask: Path | None = None

    @property
    def is_defect(self) -> bool:
        return self.label != GOOD


@dataclass
class DatasetIndex:
    split: str
    entries: list[Entry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


@dataclass
class Sample:
    image: torch.Tensor  # 3 x S x S, normalised
    mask: torch.Tensor | None  # S x S, values in {0, 1}
    label: int


def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, image: Path) -> Path | None:
    for name in (f"{image.stem}_mask.png", f"{image.stem}.png"):
        candidate = gt_dir / name
        if candidate.is_file():
            return candidate
    return None


def scan_layout(root: str | Path, category: str) -> tuple[DatasetIndex, DatasetIndex]:
    base = Path(root) / category
    if not base.is_dir():
        raise DatasetError(f"category folder not found: {base}")
    good_dir = base / "train" / GOOD
    train_images = _images_in(good_dir) if good_dir.is_dir() else []
    if not train_images:
        raise DatasetError(f"no training images in {good_dir}")
    train = DatasetIndex("train", [Entry(p, GOOD) for p in train_images])

    test = DatasetIndex("test")
    test_dir = base / "test"
    if test_dir.is_dir():
        for label_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            label = label_dir.name
            for img in _images_in(label_dir):
                if label == GOOD:
                    test.entries.append(Entry(img, GOOD))
                    continue
                mask = _find_mask(base / "ground_truth" / label, img)
                if mask is None:
                    raise DatasetError(f"missing ground-truth mask for defect image {img}")
                test.entries.append(Entry(img, label, mask))
    return train, test


def load_sample(
    entry: Entry,
    image_size: int,
    mean: Sequence[float],
    std: Sequence[float],
) -> Sample:
    try:
        with Image.open(entry.image) as im:
            rgb = im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {entry.image}: {exc}") from exc
    original_size = rgb.size
    rgb = rgb.resize((image_size, image_size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    image = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))

    mask = None
    if entry.mask is not None:
        try:
            with Image.open(entry.mask) as m:
                gray = m.convert("L")
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot decode mask {entry.mask}: {exc}") from exc
        if gray.size != original_size:
            raise DatasetError(f"mask {entry.mask} has size {gray.size}, image has {original_size}")
        gray = gray.resize((image_size, image_size), Image.NEAREST)
        mask = torch.from_numpy((np.asarray(gray) >= 128).astype(np.uint8))
        if entry.is_defect and not mask.any():
            logger.warning("defect image %s has an empty mask", entry.image)
    elif entry.is_defect:
        mask = torch.zeros(image_size, image_size, dtype=torch.uint8)
    return Sample(image=image, mask=mask, label=int(entry.is_defect))


def load_batch(entries: Sequence[Entry], image_size: int, mean, std) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples; good images get an all-zero mask."""
    samples = [load_sample(e, image_size, mean, std) for e in entries]
    images = torch.stack([s.image for s in samples])
    masks = torch.stack(
        [s.mask if s.mask is not None else torch.zeros(image_size, image_size, dtype=torch.uint8) for s in samples]
    )
    labels = torch.tensor([s.label for s in samples])
    return images, masks, labels


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class CorpusSpec:
    n_train: int
    n_test_good: int
    n_test_defect: int
    texture: str = "cast"
    defect_types: Sequence[str] = ("scratch", "blob", "dent")
    illumination_levels: Sequence[float] = (1.0,)
    resolution_levels: Sequence[float] = (1.0,)
    image_size: int = 128
    min_defect_fraction: float = 0.005
    max_defect_fraction: float = 0.05

    @classmethod
    def from_config(cls, cfg) -> "CorpusSpec":
        return cls(
            n_train=cfg.synth_n_train,
            n_test_good=cfg.synth_n_test_good,
            n_test_defect=cfg.synth_n_test_defect,
            texture=cfg.synth_texture,
            defect_types=tuple(cfg.synth_defect_types),
            illumination_levels=tuple(cfg.synth_illumination_levels),
            resolution_levels=tuple(cfg.synth_resolution_levels),
            image_size=cfg.synth_image_size,
        )

    def validate(self) -> None:
        if min(self.n_train, self.n_test_good, self.n_test_defect) < 1:
            raise DatasetError("corpus counts must all be >= 1")
        if not self.defect_types:
            raise DatasetError("corpus needs at least one defect type")
        unknown = set(self.defect_types) - {"scratch", "blob", "dent"}
        if unknown:
            raise DatasetError(f"unknown defect types: {sorted(unknown)}")
        if self.image_size < 16:
            raise DatasetError("synthetic image_size must be >= 16")


def value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Smooth noise in [0, 1]: a random lattice upsampled bilinearly."""
    lattice = rng.random((cells + 1, cells + 1)).astype(np.float32)
    img = Image.fromarray(lattice, mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32)


def render_texture(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    """H x W x 3 float image in [0, 1]."""
    base = 0.65 * value_noise(rng, size, 3) + 0.35 * value_noise(rng, size, 8)
    if kind == "brushed":
        streaks = rng.normal(0.0, 1.0, size=(size, 1)).astype(np.float32)
        base = 0.7 * base + 0.3 * (0.5 + 0.15 * np.repeat(streaks, size, axis=1))
    elif kind == "plain":
        base = 0.5 + 0.2 * (base - 0.5)
    gray = 0.4 + 0.2 * base
    if kind == "cast":
        gray = gray + rng.normal(0.0, 0.012, size=(size, size)).astype(np.float32)
    tint = np.asarray([1.0, 0.98, 0.94], dtype=np.float32)
    return np.clip(gray[..., None] * tint, 0.0, 1.0)


@dataclass
class DefectGeometry:
    kind: str
    points: list[tuple[float, float]]  # scratch polyline / blob polygon / dent centre
    width: int = 1
    radius: float = 0.0
    strength: float = 0.0

    def rasterize(self, size: int) -> np.ndarray:
        """Binary mask of the geometry; also the oracle for the stored mask."""
        canvas = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(canvas)
        if self.kind == "scratch":
            draw.line(self.points, fill=255, width=self.width, joint="curve")
        elif self.kind == "blob":
            draw.polygon(self.points, fill=255)
        else:
            (cx, cy), r = self.points[0], self.radius
            draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=255)
        return np.asarray(canvas) >= 128


def _sample_geometry(rng: np.random.Generator, kind: str, size: int) -> DefectGeometry:
    margin = size * 0.12
    cx, cy = rng.uniform(margin, size - margin, size=2)
    if kind == "scratch":
        n = int(rng.integers(2, 5))
        length = rng.uniform(0.25, 0.5) * size
        angle = rng.uniform(0, math.pi)
        pts = []
        for t in np.linspace(-0.5, 0.5, n + 1):
            jitter = rng.normal(0.0, 0.03 * size)
            pts.append(
                (
                    float(cx + t * length * math.cos(angle) - jitter * math.sin(angle)),
                    float(cy + t * length * math.sin(angle) + jitter * math.cos(angle)),
                )
            )
        return DefectGeometry("scratch", pts, width=max(2, size // 40), strength=float(rng.choice([-1, 1]) * rng.uniform(0.25, 0.4)))
    if kind == "blob":
        n = 12
        r0 = rng.uniform(0.05, 0.11) * size
        aspect = rng.uniform(0.6, 1.0)
        rot = rng.uniform(0, 2 * math.pi)
        pts = []
        for k in range(n):
            a = 2 * math.pi * k / n
            r = r0 * rng.uniform(0.75, 1.2)
            x, y = r * math.cos(a), aspect * r * math.sin(a)
            pts.append((float(cx + x * math.cos(rot) - y * math.sin(rot)), float(cy + x * math.sin(rot) + y * math.cos(rot))))
        return DefectGeometry("blob", pts, strength=float(rng.choice([-1, 1]) * rng.uniform(0.2, 0.35)))
    radius = float(rng.uniform(0.06, 0.11) * size)
    return DefectGeometry("dent", [(float(cx), float(cy))], radius=radius, strength=float(rng.uniform(0.5, 0.8)))


def _apply_defect(image: np.ndarray, geom: DefectGeometry, mask: np.ndarray) -> np.ndarray:
    out = image.copy()
    size = image.shape[0]
    if geom.kind in ("scratch", "blob"):
        out[mask] = np.clip(out[mask] + geom.strength, 0.0, 1.0)
        return out
    # dent: radial warp pulling texture toward the centre, plus a shading ramp
    (cx, cy), r = geom.points[0], geom.radius
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    dist = np.sqrt(dx**2 + dy**2)
    rel = np.clip(dist / r, 0.0, 1.0)
    scale = 1.0 - geom.strength * (1.0 - rel) ** 2
    sx = np.clip(cx + dx * scale, 0, size - 1)
    sy = np.clip(cy + dy * scale, 0, size - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    x1, y1 = np.minimum(x0 + 1, size - 1), np.minimum(y0 + 1, size - 1)
    wx, wy = (sx - x0)[..., None], (sy - y0)[..., None]
    warped = (
        image[y0, x0] * (1 - wx) * (1 - wy)
        + image[y0, x1] * wx * (1 - wy)
        + image[y1, x0] * (1 - wx) * wy
        + image[y1, x1] * wx * wy
    )
    shade = 1.0 - 0.45 * geom.strength * np.cos(rel * math.pi / 2)[..., None] * np.sign(dx + dy)[..., None]
    warped = np.clip(warped * shade, 0.0, 1.0)
    out[mask] = warped[mask]
    return out


def _degrade(image: np.ndarray, illumination: float, resolution: float) -> np.ndarray:
    out = np.clip(image * illumination, 0.0, 1.0)
    if resolution < 1.0:
        size = image.shape[0]
        small = max(4, int(round(size * resolution)))
        u8 = Image.fromarray((out * 255).round().astype(np.uint8))
        u8 = u8.resize((small, small), Image.BILINEAR).resize((size, size), Image.BILINEAR)
        return np.asarray(u8, dtype=np.float32) / 255.0
    return out


def _save_rgb(image: np.ndarray, path: Path) -> None:
    Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8), mode="RGB").save(path)


def make_defect(seed: int, index: int, kind: str, size: int, spec: CorpusSpec) -> tuple[DefectGeometry, np.ndarray]:
    rng = numpy_rng(seed, "defect", index)
    lo, hi = spec.min_defect_fraction * size * size, spec.max_defect_fraction * size * size
    for _ in range(200):
        geom = _sample_geometry(rng, kind, size)
        mask = geom.rasterize(size)
        if lo <= mask.sum() <= hi:
            return geom, mask
    raise DatasetError(f"could not place a {kind} defect within the size bounds")


def synth_corpus(spec: CorpusSpec, root: str | Path, category: str, seed: int) -> Path:
    """Write a synthetic MVTec-style corpus and return the category folder."""
    spec.validate()
    base = Path(root) / category
    if base.exists() and any(base.iterdir()):
        raise DatasetError(f"output directory {base} is not empty")
    size = spec.image_size
    types = sorted(spec.defect_types)

    def condition(split: str, i: int) -> tuple[float, float]:
        rng = numpy_rng(seed, "condition", split, i)
        return float(rng.choice(spec.illumination_levels)), float(rng.choice(spec.resolution_levels))

    def texture(split: str, i: int) -> np.ndarray:
        return render_texture(numpy_rng(seed, "texture", split, i), size, spec.texture)

    (base / "train" / "good").mkdir(parents=True)
    (base / "test" / "good").mkdir(parents=True)
    for i in range(spec.n_train):
        _save_rgb(_degrade(texture("train", i), *condition("train", i)), base / "train" / "good" / f"{i:03d}.png")
    for i in range(spec.n_test_good):
        _save_rgb(_degrade(texture("test_good", i), *condition("test_good", i)), base / "test" / "good" / f"{i:03d}.png")
    for kind in types:
        (base / "test" / kind).mkdir(parents=True)
        (base / "ground_truth" / kind).mkdir(parents=True)
    counters = {k: 0 for k in types}
    records = []
    for i in range(spec.n_test_defect):
        kind = types[i % len(types)]
        geom, mask = make_defect(seed, i, kind, size, spec)
        clean = texture("test_defect", i)
        image = _degrade(_apply_defect(clean, geom, mask), *condition("test_defect", i))
        stem = f"{counters[kind]:03d}"
        counters[kind] += 1
        _save_rgb(image, base / "test" / kind / f"{stem}.png")
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(base / "ground_truth" / kind / f"{stem}_mask.png")
        records.append({"image": f"test/{kind}/{stem}.png", "mask": f"ground_truth/{kind}/{stem}_mask.png", "size": size, **asdict(geom)})
    # the geometry sidecar lets tests re-rasterize every defect independently
    (base / GEOMETRY_FILE).write_text(json.dumps(records, indent=1))
    return base


def read_geometry(category_root: str | Path) -> list[tuple[dict, DefectGeometry]]:
    records = json.loads((Path(category_root) / GEOMETRY_FILE).read_text())
    out = []
    for r in records:
        geom = DefectGeometry(r["kind"], [tuple(p) for p in r["points"]], r["width"], r["radius"], r["strength"])
        out.append((r, geom))
    return out
