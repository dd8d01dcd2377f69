"""Experiment configuration: a flat key/value document with an explicit defaults table.

Files are YAML (JSON is accepted too, being a YAML subset). Unknown keys are
rejected so that a typo in a hyperparameter name never silently falls back to
a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TOY_MEAN = (0.5, 0.5, 0.5)
TOY_STD = (0.5, 0.5, 0.5)

BACKBONES = ("wide_resnet50_2", "swin_t", "toy_cnn", "toy_attn")
NOISE_TYPES = ("none", "standard_normal", "multivariate_gaussian")
COVARIANCE_MODES = ("full", "diagonal")
NOISE_MODES = ("add_xi", "add_centered")
ALGF_BYPASSES = ("concat", "local_only")
DEFECT_TYPES = ("scratch", "blob", "dent")
TEXTURES = ("cast", "brushed", "plain")


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration documents."""


@dataclass
class ExperimentConfig:
    dataset_root: str
    category: str
    output_dir: str = ""
    image_size: int = 256
    layers_used: list[int] = field(default_factory=lambda: [1, 2, 3])

    # teachers
    toy_mode: bool = False
    teacher_local: str = ""
    teacher_global: str = ""
    teacher_local_weights: str | None = None
    teacher_global_weights: str | None = None
    teacher_seed: int = 0
    normalization_mean: tuple[float, float, float] | None = None
    normalization_std: tuple[float, float, float] | None = None

    # fusion / student
    algf_enabled: bool = True
    algf_bypass: str = "concat"
    attention_heads: int = 1
    algf_projections: bool = False
    emb_channels: int | None = None

    # noise
    lmgn_enabled: bool = True
    noise_type: str = ""
    noise_mode: str = "add_xi"
    noise_layers: list[int] | None = None
    randn_scale: float = 1.0
    covariance_mode: str = ""
    covariance_eps: float = 0.01
    patch_side_fractions: tuple[float, float] = (0.125, 0.5)
    stats_path: str | None = None

    # optimisation
    alpha: float = 0.1
    swap_loss_roles: bool = False
    learning_rate: float = 0.005
    adam_betas: tuple[float, float] = (0.5, 0.999)
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    deterministic: bool = True
    checkpoint_interval: int = 0
    checkpoint_path: str | None = None
    device: str = "cpu"

    # scoring / evaluation
    smoothing_sigma: float | None = 4.0
    pro_fpr_limit: float = 0.3
    pro_n_thresholds: int = 200
    connectivity: int = 8
    export_heatmaps: bool = False

    # synthetic corpus
    synth_n_train: int = 60
    synth_n_test_good: int = 20
    synth_n_test_defect: int = 40
    synth_texture: str = "cast"
    synth_defect_types: list[str] = field(default_factory=lambda: list(DEFECT_TYPES))
    synth_illumination_levels: list[float] = field(default_factory=lambda: [1.0])
    synth_resolution_levels: list[float] = field(default_factory=lambda: [1.0])
    synth_image_size: int = 128

    # resolved paths -------------------------------------------------------
    @property
    def category_root(self) -> Path:
        return Path(self.dataset_root) / self.category

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def resolved_stats_path(self) -> Path:
        return Path(self.stats_path) if self.stats_path else self.out / "noise_stats.pt"

    def resolved_checkpoint_path(self) -> Path:
        return Path(self.checkpoint_path) if self.checkpoint_path else self.out / "checkpoint.pt"

    @property
    def noise_active(self) -> bool:
        return self.lmgn_enabled and self.noise_type != "none"

    @property
    def uses_global_teacher(self) -> bool:
        return self.teacher_global != "none"

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def fingerprint(self) -> str:
        """Hash of every field that changes what gets trained.

        Paths and the output location are excluded so that identical
        experiments written to different folders compare equal.
        """
        skip = {"dataset_root", "output_dir", "stats_path", "checkpoint_path", "export_heatmaps", "device"}
        payload = {k: v for k, v in self.to_dict().items() if k not in skip}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_REQUIRED = ("dataset_root", "category")

# field name -> (kind, nullable); kinds drive coercion in _coerce
_KINDS: dict[str, tuple[str, bool]] = {
    "dataset_root": ("str", False),
    "category": ("str", False),
    "output_dir": ("str", False),
    "image_size": ("int", False),
    "layers_used": ("int_list", False),
    "toy_mode": ("bool", False),
    "teacher_local": ("str", False),
    "teacher_global": ("str", False),
    "teacher_local_weights": ("str", True),
    "teacher_global_weights": ("str", True),
    "teacher_seed": ("int", False),
    "normalization_mean": ("float_triple", True),
    "normalization_std": ("float_triple", True),
    "algf_enabled": ("bool", False),
    "algf_bypass": ("str", False),
    "attention_heads": ("int", False),
    "algf_projections": ("bool", False),
    "emb_channels": ("int", True),
    "lmgn_enabled": ("bool", False),
    "noise_type": ("str", False),
    "noise_mode": ("str", False),
    "noise_layers": ("int_list", True),
    "randn_scale": ("float", False),
    "covariance_mode": ("str", False),
    "covariance_eps": ("float", False),
    "patch_side_fractions": ("float_pair", False),
    "stats_path": ("str", True),
    "alpha": ("float", False),
    "swap_loss_roles": ("bool", False),
    "learning_rate": ("float", False),
    "adam_betas": ("float_pair", False),
    "epochs": ("int", False),
    "batch_size": ("int", False),
    "seed": ("int", False),
    "deterministic": ("bool", False),
    "checkpoint_interval": ("int", False),
    "checkpoint_path": ("str", True),
    "device": ("str", False),
    "smoothing_sigma": ("float", True),
    "pro_fpr_limit": ("float", False),
    "pro_n_thresholds": ("int", False),
    "connectivity": ("int", False),
    "export_heatmaps": ("bool", False),
    "synth_n_train": ("int", False),
    "synth_n_test_good": ("int", False),
    "synth_n_test_defect": ("int", False),
    "synth_texture": ("str", False),
    "synth_defect_types": ("str_list", False),
    "synth_illumination_levels": ("float_list", False),
    "synth_resolution_levels": ("float_list", False),
    "synth_image_size": ("int", False),
}
assert set(_KINDS) == set(_FIELDS), "every config field needs a coercion kind"


def _coerce(name: str, value: Any) -> Any:
    kind, nullable = _KINDS[name]
    if value is None:
        if nullable:
            return None
        raise ConfigError(f"{name}: must not be null")

    def bad(expected: str) -> ConfigError:
        return ConfigError(f"{name}: expected {expected}, got {value!r} ({type(value).__name__})")

    def as_int(v: Any) -> int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise bad("integer")
        return v

    def as_float(v: Any) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise bad("number")
        return float(v)

    if kind == "str":
        if not isinstance(value, str):
            raise bad("string")
        return value
    if kind == "int":
        return as_int(value)
    if kind == "float":
        return as_float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad("boolean")
        return value
    if not isinstance(value, (list, tuple)):
        raise bad("list")
    if kind == "int_list":
        return [as_int(v) for v in value]
    if kind == "float_list":
        return [as_float(v) for v in value]
    if kind == "str_list":
        if not all(isinstance(v, str) for v in value):
            raise bad("list of strings")
        return list(value)
    size = {"float_pair": 2, "float_triple": 3}[kind]
    if len(value) != size:
        raise bad(f"{size} numbers")
    return tuple(as_float(v) for v in value)


def _fill_derived(raw: dict[str, Any]) -> None:
    toy = raw.get("toy_mode", False)
    if not raw.get("output_dir"):
        raw["output_dir"] = os.environ.get("HETNET_OUTPUT_DIR", "runs")
    if not raw.get("teacher_local"):
        raw["teacher_local"] = "toy_cnn" if toy else "wide_resnet50_2"
    if not raw.get("teacher_global"):
        raw["teacher_global"] = "toy_attn" if toy else "swin_t"
    if raw.get("normalization_mean") is None:
        raw["normalization_mean"] = TOY_MEAN if toy else IMAGENET_MEAN
    if raw.get("normalization_std") is None:
        raw["normalization_std"] = TOY_STD if toy else IMAGENET_STD
    if not raw.get("noise_type"):
        raw["noise_type"] = "multivariate_gaussian" if raw.get("lmgn_enabled", True) else "none"
    if not raw.get("covariance_mode"):
        # full covariance at C=1024, 16x16 needs ~17 GB
        raw["covariance_mode"] = "full" if toy else "diagonal"


def _validate(cfg: ExperimentConfig) -> None:
    def fail(name: str, why: str) -> None:
        raise ConfigError(f"{name}: {why}")

    if cfg.alpha < 0:
        fail("alpha", "must be >= 0")
    if cfg.learning_rate <= 0:
        fail("learning_rate", "must be > 0")
    if cfg.epochs < 1:
        fail("epochs", "must be >= 1")
    if cfg.batch_size < 1:
        fail("batch_size", "must be >= 1")
    if cfg.image_size < 1:
        fail("image_size", "must be >= 1")
    layers = cfg.layers_used
    if not layers:
        fail("layers_used", "must be nonempty")
    if any(b <= a for a, b in zip(layers, layers[1:])):
        fail("layers_used", f"{layers} is not strictly increasing")
    if layers[0] < 1 or layers[-1] > 3:
        fail("layers_used", "stage indices must lie in {1, 2, 3}")
    if cfg.noise_layers is not None and not set(cfg.noise_layers) <= set(layers):
        fail("noise_layers", "must be a subset of layers_used")
    for name in ("teacher_local",):
        if getattr(cfg, name) not in BACKBONES:
            fail(name, f"unknown backbone {getattr(cfg, name)!r}; choose from {BACKBONES}")
    if cfg.teacher_global not in BACKBONES + ("none",):
        fail("teacher_global", f"unknown backbone {cfg.teacher_global!r}")
    if cfg.algf_enabled and cfg.teacher_global == "none":
        fail("algf_enabled", "ALGF needs a global teacher; set teacher_global or disable algf")
    if cfg.noise_type not in NOISE_TYPES:
        fail("noise_type", f"choose from {NOISE_TYPES}")
    if cfg.lmgn_enabled and cfg.noise_type == "none":
        fail("noise_type", "lmgn_enabled=true requires a noise type other than none")
    if not cfg.lmgn_enabled and cfg.noise_type != "none":
        fail("noise_type", "lmgn_enabled=false requires noise_type=none")
    if cfg.noise_mode not in NOISE_MODES:
        fail("noise_mode", f"choose from {NOISE_MODES}")
    if cfg.covariance_mode not in COVARIANCE_MODES:
        fail("covariance_mode", f"choose from {COVARIANCE_MODES}")
    if cfg.algf_bypass not in ALGF_BYPASSES:
        fail("algf_bypass", f"choose from {ALGF_BYPASSES}")
    if cfg.covariance_eps < 0:
        fail("covariance_eps", "must be >= 0")
    lo, hi = cfg.patch_side_fractions
    if not 0 < lo <= hi <= 1:
        fail("patch_side_fractions", "need 0 < lo <= hi <= 1")
    if cfg.randn_scale < 0:
        fail("randn_scale", "must be >= 0")
    if not 0 <= cfg.adam_betas[0] < 1 or not 0 <= cfg.adam_betas[1] < 1:
        fail("adam_betas", "each beta must lie in [0, 1)")
    if cfg.attention_heads < 1:
        fail("attention_heads", "must be >= 1")
    if cfg.emb_channels is not None and cfg.emb_channels < 1:
        fail("emb_channels", "must be >= 1")
    if cfg.smoothing_sigma is not None and cfg.smoothing_sigma < 0:
        fail("smoothing_sigma", "must be >= 0 or null")
    if not 0 < cfg.pro_fpr_limit <= 1:
        fail("pro_fpr_limit", "must lie in (0, 1]")
    if cfg.pro_n_thresholds < 2:
        fail("pro_n_thresholds", "must be >= 2")
    if cfg.connectivity not in (4, 8):
        fail("connectivity", "must be 4 or 8")
    if cfg.checkpoint_interval < 0:
        fail("checkpoint_interval", "must be >= 0")
    for name in ("synth_n_train", "synth_n_test_good", "synth_n_test_defect", "synth_image_size"):
        if getattr(cfg, name) < 1:
            fail(name, "must be >= 1")
    if not cfg.synth_defect_types:
        fail("synth_defect_types", "need at least one defect type")
    unknown = set(cfg.synth_defect_types) - set(DEFECT_TYPES)
    if unknown:
        fail("synth_defect_types", f"unknown defect types {sorted(unknown)}")
    if cfg.synth_texture not in TEXTURES:
        fail("synth_texture", f"choose from {TEXTURES}")
    if not cfg.synth_illumination_levels or any(v <= 0 for v in cfg.synth_illumination_levels):
        fail("synth_illumination_levels", "need positive levels")
    if not cfg.synth_resolution_levels or any(not 0 < v <= 1 for v in cfg.synth_resolution_levels):
        fail("synth_resolution_levels", "levels must lie in (0, 1]")


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config from a mapping; defaults fill missing keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a key/value mapping")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = [k for k in _REQUIRED if raw.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    values = {k: _coerce(k, v) for k, v in raw.items()}
    _fill_derived(values)
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, _, value = text.partition("=")
    return key.strip(), yaml.safe_load(value)


def load_config(path: str | os.PathLike, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat key/value document")
    for item in overrides or []:
        key, value = parse_override(item)
        raw[key] = value
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(cfg))


def replace(cfg: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    """Copy with changes applied, re-running derivation and validation."""
    raw = cfg.to_dict()
    raw.update(changes)
    return config_from_dict(raw)
