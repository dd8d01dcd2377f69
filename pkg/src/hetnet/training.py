"""Losses, the optimisation loop and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .config import ExperimentConfig, config_from_dict
from .dataset import load_batch, scan_layout
from .lmgn import GaussianFieldStats, NoiseError, inject, random_plan, sample_noise, standard_normal_noise
from .manifest import RunManifest
from .model import HetNet, build_model
from .teacher import TeacherPair
from .utils import generator, module_checksum, set_determinism

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hetnet-checkpoint"
CHECKPOINT_VERSION = 1
COSINE_GUARD = 1e-8
# teacher features above this many bytes are extracted per batch instead of cached
FEATURE_CACHE_LIMIT = 1 << 30


class TrainingError(RuntimeError):
    pass


def anomaly_map(f_t: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity along channels: (B) x C x H x W -> (B) x H x W.

    Evaluated as half the squared distance between the unit vectors, which is
    the same quantity but exactly 0 for identical inputs and never negative.
    A zero vector (guarded by ``COSINE_GUARD``) scores 0.5 against anything else.
    """
    if f_t.shape != f_s.shape:
        raise ValueError(f"shape mismatch {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
    dim = -3
    u = f_t / (f_t.norm(dim=dim, keepdim=True) + COSINE_GUARD)
    v = f_s / (f_s.norm(dim=dim, keepdim=True) + COSINE_GUARD)
    return 0.5 * (u - v).pow(2).sum(dim)


def branch_loss(maps: dict[int, torch.Tensor], layers=None) -> torch.Tensor:
    """Sum over layers of the spatial mean of each map, averaged over the batch."""
    if layers is not None:
        missing = [k for k in layers if k not in maps]
        if missing:
            raise ValueError(f"missing anomaly maps for layers {missing}")
    return sum(m.mean() for _, m in sorted(maps.items()))


def total_loss(l_kd, l_recon, alpha: float):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return l_kd + alpha * l_recon


@dataclass
class LossBreakdown:
    sr_layers: dict[int, float]
    sd_layers: dict[int, float]
    l_kd: float
    l_recon: float
    l_total: float
    alpha: float


def compute_losses(
    teacher_local: dict[int, torch.Tensor],
    f_sr: dict[int, torch.Tensor],
    f_sd: dict[int, torch.Tensor] | None,
    alpha: float,
    swap_roles: bool = False,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Clean-branch maps feed L_KD and noisy-branch maps feed L_Recon (swapped on request)."""
    sr_maps = {k: anomaly_map(teacher_local[k], f_sr[k]) for k in f_sr}
    sr = branch_loss(sr_maps)
    if f_sd is None:
        l_kd, l_recon, sd_maps = sr, torch.zeros_like(sr), {}
        total = l_kd
    else:
        sd_maps = {k: anomaly_map(teacher_local[k], f_sd[k]) for k in f_sd}
        sd = branch_loss(sd_maps)
        l_kd, l_recon = (sd, sr) if swap_roles else (sr, sd)
        total = total_loss(l_kd, l_recon, alpha)
    breakdown = LossBreakdown(
        {k: float(m.detach().mean()) for k, m in sr_maps.items()},
        {k: float(m.detach().mean()) for k, m in sd_maps.items()},
        float(l_kd.detach()),
        float(l_recon.detach()),
        float(total.detach()),
        alpha,
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict[str, Any]
    epoch: int
    config: dict[str, Any]
    loss_trace: list[dict[str, float]]
    rng: dict[str, Any]
    teacher_checksums: dict[str, str]

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "model": self.model_state,
                "optimizer": self.optimizer_state,
                "epoch": self.epoch,
                "config": self.config,
                "loss_trace": self.loss_trace,
                "rng": self.rng,
                "teacher_checksums": self.teacher_checksums,
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise TrainingError(f"checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise TrainingError(f"{path} is not a checkpoint")
        return cls(
            blob["model"],
            blob["optimizer"],
            blob["epoch"],
            blob["config"],
            blob["loss_trace"],
            blob["rng"],
            blob["teacher_checksums"],
        )

    @property
    def cfg(self) -> ExperimentConfig:
        return config_from_dict(dict(self.config))


def load_trained(path: str | Path, cfg: ExperimentConfig | None = None):
    """Rebuild teachers and the trained model from a checkpoint."""
    ckpt = Checkpoint.load(path)
    cfg = cfg or ckpt.cfg
    teachers = TeacherPair.from_config(cfg)
    if teachers.checksums() != ckpt.teacher_checksums:
        raise TrainingError("checkpoint was trained against different teacher weights")
    model = build_model(cfg, teachers)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, teachers, ckpt


# ---------------------------------------------------------------------------
# training loop


class FeatureSource:
    """Teacher features for the training set, cached in memory when small enough."""

    def __init__(self, cfg: ExperimentConfig, teachers: TeacherPair, entries):
        self.cfg, self.teachers, self.entries = cfg, teachers, list(entries)
        images, _, _ = load_batch(self.entries, cfg.image_size, cfg.normalization_mean, cfg.normalization_std)
        self.images = images
        self.cache = None
        probe_local, probe_global = teachers.extract(images[:1].to(cfg.device))
        per_image = sum(v.numel() for v in probe_local.maps.values())
        if probe_global is not None:
            per_image += sum(v.numel() for v in probe_global.maps.values())
        if per_image * 4 * len(images) <= FEATURE_CACHE_LIMIT:
            self.cache = self._extract(torch.arange(len(images)))

    def __len__(self):
        return len(self.entries)

    def _extract(self, idx: torch.Tensor):
        local, global_ = self.teachers.extract(self.images[idx].to(self.cfg.device))
        return local.maps, (global_.maps if global_ is not None else None)

    def get(self, idx: torch.Tensor):
        if self.cache is None:
            return self._extract(idx)
        local, global_ = self.cache
        return {k: v[idx] for k, v in local.items()}, ({k: v[idx] for k, v in global_.items()} if global_ else None)


def make_noise(cfg: ExperimentConfig, stats, local: dict[int, torch.Tensor], gen: torch.Generator):
    layers = cfg.noise_layers or cfg.layers_used
    shapes = {k: tuple(local[k].shape[-2:]) for k in layers}
    plans = [random_plan(shapes, cfg.patch_side_fractions, gen) for _ in range(next(iter(local.values())).shape[0])]
    if cfg.noise_type == "standard_normal":
        return standard_normal_noise({k: tuple(local[k].shape[1:]) for k in layers}, plans, gen, cfg.randn_scale)
    return sample_noise(stats, plans, gen)


def check_stats(cfg: ExperimentConfig, stats: GaussianFieldStats | None, teachers: TeacherPair) -> None:
    if not (cfg.noise_active and cfg.noise_type == "multivariate_gaussian"):
        return
    if stats is None:
        raise TrainingError(
            f"noise statistics missing ({cfg.resolved_stats_path()}); run `hetnet fit-noise-stats` first"
        )
    if stats.backbone_id != teachers.local.backbone_id:
        raise TrainingError(f"noise statistics were fitted on {stats.backbone_id}, teacher is {teachers.local.backbone_id}")
    needed = set(cfg.noise_layers or cfg.layers_used)
    if not needed <= set(stats.layers):
        raise TrainingError(f"noise statistics lack layers {sorted(needed - set(stats.layers))}")


def train_step(model: HetNet, cfg: ExperimentConfig, local, global_, stats, gen):
    f_sr = model(local, global_)
    f_sd = None
    if cfg.noise_active:
        noise = make_noise(cfg, stats, local, gen)
        noisy = inject(local, noise, cfg.noise_mode)
        f_sd = model(noisy, global_)
    return compute_losses(local, f_sr, f_sd, cfg.alpha, cfg.swap_loss_roles)


def _save_checkpoint(path, model, optimizer, epoch, cfg, trace, teachers) -> None:
    Checkpoint(
        {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        optimizer.state_dict(),
        epoch,
        cfg.to_dict(),
        trace,
        {"seed": cfg.seed, "scheme": "stateless per-(epoch, step) substreams"},
        teachers.checksums(),
    ).save(path)


def train(
    cfg: ExperimentConfig,
    train_entries=None,
    teachers: TeacherPair | None = None,
    stats: GaussianFieldStats | None = None,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
    write_artifacts: bool = True,
) -> tuple[HetNet, RunManifest]:
    """Train fusion + student; returns the model and a manifest with the loss trace."""
    set_determinism(cfg.seed, cfg.deterministic)
    if train_entries is None:
        train_entries, _ = scan_layout(cfg.dataset_root, cfg.category)
    teachers = teachers or TeacherPair.from_config(cfg)
    check_stats(cfg, stats, teachers)
    teacher_sums = teachers.checksums()

    model = build_model(cfg, teachers)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.adam_betas))
    trace: list[dict[str, float]] = []
    start_epoch = 0
    if resume_from is not None:
        ckpt = Checkpoint.load(resume_from)
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch, trace = ckpt.epoch, list(ckpt.loss_trace)

    source = FeatureSource(cfg, teachers, train_entries)
    n = len(source)
    out = cfg.out
    log_path = out / "train_log.csv"
    ckpt_path = cfg.resolved_checkpoint_path()
    if write_artifacts:
        out.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "step", "L_KD", "L_Recon", "L_Total"])

    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    model.train()
    for epoch in range(start_epoch, last_epoch):
        order = torch.randperm(n, generator=generator(cfg.seed, "order", epoch))
        rows = []
        for step, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            local, global_ = source.get(idx)
            gen = generator(cfg.seed, "noise", epoch, step)
            loss, parts = train_step(model, cfg, local, global_, stats, gen)
            if not math.isfinite(parts.l_total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            record = {"epoch": epoch, "step": step, "L_KD": parts.l_kd, "L_Recon": parts.l_recon, "L_Total": parts.l_total}
            trace.append(record)
            rows.append(record)
        if write_artifacts:
            with open(log_path, "a", newline="") as fh:
                w = csv.writer(fh)
                for r in rows:
                    w.writerow([r["epoch"], r["step"], f"{r['L_KD']:.8f}", f"{r['L_Recon']:.8f}", f"{r['L_Total']:.8f}"])
            interval = cfg.checkpoint_interval
            if interval and (epoch + 1) % interval == 0 and epoch + 1 < last_epoch:
                _save_checkpoint(ckpt_path, model, optimizer, epoch + 1, cfg, trace, teachers)
        mean_total = sum(r["L_Total"] for r in rows) / len(rows)
        logger.info("epoch %d/%d  L_Total %.5f", epoch + 1, cfg.epochs, mean_total)

    if teachers.checksums() != teacher_sums:
        raise TrainingError("teacher parameters changed during training")
    model.eval()
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed, fingerprint=cfg.fingerprint())
    manifest.rng = {"seed": cfg.seed, "substreams": ["init", "order/<epoch>", "noise/<epoch>/<step>"]}
    manifest.loss_trace = trace
    manifest.results = {"epochs_completed": last_epoch, "student_checksum": module_checksum(model)}
    if write_artifacts:
        _save_checkpoint(ckpt_path, model, optimizer, last_epoch, cfg, trace, teachers)
        manifest.add_artifact("checkpoint", ckpt_path)
        manifest.add_artifact("train_log", log_path)
    return model, manifest


def epoch_means(trace: list[dict[str, float]], key: str = "L_Total") -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in trace:
        by_epoch.setdefault(int(r["epoch"]), []).append(r[key])
    return [sum(v) / len(v) for _, v in sorted(by_epoch.items())]


def load_stats_for(cfg: ExperimentConfig) -> GaussianFieldStats | None:
    if not (cfg.noise_active and cfg.noise_type == "multivariate_gaussian"):
        return None
    path = cfg.resolved_stats_path()
    if not path.is_file():
        return None
    try:
        return GaussianFieldStats.load(path)
    except NoiseError as exc:
        raise TrainingError(str(exc)) from exc

