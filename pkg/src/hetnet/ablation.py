"""Ablation grids over teacher structure, fusion, noise module and noise type.

A grid is a list of named override sets applied to a base config; every
(cell, seed) pair is trained and evaluated independently. Cells never share
random state: each run derives its streams from its own config seed, so the
order of cells does not influence any result.
"""

from __future__ import annotations

import csv
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .config import ConfigError, ExperimentConfig, config_from_dict

logger = logging.getLogger(__name__)

COLUMNS = ["cell", "TE", "ALGF", "LMGN", "noise", "seed", "I-AUROC", "P-AUROC", "P-AUPRO", "status"]


class AblationError(RuntimeError):
    pass


@dataclass
class Cell:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass
class AblationGrid:
    cells: list[Cell]
    seeds: list[int] | None = None  # None: base seed, base seed + 1, base seed + 2
    output: str | None = None  # default <output_dir>/ablation.csv

    def resolve_seeds(self, base_seed: int) -> list[int]:
        return list(self.seeds) if self.seeds is not None else [base_seed + i for i in range(3)]

    def cell_config(self, base: ExperimentConfig, cell: Cell, seed: int) -> ExperimentConfig:
        raw = base.to_dict()
        # noise_type follows lmgn_enabled unless the cell names it explicitly
        raw.pop("noise_type")
        raw.update(cell.overrides)
        raw["seed"] = seed
        raw["output_dir"] = str(Path(base.output_dir) / "ablation" / cell.name / f"seed{seed}")
        return config_from_dict(raw)

    def validate(self, base: ExperimentConfig) -> None:
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise AblationError("cell names must be unique")
        for cell in self.cells:
            try:
                self.cell_config(base, cell, base.seed)
            except ConfigError as exc:
                raise AblationError(f"cell {cell.name!r}: {exc}") from exc


def _single_teacher(local: str) -> dict[str, Any]:
    return {"teacher_local": local, "teacher_global": "none", "algf_enabled": False, "lmgn_enabled": False}


def structure_cells(toy_mode: bool = True) -> list[Cell]:
    cnn, attn = ("toy_cnn", "toy_attn") if toy_mode else ("wide_resnet50_2", "swin_t")
    return [
        Cell("cnn", _single_teacher(cnn)),
        Cell("trans", _single_teacher(attn)),
        Cell("hte", {"algf_enabled": False, "lmgn_enabled": False}),
        Cell("hte_algf", {"algf_enabled": True, "lmgn_enabled": False}),
        Cell("hte_lmgn", {"algf_enabled": False, "lmgn_enabled": True}),
        Cell("hte_algf_lmgn", {"algf_enabled": True, "lmgn_enabled": True}),
    ]


def noise_cells() -> list[Cell]:
    return [
        Cell("noise_none", {"lmgn_enabled": False}),
        Cell("noise_randn", {"lmgn_enabled": True, "noise_type": "standard_normal"}),
        Cell("noise_mgds", {"lmgn_enabled": True, "noise_type": "multivariate_gaussian"}),
    ]


def default_grid(toy_mode: bool = True) -> AblationGrid:
    return AblationGrid(structure_cells(toy_mode) + noise_cells())


def load_grid(path: str | Path) -> AblationGrid:
    """Grid file: ``cells`` (list of {name, overrides}) and/or ``preset`` (structure, noise, all); optional ``seeds``."""
    doc = yaml.safe_load(Path(path).read_text()) or {}
    cells = []
    preset = doc.get("preset")
    toy = doc.get("toy_mode", True)
    if preset in ("structure", "all"):
        cells += structure_cells(toy)
    if preset in ("noise", "all"):
        cells += noise_cells()
    if preset not in (None, "structure", "noise", "all"):
        raise AblationError(f"unknown preset {preset!r}")
    for c in doc.get("cells", []):
        if "name" not in c:
            raise AblationError(f"grid cell without a name: {c}")
        cells.append(Cell(str(c["name"]), dict(c.get("overrides") or {})))
    if not cells:
        raise AblationError(f"{path}: grid has no cells")
    seeds = doc.get("seeds")
    return AblationGrid(cells, [int(s) for s in seeds] if seeds is not None else None, doc.get("output"))


def _describe(cfg: ExperimentConfig) -> dict[str, str]:
    if not cfg.uses_global_teacher:
        te = "Trans" if cfg.teacher_local in ("toy_attn", "swin_t") else "CNN"
    else:
        te = "HTE"
    noise = {"none": "-", "standard_normal": "randn", "multivariate_gaussian": "mGds"}[cfg.noise_type]
    return {"TE": te, "ALGF": "yes" if cfg.algf_enabled else "no", "LMGN": "yes" if cfg.noise_active else "no", "noise": noise}


def run_cell(cfg: ExperimentConfig) -> tuple[float, float, float]:
    from .dataset import scan_layout
    from .lmgn import fit_stats
    from .metrics import evaluate
    from .teacher import TeacherPair
    from .training import train

    train_idx, test_idx = scan_layout(cfg.dataset_root, cfg.category)
    teachers = TeacherPair.from_config(cfg)
    stats = None
    if cfg.noise_active and cfg.noise_type == "multivariate_gaussian":
        stats = fit_stats(teachers.local, train_idx, cfg)
    model, _ = train(cfg, train_idx, teachers, stats, write_artifacts=False)
    report = evaluate(model, teachers, test_idx, cfg)
    return report.image_auroc, report.pixel_auroc, report.pro


@dataclass
class AblationTable:
    path: Path
    rows: list[dict[str, Any]]

    def cell_rows(self, cell: str) -> list[dict[str, Any]]:
        return [r for r in self.rows if r["cell"] == cell and r["seed"] != "mean"]

    def means(self) -> dict[str, dict[str, float]]:
        return {r["cell"]: {k: r[k] for k in ("I-AUROC", "P-AUROC", "P-AUPRO")} for r in self.rows if r["seed"] == "mean"}

    def failures(self) -> dict[str, str]:
        return {f"{r['cell']}/{r['seed']}": r["status"] for r in self.rows if r["status"] not in ("ok", "mean")}


def _mean(values: list[float]) -> float:
    good = [v for v in values if not math.isnan(v)]
    return sum(good) / len(good) if good else float("nan")


def run_grid(grid: AblationGrid | None, base: ExperimentConfig, runner=run_cell) -> AblationTable:
    """Train and evaluate every (cell, seed); a failing cell is recorded, not raised.

    ``runner`` maps a cell config to (image AUROC, pixel AUROC, PRO); tests
    substitute a cheap stand-in.
    """
    from .dataset import scan_layout

    grid = grid or default_grid(base.toy_mode)
    grid.validate(base)
    scan_layout(base.dataset_root, base.category)  # corpus must exist before any cell starts
    seeds = grid.resolve_seeds(base.seed)
    path = Path(grid.output) if grid.output else base.out / "ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)

    rows: list[dict[str, Any]] = []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for cell in grid.cells:
            cell_rows = []
            for seed in seeds:
                cfg = grid.cell_config(base, cell, seed)
                row = {"cell": cell.name, "seed": seed, **_describe(cfg)}
                try:
                    i_au, p_au, p_pro = runner(cfg)
                    row.update({"I-AUROC": i_au, "P-AUROC": p_au, "P-AUPRO": p_pro, "status": "ok"})
                except Exception as exc:  # keep going; the table says what broke
                    logger.error("cell %s seed %d failed:\n%s", cell.name, seed, traceback.format_exc())
                    row.update({"I-AUROC": float("nan"), "P-AUROC": float("nan"), "P-AUPRO": float("nan")})
                    row["status"] = f"failed: {type(exc).__name__}: {exc}"
                writer.writerow(row)
                fh.flush()
                cell_rows.append(row)
            mean = {"cell": cell.name, "seed": "mean", **{k: cell_rows[0][k] for k in ("TE", "ALGF", "LMGN", "noise")}}
            for key in ("I-AUROC", "P-AUROC", "P-AUPRO"):
                mean[key] = _mean([r[key] for r in cell_rows])
            mean["status"] = "mean"
            writer.writerow(mean)
            fh.flush()
            rows += cell_rows + [mean]
    return AblationTable(path, rows)
