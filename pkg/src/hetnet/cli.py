"""Command-line entry point: ``hetnet <command> --config <path> [--override key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .manifest import RunManifest

logger = logging.getLogger("hetnet")

COMMANDS = ("synth-data", "fit-noise-stats", "train", "eval", "infer", "visualize", "ablate")


class CommandError(RuntimeError):
    """A prerequisite for the requested command is missing."""


def _manifest(command: str, cfg: ExperimentConfig) -> RunManifest:
    return RunManifest(command, cfg.to_dict(), cfg.seed, fingerprint=cfg.fingerprint())


def cmd_synth_data(cfg: ExperimentConfig, args) -> RunManifest:
    from .dataset import CorpusSpec, scan_layout, synth_corpus

    base = synth_corpus(CorpusSpec.from_config(cfg), cfg.dataset_root, cfg.category, cfg.seed)
    train, test = scan_layout(cfg.dataset_root, cfg.category)
    man = _manifest("synth-data", cfg)
    man.add_artifact("corpus", base)
    man.results = {"n_train": len(train), "n_test": len(test)}
    return man


def cmd_fit_noise_stats(cfg: ExperimentConfig, args) -> RunManifest:
    from .dataset import scan_layout
    from .lmgn import fit_stats
    from .teacher import TeacherPair

    train, _ = scan_layout(cfg.dataset_root, cfg.category)
    teachers = TeacherPair.from_config(cfg)
    stats = fit_stats(teachers.local, train, cfg)
    path = cfg.resolved_stats_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    stats.save(path)
    man = _manifest("fit-noise-stats", cfg)
    man.add_artifact("noise_stats", path)
    man.results = {"n_samples": stats.n_samples, "layers": list(stats.layers), "covariance_mode": stats.mode}
    return man


def cmd_train(cfg: ExperimentConfig, args) -> RunManifest:
    from .training import load_stats_for, train

    needs_stats = cfg.noise_active and cfg.noise_type == "multivariate_gaussian"
    stats = load_stats_for(cfg)
    if needs_stats and stats is None:
        raise CommandError(
            f"lmgn is enabled but no noise statistics were found at {cfg.resolved_stats_path()}; "
            "run `hetnet fit-noise-stats` with the same config first"
        )
    _, man = train(cfg, stats=stats, resume_from=args.resume)
    if stats is not None:
        man.add_artifact("noise_stats", cfg.resolved_stats_path())
    return man


def _load_model(cfg: ExperimentConfig, checkpoint: str | None):
    from .training import load_trained

    path = Path(checkpoint) if checkpoint else cfg.resolved_checkpoint_path()
    if not path.is_file():
        raise CommandError(f"no checkpoint at {path}; run `hetnet train` first")
    model, teachers, _ = load_trained(path, cfg)
    return model, teachers, path


def cmd_eval(cfg: ExperimentConfig, args) -> RunManifest:
    from dataclasses import asdict

    from .dataset import scan_layout
    from .metrics import evaluate

    model, teachers, ckpt = _load_model(cfg, args.checkpoint)
    _, test = scan_layout(cfg.dataset_root, cfg.category)
    report = evaluate(model, teachers, test, cfg)
    js, cs = report.write(cfg.out)
    man = _manifest("eval", cfg)
    man.add_artifact("checkpoint", ckpt)
    man.add_artifact("report_json", js)
    man.add_artifact("report_csv", cs)
    man.results = asdict(report)
    if cfg.export_heatmaps:
        folder = _render_test_heatmaps(cfg, model, teachers, test)
        man.add_artifact("heatmaps", folder)
    logger.info("I-AUROC %.4f  P-AUROC %.4f  PRO %.4f", report.image_auroc, report.pixel_auroc, report.pro)
    return man


def _render_test_heatmaps(cfg, model, teachers, entries, folder: Path | None = None) -> Path:
    from .dataset import load_batch
    from .scoring import denormalize, export_heatmap, score

    folder = folder or cfg.out / "heatmaps"
    folder.mkdir(parents=True, exist_ok=True)
    entries = list(entries)
    for s in range(0, len(entries), 16):
        chunk = entries[s : s + 16]
        images, _, _ = load_batch(chunk, cfg.image_size, cfg.normalization_mean, cfg.normalization_std)
        for e, img, res in zip(chunk, images, score(model, teachers, images, cfg.smoothing_sigma)):
            rgb = denormalize(img, cfg.normalization_mean, cfg.normalization_std)
            export_heatmap(res, rgb, folder / f"{e.label}_{Path(e.image).stem}_heatmap.png")
    return folder


def cmd_visualize(cfg: ExperimentConfig, args) -> RunManifest:
    from .dataset import scan_layout

    model, teachers, ckpt = _load_model(cfg, args.checkpoint)
    _, test = scan_layout(cfg.dataset_root, cfg.category)
    folder = _render_test_heatmaps(cfg, model, teachers, test)
    man = _manifest("visualize", cfg)
    man.add_artifact("checkpoint", ckpt)
    man.add_artifact("heatmaps", folder)
    man.results = {"n_heatmaps": len(test)}
    return man


def cmd_infer(cfg: ExperimentConfig, args) -> RunManifest:
    from .dataset import IMAGE_SUFFIXES, Entry, load_batch
    from .scoring import denormalize, export_heatmap, score

    if not args.input:
        raise CommandError("infer needs --input <dir>")
    src = Path(args.input)
    if not src.is_dir():
        raise CommandError(f"input directory not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CommandError(f"no images in {src}")
    model, teachers, ckpt = _load_model(cfg, args.checkpoint)
    dest = Path(args.output) if args.output else cfg.out / "infer"
    dest.mkdir(parents=True, exist_ok=True)
    heatmaps = args.heatmaps or cfg.export_heatmaps
    man = _manifest("infer", cfg)
    man.add_artifact("checkpoint", ckpt)
    scores = {}
    for s in range(0, len(files), 16):
        chunk = files[s : s + 16]
        images, _, _ = load_batch([Entry(p, "unknown") for p in chunk], cfg.image_size, cfg.normalization_mean, cfg.normalization_std)
        for path, img, res in zip(chunk, images, score(model, teachers, images, cfg.smoothing_sigma)):
            out_csv = dest / f"{path.stem}_score.csv"
            with open(out_csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["image", "score"])
                w.writerow([path.name, f"{res.image_score:.8f}"])
            man.add_artifact(f"{path.stem}_score", out_csv)
            if heatmaps:
                rgb = denormalize(img, cfg.normalization_mean, cfg.normalization_std)
                man.add_artifact(f"{path.stem}_heatmap", export_heatmap(res, rgb, dest / f"{path.stem}_heatmap.png"))
            scores[path.name] = res.image_score
    man.results = {"scores": scores}
    return man


def cmd_ablate(cfg: ExperimentConfig, args) -> RunManifest:
    from .ablation import load_grid, run_grid

    grid = load_grid(args.grid) if args.grid else None
    table = run_grid(grid, cfg)
    man = _manifest("ablate", cfg)
    man.add_artifact("ablation_table", table.path)
    man.results = {"means": table.means(), "failed_cells": table.failures()}
    return man


HANDLERS = {
    "synth-data": cmd_synth_data,
    "fit-noise-stats": cmd_fit_noise_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "visualize": cmd_visualize,
    "ablate": cmd_ablate,
}


def dispatch(command: str, cfg: ExperimentConfig, args=None) -> RunManifest:
    """Run one command and write its manifest into ``cfg.output_dir``."""
    if command not in HANDLERS:
        raise CommandError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    args = args or build_parser().parse_args([command, "--config", "-"])
    man = HANDLERS[command](cfg, args)
    man.write(cfg.out)
    return man


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetnet", description="Heterogeneous-teacher reverse-distillation anomaly detection.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML/JSON key-value config file")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--checkpoint", help="checkpoint for eval/infer/visualize (default: <output_dir>/checkpoint.pt)")
    parser.add_argument("--resume", help="train: continue from this checkpoint")
    parser.add_argument("--input", help="infer: folder of images to score")
    parser.add_argument("--output", help="infer: destination folder (default: <output_dir>/infer)")
    parser.add_argument("--heatmaps", action="store_true", help="infer: also write <name>_heatmap.png")
    parser.add_argument("--grid", help="ablate: grid file (default: teacher-structure and noise-type rows)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override)
        man = dispatch(args.command, cfg, args)
    except (ConfigError, CommandError) as exc:
        print(f"hetnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as a clean message, full trace with -v
        if args.verbose:
            raise
        print(f"hetnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: manifest written to {Path(cfg.output_dir) / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
