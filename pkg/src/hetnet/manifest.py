"""Run manifests: what a command was run with and what it produced."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import __version__

MANIFEST_NAME = "manifest.json"


class ManifestError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    version: str = __version__
    fingerprint: str = ""
    rng: dict[str, Any] = field(default_factory=dict)
    loss_trace: list[dict[str, float]] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    results: dict[str, Any] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def add_artifact(self, name: str, path: str | Path) -> None:
        self.artifacts[name] = str(path)

    def missing_artifacts(self) -> list[str]:
        return [name for name, p in self.artifacts.items() if not Path(p).exists()]

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "version": self.version,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "rng": self.rng,
            "config": self.config,
            "artifacts": self.artifacts,
            "results": self.results,
            "loss_trace": self.loss_trace,
            "started": self.started,
            "finished": self.finished,
        }

    def write(self, out_dir: str | Path) -> Path:
        self.finished = time.time()
        missing = self.missing_artifacts()
        if missing:
            raise ManifestError(f"manifest lists artifacts that do not exist: {missing}")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())
