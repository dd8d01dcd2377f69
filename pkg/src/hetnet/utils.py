"""Seeding, RNG substreams and checksum helpers shared across modules."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def substream_seed(seed: int, *names: object) -> int:
    """Derive a stable 63-bit seed for a named substream of ``seed``."""
    text = ":".join([str(seed), *map(str, names)])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def generator(seed: int, *names: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, *names))
    return g


def numpy_rng(seed: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, *names))


def set_determinism(seed: int, enabled: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = enabled
        torch.backends.cudnn.benchmark = not enabled


def tensor_checksum(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum(dict(module.state_dict()))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
