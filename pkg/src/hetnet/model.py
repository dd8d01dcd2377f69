"""Trainable part of the detector: fusion followed by the shared student."""

from __future__ import annotations

import torch
from torch import nn

from .fusion import HybridFusion
from .student import StudentNetwork, StudentSpec
from .teacher import TeacherPair


class HetNet(nn.Module):
    def __init__(self, fusion: HybridFusion, student: StudentNetwork):
        super().__init__()
        self.fusion = fusion
        self.student = student

    def prototype(self, local: dict[int, torch.Tensor], global_: dict[int, torch.Tensor] | None) -> torch.Tensor:
        return self.fusion(local, global_)

    def forward(self, local: dict[int, torch.Tensor], global_: dict[int, torch.Tensor] | None) -> dict[int, torch.Tensor]:
        return self.student(self.fusion(local, global_))


def build_model(cfg, teachers: TeacherPair, seed: int | None = None) -> HetNet:
    """Construct fusion + student with seed-derived initialisation."""
    from .utils import substream_seed

    layers = list(cfg.layers_used)
    local = teachers.local
    local_channels = {k: local.channels(k) for k in layers}
    global_channels = None
    if teachers.global_ is not None:
        global_channels = {k: teachers.global_.channels(k) for k in layers}
    strides = {k: local.stage_specs[k - 1].stride for k in layers}
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(substream_seed(cfg.seed if seed is None else seed, "init"))
        fusion = HybridFusion(
            local_channels,
            global_channels,
            strides,
            heads=cfg.attention_heads,
            algf_enabled=cfg.algf_enabled,
            bypass=cfg.algf_bypass,
            projections=cfg.algf_projections,
        )
        student = StudentNetwork(StudentSpec.from_config(cfg, local, fusion.out_channels))
    return HetNet(fusion, student).to(cfg.device)
