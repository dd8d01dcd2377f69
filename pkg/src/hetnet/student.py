"""Student network: one-class embedding bottleneck plus a decoder mirroring the local teacher.

The same module serves both the reconstruction branch (clean prototype
feature) and the denoising branch (noisy prototype feature); sharing is by
construction since there is only one parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class StudentError(RuntimeError):
    pass


def _bn(c):
    return nn.BatchNorm2d(c)


class BasicBlock(nn.Module):
    """Residual block; ``scale`` is 1 (same size), 2 (upsample) or 0.5 (downsample)."""

    def __init__(self, c_in: int, c_out: int, scale: float = 1.0):
        super().__init__()
        if scale == 2:
            self.conv1 = nn.ConvTranspose2d(c_in, c_out, 2, stride=2, bias=False)
        else:
            self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2 if scale == 0.5 else 1, padding=1, bias=False, padding_mode="reflect")
        self.bn1 = _bn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False, padding_mode="reflect")
        self.bn2 = _bn(c_out)
        self.relu = nn.ReLU()
        self.shortcut = None
        if scale != 1 or c_in != c_out:
            if scale == 2:
                proj = nn.ConvTranspose2d(c_in, c_out, 2, stride=2, bias=False)
            else:
                proj = nn.Conv2d(c_in, c_out, 1, stride=2 if scale == 0.5 else 1, bias=False)
            self.shortcut = nn.Sequential(proj, _bn(c_out))

    def forward(self, x, final_relu: bool = True):
        out = self.bn2(self.conv2(self.relu(self.bn1(self.conv1(x)))))
        out = out + (x if self.shortcut is None else self.shortcut(x))
        return self.relu(out) if final_relu else out


class Bottleneck(nn.Module):
    """Wide bottleneck residual block (mid width = out / 2) for full-scale students."""

    def __init__(self, c_in: int, c_out: int, scale: float = 1.0):
        super().__init__()
        mid = c_out // 2
        self.conv1 = nn.Conv2d(c_in, mid, 1, bias=False)
        self.bn1 = _bn(mid)
        if scale == 2:
            self.conv2 = nn.ConvTranspose2d(mid, mid, 2, stride=2, bias=False)
        else:
            self.conv2 = nn.Conv2d(mid, mid, 3, stride=2 if scale == 0.5 else 1, padding=1, bias=False, padding_mode="reflect")
        self.bn2 = _bn(mid)
        self.conv3 = nn.Conv2d(mid, c_out, 1, bias=False)
        self.bn3 = _bn(c_out)
        self.relu = nn.ReLU()
        self.shortcut = None
        if scale != 1 or c_in != c_out:
            if scale == 2:
                proj = nn.ConvTranspose2d(c_in, c_out, 2, stride=2, bias=False)
            else:
                proj = nn.Conv2d(c_in, c_out, 1, stride=2 if scale == 0.5 else 1, bias=False)
            self.shortcut = nn.Sequential(proj, _bn(c_out))

    def forward(self, x, final_relu: bool = True):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        out = out + (x if self.shortcut is None else self.shortcut(x))
        return self.relu(out) if final_relu else out


class Stage(nn.Module):
    def __init__(self, block, c_in: int, c_out: int, n: int, scale: float):
        super().__init__()
        self.blocks = nn.ModuleList([block(c_in, c_out, scale)] + [block(c_out, c_out) for _ in range(n - 1)])

    def forward(self, x, final_relu: bool = True):
        for i, blk in enumerate(self.blocks):
            x = blk(x, final_relu or i < len(self.blocks) - 1)
        return x


@dataclass(frozen=True)
class StudentSpec:
    """Geometry of the student; decoder widths mirror the local teacher."""

    in_channels: int
    emb_channels: int
    teacher_channels: dict[int, int]
    teacher_strides: dict[int, int]
    layers: tuple[int, ...]
    block: str = "basic"
    bottleneck_blocks: int = 1
    decoder_blocks: tuple[int, ...] = (1, 1, 1)  # deepest stage first

    @classmethod
    def from_config(cls, cfg, teacher, in_channels: int) -> "StudentSpec":
        channels = {k: teacher.channels(k) for k in (1, 2, 3)}
        strides = {k: teacher.stage_specs[k - 1].stride for k in (1, 2, 3)}
        deepest = max(cfg.layers_used)
        emb = cfg.emb_channels or 2 * channels[deepest]
        full_scale = not teacher.backbone_id.startswith("toy_")
        return cls(
            in_channels=in_channels,
            emb_channels=emb,
            teacher_channels=channels,
            teacher_strides=strides,
            layers=tuple(cfg.layers_used),
            block="bottleneck" if full_scale else "basic",
            bottleneck_blocks=3 if full_scale else 1,
            decoder_blocks=(3, 4, 6) if full_scale else (1, 1, 1),
        )


class StudentNetwork(nn.Module):
    def __init__(self, spec: StudentSpec):
        super().__init__()
        self.spec = spec
        block = Bottleneck if spec.block == "bottleneck" else BasicBlock
        self.bottleneck = Stage(block, spec.in_channels, spec.emb_channels, spec.bottleneck_blocks, 0.5)
        deepest, shallowest = max(spec.layers), min(spec.layers)
        # decoder stage k produces the mirror of teacher stage k
        self.order = list(range(deepest, shallowest - 1, -1))
        self.stages = nn.ModuleDict()
        c_in = spec.emb_channels
        for i, k in enumerate(self.order):
            if i == 0:
                factor = 2
            else:
                factor = spec.teacher_strides[k + 1] // spec.teacher_strides[k]
            if factor != 2:
                raise StudentError(f"decoder stage {k}: upsampling factor {factor} is not 2")
            n = spec.decoder_blocks[min(i, len(spec.decoder_blocks) - 1)]
            self.stages[str(k)] = Stage(block, c_in, spec.teacher_channels[k], n, 2)
            c_in = spec.teacher_channels[k]
        self.relu = nn.ReLU()

    def embed(self, o: torch.Tensor) -> torch.Tensor:
        if o.shape[1] != self.spec.in_channels:
            raise StudentError(f"expected {self.spec.in_channels} input channels, got {o.shape[1]}")
        return self.bottleneck(o)

    def forward(self, o: torch.Tensor) -> dict[int, torch.Tensor]:
        x = self.embed(o)
        out = {}
        for k in self.order:
            y = self.stages[str(k)](x, final_relu=False)
            if k in self.spec.layers:
                out[k] = y
            x = self.relu(y)
        return out


def student_forward(net: StudentNetwork, feature: torch.Tensor, branch: str = "recon"):
    """Run one branch; ``branch`` is "recon" for the clean feature, "denoise" for the noisy one."""
    from .teacher import FeaturePyramid

    if branch not in ("recon", "denoise"):
        raise StudentError(f"unknown branch {branch!r}")
    return FeaturePyramid(net(feature), f"student_{branch}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
