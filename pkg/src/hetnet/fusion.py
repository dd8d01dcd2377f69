"""Hybrid feature fusion: per-layer local-global attention blocks and multi-scale merging."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class FusionError(RuntimeError):
    pass


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1, return_weights: bool = False):
    """Multi-head attention over token sequences.

    q, k, v: B x N x C. Returns B x N x C (and B x heads x N x N weights).
    Half-precision inputs are promoted to float32.
    """
    dtype = q.dtype
    if dtype in (torch.float16, torch.bfloat16):
        q, k, v = q.float(), k.float(), v.float()
    b, n, c = q.shape
    if c % heads:
        raise FusionError(f"{c} channels do not split into {heads} heads")
    d = c // heads

    def split(x):
        return x.reshape(b, x.shape[1], heads, d).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    if not return_weights:
        out = F.scaled_dot_product_attention(qh, kh, vh)
        return out.transpose(1, 2).reshape(b, n, c).to(dtype)
    weights = torch.softmax((qh / math.sqrt(d)) @ kh.transpose(-1, -2), dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, n, c).to(dtype)
    return out, weights


class ALGFBlock(nn.Module):
    """Cross-structure attention between local and global features of one layer.

    Local features act as query and value, global features as key. By default
    the aligned features enter the attention directly; ``projections=True``
    adds learned linear maps for q, k and v. With ``attention=False`` the block degrades to the ablation bypass: either a
    fuse of the concatenated aligned features (``bypass="concat"``) or the
    aligned local features alone (``bypass="local_only"``, also used when no
    global teacher exists).
    """

    def __init__(
        self,
        c_local: int,
        c_global: int | None,
        channels: int | None = None,
        heads: int = 1,
        attention: bool = True,
        bypass: str = "concat",
        projections: bool = False,
    ):
        super().__init__()
        c = channels or c_local
        self.channels = c
        self.heads = heads
        if c_global is None:
            attention, bypass = False, "local_only"
        self.attention = attention
        self.bypass = bypass
        self.align_local = nn.Conv2d(c_local, c, 1)
        if attention or bypass == "concat":
            self.align_global = nn.Conv2d(c_global, c, 1)
            self.fuse = nn.Conv2d(2 * c, c, 1)
        if attention:
            proj = (lambda: nn.Linear(c, c)) if projections else nn.Identity
            self.query, self.key, self.value = proj(), proj(), proj()
            self.expand = nn.Conv2d(c, 2 * c, 1)

    def attend(self, local_aligned: torch.Tensor, global_aligned: torch.Tensor, return_weights: bool = False):
        b, c, h, w = local_aligned.shape
        fl = local_aligned.flatten(2).transpose(1, 2)  # B x HW x C
        fg = global_aligned.flatten(2).transpose(1, 2)
        res = scaled_dot_attention(self.query(fl), self.key(fg), self.value(fl), self.heads, return_weights)
        out, weights = res if return_weights else (res, None)
        out = out.transpose(1, 2).reshape(b, c, h, w)
        return (out, weights) if return_weights else out

    def forward(self, f_local: torch.Tensor, f_global: torch.Tensor | None = None) -> torch.Tensor:
        fl = self.align_local(f_local)
        if not self.attention and self.bypass == "local_only":
            return fl
        if f_global is None:
            raise FusionError("this block needs global features")
        if f_global.shape[-2:] != f_local.shape[-2:]:
            raise FusionError(
                f"spatial mismatch: local {tuple(f_local.shape[-2:])} vs global {tuple(f_global.shape[-2:])}"
            )
        fg = self.align_global(f_global)
        g = torch.cat([fl, fg], dim=1)
        if not self.attention:
            return self.fuse(g)
        h = self.expand(self.attend(fl, fg))
        return self.fuse(h + g)


def _down_stage(c: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c, c, 3, stride=2, padding=1, bias=False, padding_mode="reflect"), nn.BatchNorm2d(c), nn.ReLU())


class MHFModule(nn.Module):
    """Bring every layer to the deepest resolution and concatenate (shallow first)."""

    def __init__(self, channels: dict[int, int], strides: dict[int, int]):
        super().__init__()
        self.layers = sorted(channels)
        deepest = strides[self.layers[-1]]
        self.downs = nn.ModuleDict()
        for k in self.layers:
            ratio = deepest // strides[k]
            if ratio * strides[k] != deepest or ratio & (ratio - 1):
                raise FusionError(f"layer {k} stride {strides[k]} is not a power-of-two fraction of {deepest}")
            n = int(math.log2(ratio))
            self.downs[str(k)] = nn.Sequential(*[_down_stage(channels[k]) for _ in range(n)])
        self.out_channels = sum(channels.values())

    def forward(self, feats: dict[int, torch.Tensor]) -> torch.Tensor:
        target = feats[self.layers[-1]].shape[-2:]
        parts = []
        for k in self.layers:
            x = feats[k]
            ratio_h, ratio_w = x.shape[-2] / target[0], x.shape[-1] / target[1]
            expected = 2 ** len(self.downs[str(k)])
            if ratio_h != expected or ratio_w != expected:
                raise FusionError(
                    f"layer {k}: spatial {tuple(x.shape[-2:])} is not {expected}x the deepest {tuple(target)}"
                )
            parts.append(self.downs[str(k)](x))
        return torch.cat(parts, dim=1)


class HybridFusion(nn.Module):
    """Per-layer ALGF blocks followed by the MHF merge, producing the prototype feature."""

    def __init__(
        self,
        local_channels: dict[int, int],
        global_channels: dict[int, int] | None,
        strides: dict[int, int],
        heads: int = 1,
        algf_enabled: bool = True,
        bypass: str = "concat",
        projections: bool = False,
    ):
        super().__init__()
        self.layers = sorted(local_channels)
        self.blocks = nn.ModuleDict(
            {
                str(k): ALGFBlock(
                    local_channels[k],
                    global_channels[k] if global_channels else None,
                    heads=heads,
                    attention=algf_enabled,
                    bypass=bypass,
                    projections=projections,
                )
                for k in self.layers
            }
        )
        self.mhf = MHFModule(local_channels, strides)

    @property
    def out_channels(self) -> int:
        return self.mhf.out_channels

    def per_layer(self, local: dict[int, torch.Tensor], global_: dict[int, torch.Tensor] | None) -> dict[int, torch.Tensor]:
        return {k: self.blocks[str(k)](local[k], global_[k] if global_ is not None else None) for k in self.layers}

    def forward(self, local: dict[int, torch.Tensor], global_: dict[int, torch.Tensor] | None) -> torch.Tensor:
        return self.mhf(self.per_layer(local, global_))


def algf_forward(block: ALGFBlock, f_local: torch.Tensor, f_global: torch.Tensor) -> torch.Tensor:
    return block(f_local, f_global)


def mhf_fuse(module: MHFModule, feats: dict[int, torch.Tensor]) -> torch.Tensor:
    return module(feats)

