"""Frozen heterogeneous teacher encoders and global-to-local feature alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .utils import tensor_checksum

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = "hetnet-weights"
WEIGHTS_VERSION = 1


class TeacherError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageSpec:
    channels: int
    stride: int


# ---------------------------------------------------------------------------
# toy encoders


class ToyCNN(nn.Module):
    """Three conv stages at strides 2/4/8 with widths 16/32/64."""

    widths = (16, 32, 64)

    def __init__(self):
        super().__init__()
        stages = []
        c_in = 3
        for c in self.widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c, 3, stride=2, padding=1, padding_mode="reflect"),
                    nn.ReLU(),
                    nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect"),
                )
            )
            c_in = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        # Stage outputs are taken before the closing ReLU: with only 16-64
        # channels, rectified features often have near-zero norm, which makes
        # cosine distances on them erratic.
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x if i == 0 else torch.relu(x))
            feats.append(x)
        return feats


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 2, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, tokens):
        y = self.norm1(tokens)
        tokens = tokens + self.attn(y, y, y, need_weights=False)[0]
        return tokens + self.mlp(self.norm2(tokens))


class PatchMerge(nn.Module):
    """2x2 neighbourhood concatenation followed by a linear projection."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.proj = nn.Linear(4 * dim_in, dim_out, bias=False)

    def forward(self, x):  # B x H x W x C
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.proj(self.norm(x))


class ToyAttention(nn.Module):
    """Hierarchical encoder with full attention per stage over 4x-downsampled tokens."""

    widths = (16, 32, 64)

    def __init__(self):
        super().__init__()
        w = self.widths
        self.embed = nn.Conv2d(3, w[0], kernel_size=4, stride=4)
        self.embed_norm = nn.LayerNorm(w[0])
        self.blocks = nn.ModuleList([AttentionBlock(c) for c in w])
        self.merges = nn.ModuleList([PatchMerge(w[0], w[1]), PatchMerge(w[1], w[2])])

    def forward(self, x):
        x = self.embed_norm(self.embed(x).permute(0, 2, 3, 1))
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.merges[i - 1](x)
            b, h, w, c = x.shape
            x = block(x.reshape(b, h * w, c)).reshape(b, h, w, c)
            feats.append(x.permute(0, 3, 1, 2).contiguous())
        return feats


# ---------------------------------------------------------------------------
# full-scale encoders (torchvision architectures, weights from file)


class WideResNetStages(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import wide_resnet50_2

        net = wide_resnet50_2(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3

    def forward(self, x):
        f1 = self.layer1(self.stem(x))
        f2 = self.layer2(f1)
        return [f1, f2, self.layer3(f2)]


class SwinStages(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import swin_t

        self.features = swin_t(weights=None).features[:6]

    def forward(self, x):
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in (1, 3, 5):
                feats.append(x.permute(0, 3, 1, 2).contiguous())
        return feats


ARCHITECTURES = {
    "toy_cnn": ("cnn", ToyCNN, (StageSpec(16, 2), StageSpec(32, 4), StageSpec(64, 8))),
    "toy_attn": ("attention", ToyAttention, (StageSpec(16, 4), StageSpec(32, 8), StageSpec(64, 16))),
    "wide_resnet50_2": ("cnn", WideResNetStages, (StageSpec(256, 4), StageSpec(512, 8), StageSpec(1024, 16))),
    "swin_t": ("attention", SwinStages, (StageSpec(96, 4), StageSpec(192, 8), StageSpec(384, 16))),
}


@dataclass
class FeaturePyramid:
    maps: dict[int, torch.Tensor]
    source: str

    def shapes(self) -> dict[int, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.maps.items()}

    def __getitem__(self, k: int) -> torch.Tensor:
        return self.maps[k]


class EncoderHandle:
    """A frozen backbone plus its stage geometry."""

    def __init__(self, backbone_id: str, module: nn.Module):
        family, _, stages = ARCHITECTURES[backbone_id]
        self.backbone_id = backbone_id
        self.family = family
        self.stage_specs: tuple[StageSpec, ...] = stages
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.module.parameters())

    @property
    def deepest_stride(self) -> int:
        return self.stage_specs[-1].stride

    def channels(self, k: int) -> int:
        return self.stage_specs[k - 1].channels

    def stage_shape(self, k: int, image_size: int) -> tuple[int, int, int]:
        spec = self.stage_specs[k - 1]
        return spec.channels, image_size // spec.stride, image_size // spec.stride

    def checksum(self) -> str:
        return tensor_checksum(dict(self.module.state_dict()))

    def to(self, device) -> "EncoderHandle":
        self.module.to(device)
        return self


def _init_toy(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.MultiheadAttention):
            with torch.no_grad():
                d = m.embed_dim
                m.in_proj_weight.copy_(torch.randn(m.in_proj_weight.shape, generator=g) * (1.0 / d) ** 0.5)
                m.in_proj_bias.zero_()


def save_weights(handle: EncoderHandle, path: str | Path) -> None:
    state = {k: v.detach().cpu() for k, v in handle.module.state_dict().items()}
    torch.save(
        {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "architecture": handle.backbone_id,
            "stage_specs": [(s.channels, s.stride) for s in handle.stage_specs],
            "checksum": tensor_checksum(state),
            "state_dict": state,
        },
        path,
    )


def _load_state(module: nn.Module, backbone_id: str, path: Path) -> None:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(blob, dict) and blob.get("format") == WEIGHTS_FORMAT:
        if blob["architecture"] != backbone_id:
            raise TeacherError(f"{path}: weights are for {blob['architecture']}, expected {backbone_id}")
        state = blob["state_dict"]
        if tensor_checksum(state) != blob["checksum"]:
            raise TeacherError(f"{path}: checksum mismatch")
    else:
        state = blob
    expected = module.state_dict()
    for name, tensor in expected.items():
        if name not in state:
            raise TeacherError(f"{path}: missing parameter {name}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise TeacherError(
                f"{path}: shape mismatch at {name}: file {tuple(state[name].shape)} vs architecture {tuple(tensor.shape)}"
            )
    extra = sorted(set(state) - set(expected))
    if extra:
        raise TeacherError(f"{path}: unexpected parameter {extra[0]}")
    module.load_state_dict(state)


def load_backbone(
    backbone_id: str,
    weights_source: str | Path | None = "scratch",
    toy_mode: bool = True,
    seed: int = 0,
    allow_scratch: bool = False,
) -> EncoderHandle:
    if backbone_id not in ARCHITECTURES:
        raise TeacherError(f"unknown backbone {backbone_id!r}")
    _, cls, _ = ARCHITECTURES[backbone_id]
    scratch = weights_source in (None, "scratch")
    if scratch and not (toy_mode or allow_scratch):
        raise TeacherError(
            f"{backbone_id} needs a pretrained weights file outside toy_mode; set teacher_*_weights in the config"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = cls()
    if scratch and backbone_id.startswith("toy_"):
        _init_toy(module, seed)
    elif not scratch:
        _load_state(module, backbone_id, Path(weights_source))
    return EncoderHandle(backbone_id, module)


@torch.no_grad()
def extract(handle: EncoderHandle, batch: torch.Tensor, layers=(1, 2, 3), source: str | None = None) -> FeaturePyramid:
    size = batch.shape[-1]
    if batch.shape[-2] != size or size % handle.deepest_stride:
        raise TeacherError(
            f"input size {tuple(batch.shape[-2:])} must be square and divisible by {handle.deepest_stride}"
        )
    handle.module.eval()
    feats = handle.module(batch)
    if source is None:
        source = "local" if handle.family == "cnn" else "global"
    return FeaturePyramid({k: feats[k - 1] for k in layers}, source)


def align_global(feature: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize over the spatial grid with half-pixel centres."""
    h, w = target
    if h <= 0 or w <= 0:
        raise TeacherError(f"zero-sized alignment target {target}")
    if tuple(feature.shape[-2:]) == (h, w):
        return feature
    squeeze = feature.dim() == 3
    x = feature.unsqueeze(0) if squeeze else feature
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return out.squeeze(0) if squeeze else out


class TeacherPair:
    """Local-role teacher plus the optional global-role teacher."""

    def __init__(self, local: EncoderHandle, global_: EncoderHandle | None, layers):
        self.local = local
        self.global_ = global_
        self.layers = tuple(layers)

    @classmethod
    def from_config(cls, cfg) -> "TeacherPair":
        local = load_backbone(cfg.teacher_local, cfg.teacher_local_weights or "scratch", cfg.toy_mode, seed=cfg.teacher_seed)
        global_ = None
        if cfg.uses_global_teacher:
            global_ = load_backbone(
                cfg.teacher_global, cfg.teacher_global_weights or "scratch", cfg.toy_mode, seed=cfg.teacher_seed + 1
            )
        return cls(local, global_, cfg.layers_used).to(cfg.device)

    def to(self, device) -> "TeacherPair":
        self.local.to(device)
        if self.global_ is not None:
            self.global_.to(device)
        return self

    def extract(self, batch: torch.Tensor) -> tuple[FeaturePyramid, FeaturePyramid | None]:
        local = extract(self.local, batch, self.layers, source="local")
        if self.global_ is None:
            return local, None
        raw = extract(self.global_, batch, self.layers, source="global")
        aligned = {k: align_global(raw[k], tuple(local[k].shape[-2:])) for k in self.layers}
        return local, FeaturePyramid(aligned, "global")

    def checksums(self) -> dict[str, str]:
        out = {"local": self.local.checksum()}
        if self.global_ is not None:
            out["global"] = self.global_.checksum()
        return out
