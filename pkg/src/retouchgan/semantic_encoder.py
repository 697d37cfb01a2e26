"""Cascaded encoder producing per-level semantic maps and the W+ latent."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ContractViolation
from .gp_backbone import GPConfig


@dataclass(frozen=True)
class EncoderConfig:
    width_base: int = 32
    width_max: int = 256

    def width(self, unit: int) -> int:
        return min(self.width_max, self.width_base * 2 ** (unit - 1))

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderState:
    intermediates: dict[int, torch.Tensor]  # I_I^i, i in [1, L]
    semantic: dict[int, torch.Tensor]  # F_S^i, i in [1, L-1]


class SEUnit(nn.Module):
    """Two 3x3 convs; the first one strides by 2 unless this is the stem."""

    def __init__(self, in_ch, out_ch, downsample):
        super().__init__()
        self.conv0 = nn.Conv2d(in_ch, out_ch, 3, stride=2 if downsample else 1, padding=1)
        self.conv1 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.conv0(x), 0.2)
        return F.leaky_relu(self.conv1(x), 0.2)


class LatentHead(nn.Module):
    """Conv + fully connected layer mapping the 4x4 top map to ``(2L, d)``."""

    def __init__(self, in_ch, num_slices, latent_dim):
        super().__init__()
        self.num_slices, self.latent_dim = num_slices, latent_dim
        self.conv = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.fc = nn.Linear(in_ch * 16, num_slices * latent_dim)

    def forward(self, top):
        if tuple(top.shape[-2:]) != (4, 4):
            raise ContractViolation(f"latent head expects a 4x4 map, got {tuple(top.shape[-2:])}")
        h = F.leaky_relu(self.conv(top), 0.2)
        return self.fc(h.flatten(1)).view(-1, self.num_slices, self.latent_dim)


class SemanticEncoder(nn.Module):
    def __init__(self, gp: GPConfig, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.gp, self.cfg = gp, cfg
        L = gp.levels
        self.resolution = gp.resolution
        self.units = nn.ModuleList()
        in_ch = gp.rgb_channels
        for i in range(1, L + 1):
            self.units.append(SEUnit(in_ch, cfg.width(i), downsample=i > 1))
            in_ch = cfg.width(i)
        # F_S^i must match the channel count of F_I^{i+1} for the blend
        self.to_semantic = nn.ModuleList(
            nn.Conv2d(cfg.width(i + 1), gp.channels(i + 1), 3, padding=1) for i in range(1, L)
        )
        self.latent_head = LatentHead(cfg.width(L), gp.num_slices, gp.latent_dim)

    def check_input(self, image):
        r = self.resolution
        if image.dim() != 4 or tuple(image.shape[1:]) != (self.gp.rgb_channels, r, r):
            raise ContractViolation(
                f"encoder expects (N, {self.gp.rgb_channels}, {r}, {r}) input, got {tuple(image.shape)}"
            )

    def encode(self, image) -> EncoderState:
        self.check_input(image)
        intermediates = {}
        x = image
        for i, unit in enumerate(self.units, start=1):
            x = unit(x)
            intermediates[i] = x
        semantic = {i: conv(intermediates[i + 1]) for i, conv in enumerate(self.to_semantic, start=1)}
        return EncoderState(intermediates, semantic)

    def forward(self, image):
        state = self.encode(image)
        return state, self.latent_head(state.intermediates[self.gp.levels])


def se_forward(encoder: SemanticEncoder, image) -> EncoderState:
    return encoder.encode(image)


def leh_forward(encoder: SemanticEncoder, top) -> torch.Tensor:
    return encoder.latent_head(top)
