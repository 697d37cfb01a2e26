"""Blemish-aware feature selection.

Fuses an encoder map ``F_S`` with a synthesis map ``F_I`` through complementary
spatial (1xHxW) and channel (Cx1x1) masks::

    F_blend = M_S * M_C * F_S + (1 - M_S) * (1 - M_C) * F_I

Each mask comes from a two-way softmax over paired logits, so ``(M, 1 - M)``
sum to one.  A strength factor rescales the synthesis-side channel weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ContractViolation

BLEND_MODES = ("concat", "spatial_only", "channel_only", "spatial_channel")


@dataclass(frozen=True)
class StrengthSpec:
    """Strength ``s`` applied at levels ``2..L-1``; level 1 is never touched."""

    s: float = 1.0

    def __post_init__(self):
        if not self.s >= 0:
            raise ValueError(f"strength must be non-negative, got {self.s}")

    def applies_to(self, level: int, levels: int) -> bool:
        return 2 <= level <= levels - 1


def two_way_softmax(logits: torch.Tensor, dim: int) -> torch.Tensor:
    """First member of a softmax over a size-2 axis; the partner is ``1 - m``."""
    if logits.shape[dim] != 2:
        raise ContractViolation(f"two-way softmax needs size 2 along dim {dim}, got {logits.shape[dim]}")
    return torch.softmax(logits, dim=dim).select(dim, 0).unsqueeze(dim)


def strength_adjust(m_c: torch.Tensor, s: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel weights ``(w_S, w_GP)`` with ``w_GP = clamp(s * (1 - M_C), 0, 1)``."""
    if not s >= 0:
        raise ValueError(f"strength must be non-negative, got {s}")
    if s == 1.0:
        return m_c, 1 - m_c
    w_gp = torch.clamp(s * (1 - m_c), 0.0, 1.0)
    return 1 - w_gp, w_gp


def blend(f_s, f_i, m_s=None, w_s=None, w_gp=None):
    """Masked blend; a missing branch contributes a factor of one on both sides."""
    a, b = f_s, f_i
    if m_s is not None:
        a, b = m_s * a, (1 - m_s) * b
    if w_s is not None:
        a, b = w_s * a, w_gp * b
    return a + b


class BAFS(nn.Module):
    def __init__(self, channels, mode="spatial_channel", reduction=4):
        super().__init__()
        if mode not in BLEND_MODES:
            raise ValueError(f"unknown blend mode {mode!r}; expected one of {BLEND_MODES}")
        self.channels, self.mode = channels, mode
        if mode == "concat":
            self.fuse = nn.Conv2d(2 * channels, channels, 1)
            return
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)
        hidden = max(channels // reduction, 4)
        if mode in ("channel_only", "spatial_channel"):
            self.channel_fc1 = nn.Linear(channels, hidden)
            self.channel_fc2 = nn.Linear(hidden, 2 * channels)
        if mode in ("spatial_only", "spatial_channel"):
            self.spatial_conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
            self.spatial_conv2 = nn.Conv2d(hidden, 2, 3, padding=1)

    def hidden(self, f_s, f_i):
        return F.leaky_relu(self.conv(torch.cat([f_s, f_i], dim=1)), 0.2)

    def channel_logits(self, h):
        z = F.leaky_relu(self.channel_fc1(h.mean(dim=(2, 3))), 0.2)
        return self.channel_fc2(z).view(-1, 2, self.channels, 1, 1)

    def spatial_logits(self, h):
        z = F.leaky_relu(self.spatial_conv1(h), 0.2)
        return self.spatial_conv2(z).unsqueeze(2)  # (N, 2, 1, H, W)

    def forward(self, f_s, f_i, strength: float = 1.0):
        """Returns ``(F_blend, M_S, M_C)``; masks are ``None`` for absent branches."""
        if f_s.shape != f_i.shape:
            raise ContractViolation(f"BAFS inputs differ in shape: {tuple(f_s.shape)} vs {tuple(f_i.shape)}")
        if f_s.shape[1] != self.channels:
            raise ContractViolation(f"BAFS expects {self.channels} channels, got {f_s.shape[1]}")
        if self.mode == "concat":
            return self.fuse(torch.cat([f_s, f_i], dim=1)), None, None
        h = self.hidden(f_s, f_i)
        m_s = m_c = w_s = w_gp = None
        if self.mode != "channel_only":
            m_s = two_way_softmax(self.spatial_logits(h), dim=1).squeeze(1)
        if self.mode != "spatial_only":
            m_c = two_way_softmax(self.channel_logits(h), dim=1).squeeze(1)
            w_s, w_gp = strength_adjust(m_c, strength)
        return blend(f_s, f_i, m_s, w_s, w_gp), m_s, m_c


def bafs_fuse(unit: BAFS, f_s, f_i, strength: StrengthSpec = StrengthSpec(), level=None, levels=None):
    s = strength.s
    if level is not None and levels is not None and not strength.applies_to(level, levels):
        s = 1.0
    return unit(f_s, f_i, s)
