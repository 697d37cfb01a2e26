"""StyleGAN2-style synthesis backbone whose levels accept injected feature maps.

Levels are numbered top-down: level ``L`` works at 4x4 from a learned constant,
level 1 emits the final image at ``2**(L+1)``.  Unit ``i`` receives a map at
``res(i) // 2`` and produces ``F_I^i`` at ``res(i) = 2**(L+2-i)``.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class GPConfig:
    levels: int = 5
    latent_dim: int = 128
    channel_base: int = 32
    channel_max: int = 256
    rgb_channels: int = 3
    demodulate: bool = True
    noise_injection: bool = False
    noise_seed: int = 0

    def __post_init__(self):
        if self.levels < 3:
            raise ConfigError(f"GPConfig.levels must be >= 3, got {self.levels}")
        if self.latent_dim < 1 or self.channel_base < 1 or self.channel_max < 1:
            raise ConfigError("GPConfig dimensions must be positive")

    @property
    def num_slices(self) -> int:
        return 2 * self.levels

    @property
    def resolution(self) -> int:
        return 2 ** (self.levels + 1)

    def res(self, level: int) -> int:
        if not 1 <= level <= self.levels:
            raise ContractViolation(f"level {level} outside [1, {self.levels}]")
        return 2 ** (self.levels + 2 - level)

    def channels(self, level: int) -> int:
        """Channel count of ``F_I^level`` (min(c_max, c_base * 2**(level-1)))."""
        if not 1 <= level <= self.levels:
            raise ContractViolation(f"level {level} outside [1, {self.levels}]")
        return min(self.channel_max, self.channel_base * 2 ** (level - 1))

    def to_dict(self) -> dict:
        return asdict(self)


def slice_index(cfg: GPConfig, level: int) -> tuple[int, int]:
    """Latent rows consumed by the unit at ``level`` (level L takes rows 0, 1)."""
    a = 2 * (cfg.levels - level)
    return a, a + 1


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_dim, out_dim, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution with optional weight demodulation.

    ``upsample`` doubles the resolution (bilinear) before convolving.
    """

    def __init__(self, in_ch, out_ch, kernel_size, style_dim, demodulate=True, upsample=False):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel_size = in_ch, out_ch, kernel_size
        self.demodulate = demodulate
        self.upsample = upsample
        self.weight = nn.Parameter(torch.randn(1, out_ch, in_ch, kernel_size, kernel_size))
        self.scale = 1 / math.sqrt(in_ch * kernel_size**2)
        self.modulation = EqualLinear(style_dim, in_ch, bias_init=1.0)

    def modulated_weight(self, style):
        batch = style.shape[0]
        s = self.modulation(style).view(batch, 1, self.in_ch, 1, 1)
        w = self.scale * self.weight * s
        if self.demodulate:
            demod = torch.rsqrt(w.pow(2).sum([2, 3, 4]) + 1e-8)
            w = w * demod.view(batch, self.out_ch, 1, 1, 1)
        return w

    def forward(self, x, style):
        # Equivalent to convolving with modulated_weight() per sample: scale the
        # input channels, share one weight across the batch, rescale outputs.
        batch, in_ch, h, w_ = x.shape
        if in_ch != self.in_ch:
            raise ContractViolation(f"modulated conv expects {self.in_ch} input channels, got {in_ch}")
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        s = self.modulation(style)
        weight = self.scale * self.weight[0]
        out = F.conv2d(x * s.view(batch, in_ch, 1, 1), weight, padding=self.kernel_size // 2)
        if self.demodulate:
            energy = (s * s) @ weight.pow(2).sum([2, 3]).t()  # (N, out)
            out = out * torch.rsqrt(energy + 1e-8).view(batch, self.out_ch, 1, 1)
        return out


class NoiseInjection(nn.Module):
    def __init__(self):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(1))

    def forward(self, x, generator: torch.Generator | None):
        if generator is None:
            return x
        b, _, h, w = x.shape
        noise = torch.randn(b, 1, h, w, generator=generator, dtype=x.dtype).to(x.device)
        return x + self.weight * noise


class StyledConv(nn.Module):
    def __init__(self, in_ch, out_ch, style_dim, demodulate=True, upsample=False):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, style_dim, demodulate, upsample)
        self.noise = NoiseInjection()
        self.activate_bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, style, noise_gen=None):
        out = self.noise(self.conv(x, style), noise_gen)
        out = out + self.activate_bias.view(1, -1, 1, 1)
        return F.leaky_relu(out, 0.2) * math.sqrt(2)


class ToRGB(nn.Module):
    def __init__(self, in_ch, style_dim, rgb_channels=3):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, rgb_channels, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1, rgb_channels, 1, 1))

    def forward(self, x, style, skip=None):
        out = self.conv(x, style) + self.bias
        if skip is not None:
            out = out + F.interpolate(skip, scale_factor=2, mode="bilinear", align_corners=False)
        return out


class GPUnit(nn.Module):
    """One synthesis level.

    The top unit holds a single modulated conv on the constant input, every
    other unit an upsampling conv followed by a plain one (StyleGAN2 layout).
    """

    def __init__(self, cfg: GPConfig, level: int):
        super().__init__()
        self.level = level
        self.out_ch = cfg.channels(level)
        self.out_res = cfg.res(level)
        self.top = level == cfg.levels
        self.in_ch = self.out_ch if self.top else cfg.channels(level + 1)
        self.in_res = 4 if self.top else self.out_res // 2
        d = cfg.latent_dim
        if self.top:
            self.conv0 = None
            self.conv1 = StyledConv(self.in_ch, self.out_ch, d, cfg.demodulate)
        else:
            self.conv0 = StyledConv(self.in_ch, self.out_ch, d, cfg.demodulate, upsample=True)
            self.conv1 = StyledConv(self.out_ch, self.out_ch, d, cfg.demodulate)
        self.to_rgb = ToRGB(self.out_ch, d, cfg.rgb_channels)

    def check_input(self, x):
        expected = (self.in_ch, self.in_res, self.in_res)
        if tuple(x.shape[1:]) != expected:
            raise ContractViolation(
                f"GP level {self.level}: expected input {expected}, got {tuple(x.shape[1:])}"
            )

    def forward(self, x, l_a, l_b, rgb_acc=None, noise_gen=None):
        self.check_input(x)
        if self.top:
            out = self.conv1(x, l_a, noise_gen)
        else:
            out = self.conv0(x, l_a, noise_gen)
            out = self.conv1(out, l_b, noise_gen)
        rgb = self.to_rgb(out, l_b, rgb_acc)
        return out, rgb


Injection = Mapping[int, torch.Tensor] | Callable[[int, torch.Tensor], torch.Tensor]


class GPBackbone(nn.Module):
    """Synthesis network; ``forward`` returns the image and every ``F_I^i``.

    ``skip_levels`` bypasses units: the map that would enter a skipped unit is
    upsampled and channel-adapted with a 1x1 conv, and that unit adds nothing
    to the RGB accumulator.
    """

    def __init__(self, cfg: GPConfig, skip_levels=()):
        super().__init__()
        self.cfg = cfg
        self.skip_levels = frozenset(int(i) for i in skip_levels)
        if cfg.levels in self.skip_levels:
            raise ConfigError(f"cannot skip the constant-input level {cfg.levels}")
        bad = [i for i in self.skip_levels if not 1 <= i < cfg.levels]
        if bad:
            raise ConfigError(f"skip levels {sorted(bad)} outside [1, {cfg.levels - 1}]")
        self.const = nn.Parameter(torch.randn(1, cfg.channels(cfg.levels), 4, 4))
        # units[k] is level L-k, i.e. the order of execution
        self.units = nn.ModuleList(GPUnit(cfg, lvl) for lvl in range(cfg.levels, 0, -1))
        self.bridges = nn.ModuleDict(
            {
                str(i): nn.Conv2d(cfg.channels(i + 1), cfg.channels(i), 1)
                for i in sorted(self.skip_levels)
            }
        )

    def unit(self, level: int) -> GPUnit:
        return self.units[self.cfg.levels - level]

    def check_latent(self, latent):
        expected = (self.cfg.num_slices, self.cfg.latent_dim)
        if latent.dim() != 3 or tuple(latent.shape[1:]) != expected:
            raise ContractViolation(f"latent must be (N, {expected[0]}, {expected[1]}), got {tuple(latent.shape)}")

    def noise_generator(self):
        if not self.cfg.noise_injection:
            return None
        return torch.Generator().manual_seed(self.cfg.noise_seed)

    def forward(self, latent, injected: Injection | None = None):
        """Run all levels.

        ``injected`` maps level -> blended map for levels 1..L-1, or is a
        callable ``(level, F_I^{level+1}) -> F_Blend^level`` evaluated lazily.
        Returns ``(image, {level: F_I^level})``.
        """
        cfg = self.cfg
        self.check_latent(latent)
        batch = latent.shape[0]
        noise_gen = self.noise_generator()
        features = {}
        rgb = None
        prev = self.const.expand(batch, -1, -1, -1)
        for level in range(cfg.levels, 0, -1):
            if level == cfg.levels:
                x = prev
            else:
                x = self._resolve_injection(injected, level, prev)
            a, b = slice_index(cfg, level)
            if level in self.skip_levels:
                bridged = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
                out = self.bridges[str(level)](bridged)
                rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False)
            else:
                out, rgb = self.unit(level)(x, latent[:, a], latent[:, b], rgb, noise_gen)
            features[level] = out
            prev = out
        return rgb, features

    def _resolve_injection(self, injected, level, prev):
        if callable(injected):
            x = injected(level, prev)
        else:
            x = None if injected is None else injected.get(level)
        if x is None:
            if level not in self.skip_levels:
                raise ConfigError(f"no injected feature map for GP level {level}")
            x = prev
        return x


def gp_unit_forward(backbone: GPBackbone, level, f_in, l_a, l_b, rgb_acc=None):
    """Functional entry point for a single unit: returns ``(F_out, rgb_acc')``."""
    return backbone.unit(level)(f_in, l_a, l_b, rgb_acc, backbone.noise_generator())


def expected_shapes(cfg: GPConfig, skip_levels=()) -> dict[str, tuple[int, ...]]:
    """Parameter shape table derived from the config alone."""
    with torch.device("meta"):
        net = GPBackbone(cfg, skip_levels)
    return {k: tuple(v.shape) for k, v in net.state_dict().items()}
