"""End-to-end retoucher: encoder -> per-level feature selection -> synthesis."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .bafs import BAFS, BLEND_MODES, StrengthSpec
from .errors import ConfigError, ContractViolation
from .gp_backbone import GPBackbone, GPConfig
from .semantic_encoder import EncoderConfig, SemanticEncoder


@dataclass(frozen=True)
class ModelConfig:
    gp: GPConfig = field(default_factory=GPConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    blend_mode: str = "spatial_channel"
    skip_levels: tuple[int, ...] = ()
    strength: StrengthSpec = field(default_factory=StrengthSpec)

    def __post_init__(self):
        if self.blend_mode not in BLEND_MODES:
            raise ConfigError(f"blend_mode {self.blend_mode!r} not in {BLEND_MODES}")
        object.__setattr__(self, "skip_levels", tuple(sorted(set(int(i) for i in self.skip_levels))))
        if self.gp.levels in self.skip_levels:
            raise ConfigError(f"cannot skip the constant-input level {self.gp.levels}")

    @property
    def resolution(self):
        return self.gp.resolution

    def to_dict(self):
        return {
            "gp": self.gp.to_dict(),
            "encoder": self.encoder.to_dict(),
            "blend_mode": self.blend_mode,
            "skip_levels": list(self.skip_levels),
            "strength": self.strength.s,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(
            gp=GPConfig(**d.pop("gp", {})),
            encoder=EncoderConfig(**d.pop("encoder", {})),
            strength=StrengthSpec(float(d.pop("strength", 1.0))),
            skip_levels=tuple(d.pop("skip_levels", ())),
            **d,
        )


@dataclass
class RetouchDiagnostics:
    latent: torch.Tensor
    spatial_masks: dict[int, torch.Tensor]
    channel_masks: dict[int, torch.Tensor]
    blended: dict[int, torch.Tensor] = field(default_factory=dict)


class Retoucher(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        L = cfg.gp.levels
        self.encoder = SemanticEncoder(cfg.gp, cfg.encoder)
        self.gp = GPBackbone(cfg.gp, cfg.skip_levels)
        # bafs[str(i)] fuses F_S^i with F_I^{i+1}, i in [1, L-1]
        self.bafs = nn.ModuleDict(
            {str(i): BAFS(cfg.gp.channels(i + 1), cfg.blend_mode) for i in range(1, L)}
        )

    def run(self, image, strength: StrengthSpec | None = None, keep_blended=False):
        strength = self.cfg.strength if strength is None else strength
        L = self.cfg.gp.levels
        if any(p.is_meta for p in self.parameters()):
            raise ContractViolation("model weights are not initialised")
        state, latent = self.encoder(image)
        m_s, m_c, blended = {}, {}, {}

        def inject(level, f_i):
            s = strength.s if strength.applies_to(level, L) else 1.0
            out, ms, mc = self.bafs[str(level)](state.semantic[level], f_i, s)
            if ms is not None:
                m_s[level] = ms
            if mc is not None:
                m_c[level] = mc
            if keep_blended:
                blended[level] = out
            return out

        raw, _ = self.gp(latent, inject)
        return raw, RetouchDiagnostics(latent, m_s, m_c, blended)

    def forward(self, image, strength: StrengthSpec | None = None):
        raw, _ = self.run(image, strength)
        return raw.clamp(-1, 1)


def retouch(model: Retoucher, image, strength: StrengthSpec | None = None, keep_blended=False):
    """Inference entry point: ``(output in [-1, 1], diagnostics)``.

    Accepts a single CxHxW image or an NxCxHxW batch.
    """
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    with torch.no_grad():
        raw, diag = model.run(x, strength, keep_blended)
    out = raw.clamp(-1, 1)
    return (out[0] if single else out), diag


def retouch_variant(model: Retoucher, image, strength: StrengthSpec | None = None):
    # variant behaviour (blend mode, skipped levels) lives in the model config
    return retouch(model, image, strength)
