"""Training objectives: L1, feature-space perceptual loss, non-saturating GAN loss with R1."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ContractViolation, NumericError


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_l1(output, target):
    _same_shape(output, target, "l1 loss")
    return (output - target).abs().mean()


class RandomConvPyramid(nn.Module):
    """Fixed, seeded, untrained multi-scale conv feature extractor.

    Deterministic stand-in for a pretrained network; any module returning a
    list of feature tensors can replace it.
    """

    def __init__(self, channels=(16, 32, 64), seed=1234, in_ch=3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2 / (in_ch * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            in_ch = out_ch
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def _features(extractor, x):
    try:
        return list(extractor(x))
    except Exception as e:
        name = getattr(extractor, "__name__", type(extractor).__name__)
        raise RuntimeError(f"perceptual extractor {name} failed on input {tuple(x.shape)}") from e


def loss_perceptual(output, target, extractor):
    """Sum over pyramid levels of mean squared feature differences."""
    _same_shape(output, target, "perceptual loss")
    fo, ft = _features(extractor, output), _features(extractor, target)
    if len(fo) != len(ft):
        raise RuntimeError("perceptual extractor returned pyramids of different depth")
    return sum(F.mse_loss(a, b) for a, b in zip(fo, ft))


def _finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite discriminator logits")


def loss_adversarial_g(d_fake):
    _finite(d_fake)
    return F.softplus(-d_fake).mean()


def loss_adversarial_d(d_real, d_fake):
    _finite(d_real, d_fake)
    return F.softplus(-d_real).mean() + F.softplus(d_fake).mean()


def r1_penalty(disc, real):
    """Mean squared gradient norm of the discriminator at real images."""
    real = real.detach().requires_grad_(True)
    logits = disc(real)
    if not logits.requires_grad:
        return real.new_zeros(())
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return real.new_zeros(())
    return grad.pow(2).flatten(1).sum(1).mean()
