import torch

from retouchgan.gp_backbone import GPConfig
from retouchgan.model import ModelConfig
from retouchgan.semantic_encoder import EncoderConfig


def tiny_model_config(levels=4, **kw):
    gp = GPConfig(levels=levels, latent_dim=kw.pop("latent_dim", 8),
                  channel_base=kw.pop("channel_base", 4), channel_max=kw.pop("channel_max", 8))
    enc = EncoderConfig(width_base=kw.pop("width_base", 4), width_max=kw.pop("width_max", 8))
    return ModelConfig(gp=gp, encoder=enc, **kw)


def finite_difference_errors(loss_fn, tensors, samples_per_tensor=12, eps=1e-6, seed=0):
    """Relative errors between autograd and central differences at sampled coordinates.

    ``tensors`` are double-precision leaves with requires_grad set; ``loss_fn``
    returns a scalar and is re-evaluated for every perturbation.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [torch.zeros_like(t) if t.grad is None else t.grad.detach().clone() for t in tensors]
    gen = torch.Generator().manual_seed(seed)
    errors = []
    # perturb through .data: losses that differentiate internally (R1) need grad mode on
    for t, g in zip(tensors, analytic):
        flat, gflat = t.data.view(-1), g.view(-1)
        n = flat.numel()
        idx = torch.randperm(n, generator=gen)[: min(samples_per_tensor, n)]
        for i in idx.tolist():
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = gflat[i].item()
            errors.append(abs(a - num) / max(abs(a), abs(num), 1e-6))
    return errors


def gradient_check_passes(errors):
    """>= 95% of coordinates within 1e-3 relative error and all within 1e-2."""
    good = sum(e <= 1e-3 for e in errors)
    return good >= 0.95 * len(errors) and max(errors) <= 1e-2
