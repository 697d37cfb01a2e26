"""Joint finetuning of encoder, feature selection and synthesis network."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint as ckpt
from .data import augment_batch
from .errors import CheckpointError, ConfigError, NumericError
from .losses import (RandomConvPyramid, loss_adversarial_d, loss_adversarial_g, loss_l1,
                     loss_perceptual, r1_penalty)
from .model import ModelConfig, Retoucher

log = logging.getLogger(__name__)

TRAIN_STATE_VERSION = "1"


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 1.0
    w_perc: float = 0.8
    w_adv: float = 0.05
    r1_gamma: float = 1.0

    def __post_init__(self):
        vals = (self.w_l1, self.w_perc, self.w_adv, self.r1_gamma)
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be non-negative: {self}")
        if max(self.w_l1, self.w_perc, self.w_adv) <= 0:
            raise ConfigError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.99)
    lr_schedule: str = "cosine"  # or "constant"
    seed: int = 0
    checkpoint_every: int = 0
    r1_interval: int = 16
    augment: bool = True
    disc_channel_base: int = 32
    disc_channel_max: int = 256
    losses: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.r1_interval <= 0:
            raise ConfigError("r1_interval must be positive")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        losses = LossWeights(**d.pop("losses", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(losses=losses, **d)


class Discriminator(nn.Module):
    """Strided conv stack ending in one logit per image."""

    def __init__(self, resolution, channel_base=32, channel_max=256, rgb_channels=3):
        super().__init__()
        self.resolution = resolution
        ch = lambda k: min(channel_max, channel_base * 2**k)  # noqa: E731
        self.stem = nn.Conv2d(rgb_channels, ch(0), 1)
        blocks = []
        res, k = resolution, 0
        while res > 4:
            blocks.append(nn.Conv2d(ch(k), ch(k + 1), 3, stride=2, padding=1))
            res //= 2
            k += 1
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(ch(k) * 16, ch(k))
        self.out = nn.Linear(ch(k), 1)

    def forward(self, x):
        x = F.leaky_relu(self.stem(x), 0.2)
        for conv in self.blocks:
            x = F.leaky_relu(conv(x), 0.2)
        x = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        return self.out(x).squeeze(1)


def _batch_indices(n, batch_size, step, seed):
    """Indices of the batch at ``step``; each epoch is a fresh seeded permutation."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed * 7919 + epoch))
    return perm[pos * batch_size:(pos + 1) * batch_size]


def _lambdas(n, step, seed):
    return torch.rand(n, generator=torch.Generator().manual_seed(seed * 104729 + 17 + step))


class Trainer:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, extractor=None,
                 model: Retoucher | None = None, disc: Discriminator | None = None):
        self.model_cfg, self.cfg = model_cfg, train_cfg
        torch.manual_seed(train_cfg.seed)
        self.model = model if model is not None else Retoucher(model_cfg)
        self.disc = disc if disc is not None else Discriminator(
            model_cfg.resolution, train_cfg.disc_channel_base, train_cfg.disc_channel_max)
        self.extractor = extractor if extractor is not None else RandomConvPyramid()
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr_g, betas=train_cfg.betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=train_cfg.lr_d, betas=train_cfg.betas)
        self.step = 0
        self.last_r1 = 0.0

    def lr_factor(self, step):
        if self.cfg.lr_schedule == "constant":
            return 1.0
        return 0.5 * (1 + math.cos(math.pi * min(step, self.cfg.steps) / self.cfg.steps))

    def _set_lr(self):
        f = self.lr_factor(self.step)
        for g in self.opt_g.param_groups:
            g["lr"] = self.cfg.lr_g * f
        for g in self.opt_d.param_groups:
            g["lr"] = self.cfg.lr_d * f

    def make_batch(self, raw, clean):
        idx = _batch_indices(raw.shape[0], self.cfg.batch_size, self.step, self.cfg.seed)
        r, c = raw[idx], clean[idx]
        if self.cfg.augment:
            r = augment_batch(r, c, _lambdas(len(idx), self.step, self.cfg.seed))
        return r, c

    def train_step(self, inputs, targets) -> dict:
        """One discriminator update followed by one generator update."""
        w = self.cfg.losses
        self.model.train()
        self._set_lr()
        torch.manual_seed(self.cfg.seed * 1_000_003 + self.step)

        d_real = d_fake = None
        adv_d = torch.zeros(())
        if w.w_adv > 0:
            with torch.no_grad():
                fake, _ = self.model.run(inputs)
            d_real, d_fake = self.disc(targets), self.disc(fake)
            adv_d = loss_adversarial_d(d_real, d_fake)
            d_total = adv_d
            if w.r1_gamma > 0 and self.step % self.cfg.r1_interval == 0:
                r1 = r1_penalty(self.disc, targets)
                self.last_r1 = r1.item()
                d_total = d_total + 0.5 * w.r1_gamma * self.cfg.r1_interval * r1
            self.opt_d.zero_grad(set_to_none=True)
            d_total.backward()
            self.opt_d.step()

        out, _ = self.model.run(inputs)
        l1 = loss_l1(out, targets)
        perc = loss_perceptual(out, targets, self.extractor) if w.w_perc > 0 else torch.zeros(())
        adv_g = loss_adversarial_g(self.disc(out)) if w.w_adv > 0 else torch.zeros(())
        total = w.w_l1 * l1 + w.w_perc * perc + w.w_adv * adv_g
        record = {
            "step": self.step,
            "l1": l1.item(),
            "perc": perc.item(),
            "adv_g": adv_g.item(),
            "adv_d": adv_d.item(),
            "r1": self.last_r1,
            "g_total": total.item(),
        }
        if not all(math.isfinite(v) for v in record.values()):
            raise NumericError(f"non-finite loss at step {self.step}: {record}", snapshot=record)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self.step += 1
        return record

    def fit(self, raw, clean, steps=None, log_path=None, checkpoint_dir=None, callback=None):
        """Train until ``steps`` (default: config steps) and return metric records."""
        target = self.cfg.steps if steps is None else steps
        records = []
        fh = open(log_path, "a") if log_path else None
        try:
            while self.step < target:
                rec = self.train_step(*self.make_batch(raw, clean))
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if callback:
                    callback(self, rec)
                every = self.cfg.checkpoint_every
                if checkpoint_dir and every and self.step % every == 0:
                    save_training_state(self, Path(checkpoint_dir) / f"step{self.step:06d}.safetensors")
        finally:
            if fh:
                fh.close()
        return records


def _flatten_optimizer(prefix, opt):
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            tensors[f"{prefix}.{idx}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    return tensors, sd["param_groups"]


def _unflatten_optimizer(prefix, tensors, groups):
    state = {}
    for name, val in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = val
    return {"state": state, "param_groups": groups}


def save_training_state(trainer: Trainer, path):
    tensors = {f"gen.{k}": v for k, v in trainer.model.state_dict().items()}
    tensors.update({f"disc.{k}": v for k, v in trainer.disc.state_dict().items()})
    og, groups_g = _flatten_optimizer("opt_g", trainer.opt_g)
    od, groups_d = _flatten_optimizer("opt_d", trainer.opt_d)
    tensors.update(og)
    tensors.update(od)
    extra = {
        "train_state_version": TRAIN_STATE_VERSION,
        "train_config": json.dumps(trainer.cfg.to_dict(), sort_keys=True),
        "step": str(trainer.step),
        "last_r1": repr(trainer.last_r1),
        "opt_groups": json.dumps({"opt_g": groups_g, "opt_d": groups_d}, sort_keys=True),
    }
    ckpt.save_archive(path, tensors, config=trainer.model_cfg.to_dict(), extra=extra)


def _load_module(module, prefix, tensors):
    params = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    expected = {k: tuple(v.shape) for k, v in module.state_dict().items()}
    ckpt.check_shapes(params, expected)
    module.load_state_dict(params)


def load_training_state(path, model_cfg: ModelConfig | None = None, extractor=None) -> Trainer:
    tensors, meta = ckpt.load_archive(path)
    if meta.get("train_state_version") != TRAIN_STATE_VERSION:
        raise CheckpointError(f"{path}: training-state version {meta.get('train_state_version')!r} unsupported")
    stored_cfg = ModelConfig.from_dict(meta["config"])
    model_cfg = model_cfg or stored_cfg
    train_cfg = TrainConfig.from_dict(json.loads(meta["train_config"]))
    trainer = Trainer(model_cfg, train_cfg, extractor=extractor)
    _load_module(trainer.model, "gen", tensors)
    _load_module(trainer.disc, "disc", tensors)
    groups = json.loads(meta["opt_groups"])
    trainer.opt_g.load_state_dict(_unflatten_optimizer("opt_g", tensors, groups["opt_g"]))
    trainer.opt_d.load_state_dict(_unflatten_optimizer("opt_d", tensors, groups["opt_d"]))
    trainer.step = int(meta["step"])
    trainer.last_r1 = float(meta["last_r1"])
    return trainer


def save_model(model: Retoucher, path):
    ckpt.save_archive(path, model.state_dict(), config=model.cfg.to_dict())


def load_model(path, model_cfg: ModelConfig | None = None) -> Retoucher:
    """Load generator weights from a model archive or a full training state."""
    tensors, meta = ckpt.load_archive(path)
    cfg = model_cfg or ModelConfig.from_dict(meta["config"])
    model = Retoucher(cfg)
    if any(k.startswith("gen.") for k in tensors):
        _load_module(model, "gen", tensors)
    else:
        ckpt.check_shapes(tensors, {k: tuple(v.shape) for k, v in model.state_dict().items()})
        model.load_state_dict(tensors)
    model.eval()
    return model
