"""Command-line entry point: ``retouchgan <subcommand> [--config run.json] [flags]``.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.
Flags override values from the config file.  ``RETOUCHGAN_HOME`` sets the
default directory for runs and checkpoints.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .bafs import StrengthSpec
from .data import BlemishSpec, augment, dataset_build, dataset_iterate, load_png, load_split, save_png
from .errors import ConfigError
from .metrics import evaluate_dataset
from .model import ModelConfig, retouch
from .training import TrainConfig, Trainer, load_model, load_training_state, save_model, save_training_state

log = logging.getLogger("retouchgan")

HOME_ENV = "RETOUCHGAN_HOME"
MAX_STRENGTH = 4.0
MODE_ALIASES = {
    "concat": "concat",
    "spatial": "spatial_only",
    "spatial_only": "spatial_only",
    "channel": "channel_only",
    "channel_only": "channel_only",
    "sc": "spatial_channel",
    "spatial_channel": "spatial_channel",
}
TABLE_NAMES = {"concat": "Concat", "spatial_only": "Spatial", "channel_only": "Channel",
               "spatial_channel": "S + C"}


def home() -> Path:
    return Path(os.environ.get(HOME_ENV, "retouchgan_runs"))


def _strict(cls_name, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"{cls_name} must be a JSON object, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {cls_name} keys: {sorted(unknown)}")


@dataclass
class DataSection:
    n: int = 2000
    resolution: int | None = None  # defaults to the model resolution
    test_fraction: float = 0.1
    blemish: BlemishSpec = field(default_factory=BlemishSpec)


@dataclass
class PathSection:
    data_dir: str | None = None
    run_dir: str | None = None
    checkpoint: str | None = None


@dataclass
class RunConfig:
    """Everything a command needs, validated up front."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    paths: PathSection = field(default_factory=PathSection)

    @property
    def resolution(self) -> int:
        return self.data.resolution or self.model.resolution

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "data": {"n": self.data.n, "resolution": self.data.resolution,
                     "test_fraction": self.data.test_fraction, "blemish": self.data.blemish.to_dict()},
            "paths": vars(self.paths).copy(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _strict("run config", d, ("seed", "model", "train", "data", "paths"))
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        try:
            model = _model_from(d.get("model", {}))
            train_d = dict(d.get("train", {}))
            _strict("train", train_d, [k for k in TrainConfig().to_dict() if k != "seed"])
            if "losses" in train_d:
                _strict("train.losses", train_d["losses"], TrainConfig().to_dict()["losses"])
            train = TrainConfig.from_dict({**train_d, "seed": seed})
            data_d = dict(d.get("data", {}))
            _strict("data", data_d, ("n", "resolution", "test_fraction", "blemish"))
            blemish_d = data_d.pop("blemish", {})
            _strict("data.blemish", blemish_d, BlemishSpec().to_dict())
            data = DataSection(blemish=BlemishSpec.from_dict(blemish_d), **data_d)
            paths_d = d.get("paths", {})
            _strict("paths", paths_d, vars(PathSection()))
            paths = PathSection(**paths_d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid run config: {e}") from e
        cfg = cls(seed, model, train, data, paths)
        if data.n <= 0 or not 0 <= data.test_fraction < 1:
            raise ConfigError("data.n must be positive and data.test_fraction in [0, 1)")
        if data.resolution is not None and data.resolution != model.resolution:
            raise ConfigError(f"data.resolution {data.resolution} does not match model resolution {model.resolution}")
        return cfg


def _model_from(d):
    _strict("model", d, ("gp", "encoder", "blend_mode", "skip_levels", "strength"))
    from .gp_backbone import GPConfig
    from .semantic_encoder import EncoderConfig

    _strict("model.gp", d.get("gp", {}), GPConfig().to_dict())
    _strict("model.encoder", d.get("encoder", {}), EncoderConfig().to_dict())
    d = dict(d)
    if "blend_mode" in d:
        d["blend_mode"] = _mode(d["blend_mode"])
    return ModelConfig.from_dict(d)


def _mode(name):
    if name not in MODE_ALIASES:
        raise ConfigError(f"unknown blend mode {name!r}; choose from {sorted(MODE_ALIASES)}")
    return MODE_ALIASES[name]


def _strength(value) -> StrengthSpec:
    try:
        s = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"strength must be a number, got {value!r}") from None
    if not 0 <= s <= MAX_STRENGTH:
        raise ConfigError(f"strength {s} outside [0, {MAX_STRENGTH}]")
    return StrengthSpec(s)


def _floats(text, what):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of numbers, got {text!r}") from None


# -- config resolution --------------------------------------------------------

def resolve_config(args) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    raw = json.loads(json.dumps(raw))  # deep copy
    # flags win over the file
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    overrides = {
        ("train", "steps"): getattr(args, "steps", None),
        ("train", "batch_size"): getattr(args, "batch_size", None),
        ("data", "n"): getattr(args, "n", None),
        ("model", "blend_mode"): getattr(args, "mode", None),
        ("paths", "data_dir"): getattr(args, "data", None),
        ("paths", "run_dir"): getattr(args, "run_dir", None),
        ("paths", "checkpoint"): getattr(args, "checkpoint", None),
    }
    for (section, key), value in overrides.items():
        if value is not None:
            raw.setdefault(section, {})[key] = value
    if getattr(args, "resolution", None) is not None:
        raw.setdefault("data", {})["resolution"] = args.resolution
    cfg = RunConfig.from_dict(raw)
    log.info("resolved config (seed %d): %s", cfg.seed, json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.run_dir) if cfg.paths.run_dir else home() / "run"


def _checkpoint(cfg: RunConfig) -> Path:
    if cfg.paths.checkpoint:
        return Path(cfg.paths.checkpoint)
    return _run_dir(cfg) / "model.safetensors"


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.data_dir) if cfg.paths.data_dir else home() / "data"


def _write_resolved(cfg: RunConfig, out_dir: Path, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.to_dict()}
    (out_dir / f"{command}.resolved.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _load_model(cfg: RunConfig):
    path = _checkpoint(cfg)
    model = load_model(path)
    log.info("loaded %s", path)
    return model


def _read_image(path, model) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input image not found: {path}")
    img = load_png(path)
    res = model.cfg.resolution
    if tuple(img.shape[-2:]) != (res, res):
        raise ValueError(f"{path} is {img.shape[-1]}x{img.shape[-2]}, model expects {res}x{res}")
    return img


# -- subcommands ----------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig):
    out = Path(args.out) if args.out else _data_dir(cfg)
    entries = dataset_build(cfg.data.n, cfg.data.blemish, cfg.seed, out, cfg.resolution, cfg.data.test_fraction)
    _write_resolved(cfg, out, "synth-data")
    n_test = sum(e["split"] == "test" for e in entries)
    print(f"wrote {len(entries)} pairs ({len(entries) - n_test} train / {n_test} test) to {out}")


def cmd_augment(args, cfg: RunConfig):
    lams = _floats(args.lambdas, "--lambdas")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = dataset_iterate(_data_dir(cfg), args.split)
    written = 0
    for sample, _ in zip(samples, range(args.count)):
        for lam in lams:
            save_png(augment(sample, lam), out / f"{sample.id}_lam{lam:g}.png")
            written += 1
    print(f"wrote {written} augmented previews to {out}")


def _train(cfg: RunConfig, run_dir: Path, resume=None, data_dir=None):
    raw, clean, _ = load_split(data_dir or _data_dir(cfg), "train")
    if raw.shape[-1] != cfg.model.resolution:
        raise ConfigError(f"training data is {raw.shape[-1]}px, model expects {cfg.model.resolution}px")
    run_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        trainer = load_training_state(resume)
        log.info("resumed from %s at step %d", resume, trainer.step)
    else:
        trainer = Trainer(cfg.model, cfg.train)
    trainer.fit(raw, clean, log_path=run_dir / "train_log.jsonl", checkpoint_dir=run_dir)
    save_training_state(trainer, run_dir / "state.safetensors")
    save_model(trainer.model, run_dir / "model.safetensors")
    return trainer


def cmd_train(args, cfg: RunConfig):
    run_dir = _run_dir(cfg)
    _write_resolved(cfg, run_dir, "train")
    trainer = _train(cfg, run_dir, args.resume)
    print(f"trained {trainer.step} steps; model at {run_dir / 'model.safetensors'}")


def cmd_retouch(args, cfg: RunConfig):
    strength = _strength(args.strength)
    model = _load_model(cfg)
    img = _read_image(args.inp, model)
    out, _ = retouch(model, img, strength)
    if Path(args.out).resolve() == Path(args.inp).resolve():
        raise ValueError("refusing to overwrite the input image; choose a different --out")
    save_png(out, args.out)
    print(f"wrote {args.out}")


def cmd_evaluate(args, cfg: RunConfig):
    model = _load_model(cfg)
    strength = _strength(args.strength) if args.strength is not None else None
    report_path = Path(args.report) if args.report else _run_dir(cfg) / f"eval_{args.split}"
    report = evaluate_dataset(model, dataset_iterate(_data_dir(cfg), args.split), report_path,
                              strength=strength)
    print(json.dumps(report.aggregates, indent=1, sort_keys=True))


def cmd_ablate(args, cfg: RunConfig):
    modes = [_mode(m.strip()) for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not modes or not seeds:
        raise ConfigError("--modes and --seeds must name at least one entry")
    out = Path(args.out) if args.out else _run_dir(cfg) / "ablation"
    _write_resolved(cfg, out, "ablate")
    data_dir = _data_dir(cfg)
    test = list(dataset_iterate(data_dir, "test"))
    rows = []
    for mode in modes:
        per_seed = []
        for seed in seeds:
            run_cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed,
                                           "model": {**cfg.model.to_dict(), "blend_mode": mode}})
            run_dir = out / f"{mode}_seed{seed}"
            trainer = _train(run_cfg, run_dir, data_dir=data_dir)
            report = evaluate_dataset(trainer.model, test, run_dir / "eval_test")
            per_seed.append(report.aggregates["model"])
        rows.append({
            "method": TABLE_NAMES[mode],
            "PSNR": float(np.mean([a["psnr_db_mean"] for a in per_seed])),
            "SSIM": float(np.mean([a["ssim_mean"] for a in per_seed])),
            "PercDist": float(np.mean([a["perc_dist_mean"] for a in per_seed])),
            "ChangedRatio": float(np.mean([a["changed_ratio_mean"] for a in per_seed])),
            "seeds": len(per_seed),
        })
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['method']:>8}  PSNR {r['PSNR']:.4f}  SSIM {r['SSIM']:.4f}  PercDist {r['PercDist']:.4f}")
    print(f"wrote {out / 'table.csv'}")


def cmd_masks(args, cfg: RunConfig):
    model = _load_model(cfg)
    img = _read_image(args.inp, model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, diag = retouch(model, img)
    for level, m in sorted(diag.spatial_masks.items()):
        arr = (m[0, 0].clamp(0, 1) * 255).round().to(torch.uint8).numpy()
        Image.fromarray(arr, mode="L").save(out / f"spatial_level{level}.png")
    channel = {str(level): m[0].flatten().tolist() for level, m in sorted(diag.channel_masks.items())}
    (out / "channel_masks.json").write_text(json.dumps(channel, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(diag.spatial_masks)} spatial masks and {len(channel)} channel masks to {out}")


def cmd_strength_sweep(args, cfg: RunConfig):
    values = [_strength(v) for v in _floats(args.values, "--values")]
    if not values:
        raise ConfigError("--values must list at least one strength")
    model = _load_model(cfg)
    img = _read_image(args.inp, model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for spec in values:
        result, _ = retouch(model, img, spec)
        save_png(result, out / f"strength_{spec.s:g}.png")
    print(f"wrote {len(values)} outputs to {out}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "retouch": cmd_retouch,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "masks": cmd_masks,
    "strength-sweep": cmd_strength_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint", help="model archive (default: $%s/run/model.safetensors)" % HOME_ENV)
    common.add_argument("--data", help="dataset directory with manifest.json")
    common.add_argument("--run-dir", dest="run_dir")
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="retouchgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth-data", parents=[common], help="build a synthetic paired dataset")
    s.add_argument("--out")
    s.add_argument("--n", type=int)
    s.add_argument("--resolution", type=int)

    s = sub.add_parser("augment", parents=[common], help="write residual-augmentation previews")
    s.add_argument("--out", required=True)
    s.add_argument("--lambdas", default="0,0.25,0.5,0.75,1")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--split", default="train")

    s = sub.add_parser("train", parents=[common], help="train a retoucher")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--mode", help="blend mode: concat, spatial, channel, sc")
    s.add_argument("--resume", help="training-state archive to continue from")

    s = sub.add_parser("retouch", parents=[common], help="retouch one image")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strength", default=1.0)

    s = sub.add_parser("evaluate", parents=[common], help="score a model on a dataset split")
    s.add_argument("--split", default="test")
    s.add_argument("--report")
    s.add_argument("--strength")

    s = sub.add_parser("ablate", parents=[common], help="train and compare blend modes")
    s.add_argument("--modes", default="concat,spatial,channel,sc")
    s.add_argument("--seeds", default="0")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--out")

    s = sub.add_parser("masks", parents=[common], help="dump per-level selection masks")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out-dir", dest="out_dir", default="masks")

    s = sub.add_parser("strength-sweep", parents=[common], help="retouch at several strengths")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--values", default="0.5,1,1.5,2")
    s.add_argument("--out-dir", dest="out_dir", default="sweep")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: usage errors exit 2, --help exits 0
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        log.error("config error: %s", e)
        return 2
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        log.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
