"""Paired samples, residual-scaling augmentation and a procedural blemish synthesizer."""
from __future__ import annotations

import json
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from .errors import ConfigError

SPLITS = ("train", "test")


@dataclass
class PairedSample:
    raw: torch.Tensor  # blemished, 3xHxW in [-1, 1]
    clean: torch.Tensor  # retouched target
    blemish_mask: torch.Tensor | None = None  # HxW bool
    id: str = ""

    def __post_init__(self):
        if self.raw.shape != self.clean.shape:
            raise ValueError(f"raw {tuple(self.raw.shape)} and clean {tuple(self.clean.shape)} differ")


def augment(sample: PairedSample, lam: float) -> torch.Tensor:
    """``clean + lam * (raw - clean)``, exact at both endpoints."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return torch.lerp(sample.clean, sample.raw, float(lam))


def augment_batch(raw, clean, lam):
    """Per-sample ``lam`` of shape (N,)."""
    return torch.lerp(clean, raw, lam.view(-1, 1, 1, 1).to(raw.dtype))


# image <-> tensor conversions; 8-bit storage, [-1, 1] floats in memory

def to_uint8(x: torch.Tensor) -> np.ndarray:
    """3xHxW [-1, 1] tensor -> HxWx3 uint8."""
    arr = ((x.detach().cpu().double().clamp(-1, 1) + 1) * 127.5).round()
    return arr.permute(1, 2, 0).numpy().astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1) / 127.5 - 1


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Snap [-1, 1] values to the 8-bit grid a PNG round trip would produce."""
    levels = ((x.detach().double().clamp(-1, 1) + 1) * 127.5).round()
    return levels.float() / 127.5 - 1


def save_png(x: torch.Tensor, path):
    Image.fromarray(to_uint8(x), mode="RGB").save(path, format="PNG")


def load_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


@dataclass(frozen=True)
class BlemishSpec:
    spots: tuple[int, int] = (2, 5)
    spot_radius: tuple[float, float] = (1.2, 3.0)
    spot_strength: tuple[float, float] = (0.35, 0.8)
    scratches: tuple[int, int] = (0, 1)
    scratch_length: tuple[float, float] = (4.0, 9.0)
    scratch_width: tuple[float, float] = (0.6, 1.2)
    reflections: tuple[int, int] = (0, 1)
    reflection_radius: tuple[float, float] = (2.0, 4.0)
    reflection_strength: tuple[float, float] = (0.25, 0.5)
    hue_jitter: tuple[float, float] = (-0.08, 0.08)
    texture_amplitude: float = 0.004
    details: tuple[int, int] = (1, 2)
    seed: int = 0

    def __post_init__(self):
        for name in ("spots", "scratches", "reflections", "details"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"BlemishSpec.{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        for name in ("spot_radius", "spot_strength", "scratch_length", "scratch_width",
                     "reflection_radius", "reflection_strength", "hue_jitter"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"BlemishSpec.{name} range is degenerate: {(lo, hi)}")
        if self.texture_amplitude < 0:
            raise ConfigError("BlemishSpec.texture_amplitude must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _grid(res):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    return yy, xx


def _smooth_field(rng, res, cells, amplitude):
    coarse = torch.from_numpy(rng.uniform(-1, 1, size=(1, 3, cells, cells)))
    up = F.interpolate(coarse, size=(res, res), mode="bicubic", align_corners=True)
    return amplitude * up[0].permute(1, 2, 0).numpy()


def _clean_image(rng, spec: BlemishSpec, res):
    base = np.array([0.86, 0.66, 0.55]) + rng.uniform(*spec.hue_jitter, size=3)
    img = np.broadcast_to(base, (res, res, 3)).copy()
    img += _smooth_field(rng, res, 3, 0.08)
    img += _smooth_field(rng, res, 5, 0.03)
    img += rng.normal(0, spec.texture_amplitude, size=(res, res, 3))
    yy, xx = _grid(res)
    # persistent details (moles, short dark strokes) that must survive retouching
    for _ in range(rng.integers(spec.details[0], spec.details[1] + 1)):
        cy, cx = rng.uniform(0.15 * res, 0.85 * res, size=2)
        if rng.random() < 0.5:
            d = np.hypot(yy - cy, xx - cx)
            alpha = np.clip(1.6 - d, 0, 1)
        else:
            ang = rng.uniform(0, math.pi)
            d = _segment_distance(yy, xx, cy, cx, ang, rng.uniform(3, 6))
            alpha = np.clip(1.0 - d, 0, 1)
        img = img * (1 - 0.55 * alpha[..., None]) + 0.55 * alpha[..., None] * np.array([0.35, 0.22, 0.18])
    return np.clip(img, 0, 1)


def _segment_distance(yy, xx, cy, cx, angle, length):
    dy, dx = math.sin(angle), math.cos(angle)
    t = np.clip((yy - cy) * dy + (xx - cx) * dx, -length / 2, length / 2)
    return np.hypot(yy - (cy + t * dy), xx - (cx + t * dx))


def _place_discs(rng, res, radii, taken):
    centers = []
    for r in radii:
        for _ in range(200):
            c = rng.uniform(r + 1, res - r - 1, size=2)
            if all(np.hypot(*(c - c2)) > r + r2 + 3 for c2, r2 in taken):
                taken.append((c, r))
                centers.append(c)
                break
    return centers


def _composite_blemishes(rng, spec: BlemishSpec, clean, res):
    img = clean.copy()
    yy, xx = _grid(res)
    taken = []
    n_spots = rng.integers(spec.spots[0], spec.spots[1] + 1)
    radii = rng.uniform(*spec.spot_radius, size=n_spots)
    for r, c in zip(radii, _place_discs(rng, res, radii, taken)):
        d = np.hypot(yy - c[0], xx - c[1]) / r
        alpha = np.sqrt(np.clip(1 - d**2, 0, 1)) * rng.uniform(*spec.spot_strength)
        tint = np.array([0.62, 0.28, 0.26]) + rng.uniform(-0.08, 0.08, size=3)
        img = img * (1 - alpha[..., None]) + alpha[..., None] * tint
    for _ in range(rng.integers(spec.scratches[0], spec.scratches[1] + 1)):
        length = rng.uniform(*spec.scratch_length)
        cy, cx = rng.uniform(length / 2 + 1, res - length / 2 - 1, size=2)
        d = _segment_distance(yy, xx, cy, cx, rng.uniform(0, math.pi), length)
        alpha = np.clip(1 - d / rng.uniform(*spec.scratch_width), 0, 1) * 0.6
        img = img * (1 - alpha[..., None]) + alpha[..., None] * np.array([0.7, 0.35, 0.33])
    n_ref = rng.integers(spec.reflections[0], spec.reflections[1] + 1)
    radii = rng.uniform(*spec.reflection_radius, size=n_ref)
    for r, c in zip(radii, _place_discs(rng, res, radii, taken)):
        d = np.hypot(yy - c[0], (xx - c[1]) * 0.7) / r
        alpha = np.clip(1 - d**2, 0, 1) ** 2 * rng.uniform(*spec.reflection_strength)
        img = img + alpha[..., None] * (1 - img)
    return np.clip(img, 0, 1)


def synth_pair(seed: int, spec: BlemishSpec = BlemishSpec(), resolution: int = 64, id: str = "") -> PairedSample:
    """Deterministic (seed, spec) -> paired sample with an exact blemish mask.

    The mask marks pixels whose 8-bit values differ by more than one level in
    some channel; every other pixel of ``raw`` is copied from ``clean``.
    """
    rng = np.random.default_rng([spec.seed, seed])
    clean = _clean_image(rng, spec, resolution)
    raw = _composite_blemishes(rng, spec, clean, resolution)
    clean8 = np.round(clean * 255).astype(np.uint8)
    raw8 = np.round(raw * 255).astype(np.uint8)
    mask = np.abs(raw8.astype(int) - clean8.astype(int)).max(axis=2) > 1
    raw8[~mask] = clean8[~mask]
    return PairedSample(from_uint8(raw8), from_uint8(clean8), torch.from_numpy(mask), id or f"s{seed:06d}")


def _split_of(index, n, test_fraction):
    n_test = int(round(n * test_fraction))
    return "test" if index >= n - n_test else "train"


def dataset_build(n: int, spec: BlemishSpec, seed: int, out_dir, resolution=64, test_fraction=0.1):
    """Write ``n`` synthetic pairs as PNGs and a JSON manifest; returns the manifest."""
    out = Path(out_dir)
    for sub in ("raw", "clean", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(n):
        sid = f"s{k:06d}"
        sample = synth_pair(seed * 1_000_003 + k, spec, resolution, id=sid)
        entry = {
            "id": sid,
            "raw_path": f"raw/{sid}.png",
            "clean_path": f"clean/{sid}.png",
            "mask_path": f"mask/{sid}.png",
            "split": _split_of(k, n, test_fraction),
        }
        save_png(sample.raw, out / entry["raw_path"])
        save_png(sample.clean, out / entry["clean_path"])
        Image.fromarray(sample.blemish_mask.numpy().astype(np.uint8) * 255, mode="L").save(out / entry["mask_path"])
        entries.append(entry)
    (out / "manifest.json").write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")
    return entries


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt manifest {path}: {e}") from e
    if not isinstance(entries, list):
        raise ValueError(f"corrupt manifest {path}: expected a JSON array")
    for i, e in enumerate(entries):
        missing = {"id", "raw_path", "clean_path", "split"} - set(e)
        if missing:
            raise ValueError(f"corrupt manifest {path}: entry {i} ({e.get('id', '?')}) lacks {sorted(missing)}")
        if e["split"] not in SPLITS:
            raise ValueError(f"corrupt manifest {path}: sample {e['id']} has split {e['split']!r}")
    return entries


def load_sample(root, entry) -> PairedSample:
    root = Path(root)
    paths = [root / entry["raw_path"], root / entry["clean_path"]]
    if entry.get("mask_path"):
        paths.append(root / entry["mask_path"])
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"sample {entry['id']}: missing file {p}")
    mask = None
    if entry.get("mask_path"):
        with Image.open(paths[2]) as im:
            mask = torch.from_numpy(np.asarray(im.convert("L")) > 127)
    return PairedSample(load_png(paths[0]), load_png(paths[1]), mask, entry["id"])


def dataset_iterate(root, split="train", shuffle_seed: int | None = None) -> Iterator[PairedSample]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    entries = [e for e in read_manifest(root) if e["split"] == split]
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(entries))
        entries = [entries[i] for i in order]
    for e in entries:
        yield load_sample(root, e)


def load_split(root, split="train"):
    """Stack a whole split in memory: ``(raw, clean, ids)``."""
    samples = list(dataset_iterate(root, split))
    if not samples:
        raise ValueError(f"split {split!r} of {root} is empty")
    return (torch.stack([s.raw for s in samples]), torch.stack([s.clean for s in samples]),
            [s.id for s in samples])
