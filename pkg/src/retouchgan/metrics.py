"""Image-quality metrics and dataset-level reports.

All metric functions take [-1, 1] tensors (CxHxW or NxCxHxW) and evaluate on
the [0, 1] scale.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch.nn import functional as F

from .errors import ContractViolation
from .losses import RandomConvPyramid

PSNR_CAP = 100.0
REPORT_SCHEMA = 1
LUMA = (0.299, 0.587, 0.114)


def _unit(x):
    return (x.double() + 1) / 2


def _check(a, b, what):
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b) -> float:
    _check(a, b, "psnr")
    mse = (_unit(a) - _unit(b)).pow(2).mean().item()
    if mse < 1e-10:
        return PSNR_CAP
    return 10 * math.log10(1 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def to_luma(x):
    """3xHxW [0, 1] -> HxW luma."""
    w = torch.tensor(LUMA, dtype=x.dtype).view(3, 1, 1)
    return (x * w).sum(0)


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of the luma plane."""
    _check(a, b, "ssim")
    if a.dim() != 3:
        raise ContractViolation(f"ssim takes a single CxHxW image, got {tuple(a.shape)}")
    if min(a.shape[-2:]) < window:
        raise ContractViolation(f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} SSIM window")
    x = to_luma(_unit(a))[None, None]
    y = to_luma(_unit(b))[None, None]
    g = gaussian_window(window, sigma)

    def filt(t):
        t = F.conv2d(t, g.view(1, 1, 1, -1))
        return F.conv2d(t, g.view(1, 1, -1, 1))

    c1, c2 = k1**2, k2**2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx**2
    vy = filt(y * y) - my**2
    cov = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return smap.mean().item()


def perceptual_distance(a, b, extractor=None) -> float:
    """Mean squared distance between unit-normalised feature pyramids."""
    _check(a, b, "perceptual distance")
    extractor = extractor or default_extractor()
    xa, xb = (a if a.dim() == 4 else a[None]), (b if b.dim() == 4 else b[None])
    with torch.no_grad():
        fa, fb = extractor(xa.float()), extractor(xb.float())
    total = 0.0
    for u, v in zip(fa, fb):
        u = u / (u.norm(dim=1, keepdim=True) + 1e-10)
        v = v / (v.norm(dim=1, keepdim=True) + 1e-10)
        total += (u - v).pow(2).sum(1).mean().item()
    return total


_EXTRACTOR = None


def default_extractor():
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = RandomConvPyramid()
    return _EXTRACTOR


def changed_pixel_ratio(before, after, tau=1 / 255) -> float:
    """Fraction of pixels whose largest per-channel change exceeds ``tau``."""
    _check(before, after, "changed_pixel_ratio")
    diff = (_unit(after) - _unit(before)).abs()
    # float32 storage of 8-bit values is off by ~1e-7; a one-level change must not count
    changed = diff.amax(dim=-3) > tau + 1e-6
    return changed.double().mean().item()


def sample_metrics(output, reference, extractor=None, before=None) -> dict:
    row = {
        "psnr_db": psnr(output, reference),
        "ssim": ssim(output, reference),
        "perc_dist": perceptual_distance(output, reference, extractor),
    }
    row["changed_ratio"] = changed_pixel_ratio(before, output) if before is not None else 0.0
    return row


METRIC_KEYS = ("psnr_db", "ssim", "perc_dist", "changed_ratio")


@dataclass
class MetricReport:
    rows: list[dict]
    fingerprint: str = ""
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.rows)

    def to_dict(self):
        return {"schema": REPORT_SCHEMA, "fingerprint": self.fingerprint,
                "aggregates": self.aggregates, "rows": self.rows}

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        json_path = path.with_suffix(".json")
        json_path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "row", *METRIC_KEYS])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in ["id", "row", *METRIC_KEYS]})
        return json_path


def aggregate(rows) -> dict:
    out = {}
    for kind in sorted({r["row"] for r in rows}):
        sel = [r for r in rows if r["row"] == kind]
        out[kind] = {}
        for k in METRIC_KEYS:
            vals = [r[k] for r in sel]
            out[kind][f"{k}_mean"] = statistics.fmean(vals)
            out[kind][f"{k}_std"] = statistics.pstdev(vals)
    return out


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def evaluate_dataset(model, samples, report_path=None, extractor=None, strength=None,
                     batch_size=32, quantize=True) -> MetricReport:
    """Score ``model`` (output vs clean) next to the untouched-input baseline.

    ``samples`` is an iterable of PairedSample.  With ``quantize`` the output
    is scored as the 8-bit image a user would receive.
    """
    from .data import quantize as to_grid
    from .model import retouch

    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    model.eval()
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        raw = torch.stack([s.raw for s in chunk])
        out, _ = retouch(model, raw, strength)
        if quantize:
            out = to_grid(out)
        for s, o in zip(chunk, out):
            rows.append({"id": s.id, "row": "baseline", **sample_metrics(s.raw, s.clean, extractor, s.raw)})
            rows.append({"id": s.id, "row": "model", **sample_metrics(o, s.clean, extractor, s.raw)})
    report = MetricReport(rows, fingerprint=config_fingerprint(model.cfg.to_dict()))
    if report_path is not None:
        report.write(report_path)
    return report
