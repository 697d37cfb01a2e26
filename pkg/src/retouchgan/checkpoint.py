"""Tensor archive shared by every module: safetensors body + JSON metadata header.

Header keys: ``format_version``, ``config`` (JSON string), ``name_map_id``.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from importlib import resources
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save

from .errors import CheckpointError

FORMAT_VERSION = "1"


def save_archive(path, tensors: dict[str, torch.Tensor], config: dict | None = None,
                 name_map_id: str = "identity", extra: dict[str, str] | None = None):
    meta = {
        "format_version": FORMAT_VERSION,
        "config": json.dumps(config or {}, sort_keys=True),
        "name_map_id": name_map_id,
    }
    meta.update(extra or {})
    body = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    Path(path).write_bytes(_canonical(save(body, metadata=meta)))


def _canonical(blob: bytes) -> bytes:
    # safetensors writes metadata in hash-map order; re-emit the header with
    # sorted keys so identical content always gives identical bytes
    n = int.from_bytes(blob[:8], "little")
    header = json.loads(blob[8:8 + n])
    meta = header.pop("__metadata__", None)
    ordered = {"__metadata__": dict(sorted(meta.items()))} if meta else {}
    ordered.update(sorted(header.items()))
    text = json.dumps(ordered, separators=(",", ":"), ensure_ascii=False).encode()
    if len(text) > n:
        return blob
    return blob[:8] + text.ljust(n, b" ") + blob[8 + n:]


def load_archive(path, expect_version=True) -> tuple[OrderedDict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    tensors = OrderedDict()
    with safe_open(str(path), framework="pt") as f:
        meta = dict(f.metadata() or {})
        for key in f.keys():
            tensors[key] = f.get_tensor(key)
    if expect_version and meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {meta.get('format_version')!r} is not {FORMAT_VERSION!r}"
        )
    if "config" in meta:
        meta["config"] = json.loads(meta["config"])
    return tensors, meta


def export_params(module: torch.nn.Module, path, config: dict | None = None):
    save_archive(path, module.state_dict(), config=config)


def check_shapes(params: dict[str, torch.Tensor], expected: dict[str, tuple]) -> None:
    problems = {}
    for name, shape in expected.items():
        if name not in params:
            problems[name] = f"missing (expected shape {tuple(shape)})"
        elif tuple(params[name].shape) != tuple(shape):
            problems[name] = f"shape {tuple(params[name].shape)} != expected {tuple(shape)}"
    for name in params:
        if name not in expected:
            problems[name] = "unexpected tensor"
    if problems:
        raise CheckpointError("parameter set does not match configuration", problems)


def _read_external(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if path.suffix in {".pt", ".pth", ".pkl"}:
        blob = torch.load(str(path), map_location="cpu", weights_only=True)
        if isinstance(blob, dict) and "g_ema" in blob:
            blob = blob["g_ema"]
        return dict(blob)
    tensors, _ = load_archive(path, expect_version=False)
    return dict(tensors)


def import_external_checkpoint(path, name_map: dict[str, str], expected: dict[str, tuple]):
    """Load external tensors renamed by ``name_map`` (external -> internal).

    External tensors not named in the map are ignored.  All-or-nothing: any
    missing or mis-shaped internal tensor raises with a per-name report.
    """
    external = _read_external(path)
    params = OrderedDict()
    problems = {}
    for ext_name, int_name in name_map.items():
        if int_name not in expected:
            problems[ext_name] = f"maps to unknown internal name {int_name!r}"
        elif ext_name not in external:
            problems[ext_name] = f"missing from {Path(path).name} (needed for {int_name})"
        else:
            t = external[ext_name]
            if tuple(t.shape) != tuple(expected[int_name]):
                problems[ext_name] = f"shape {tuple(t.shape)} != expected {tuple(expected[int_name])} for {int_name}"
            else:
                params[int_name] = t.float().clone()
    for int_name in expected:
        if int_name not in params and int_name not in name_map.values():
            problems[int_name] = "no external tensor maps to this parameter"
    if problems:
        raise CheckpointError(f"refusing partial load of {path}", problems)
    return params


def stylegan2_name_map(levels: int) -> dict[str, str]:
    """External (rosinality stylegan2-pytorch) generator names -> GPBackbone names."""
    m = {"input.input": "const"}

    def styled(ext, internal):
        m[f"{ext}.conv.weight"] = f"{internal}.conv.weight"
        m[f"{ext}.conv.modulation.weight"] = f"{internal}.conv.modulation.weight"
        m[f"{ext}.conv.modulation.bias"] = f"{internal}.conv.modulation.bias"
        m[f"{ext}.noise.weight"] = f"{internal}.noise.weight"
        m[f"{ext}.activate.bias"] = f"{internal}.activate_bias"

    def rgb(ext, internal):
        m[f"{ext}.conv.weight"] = f"{internal}.conv.weight"
        m[f"{ext}.conv.modulation.weight"] = f"{internal}.conv.modulation.weight"
        m[f"{ext}.conv.modulation.bias"] = f"{internal}.conv.modulation.bias"
        m[f"{ext}.bias"] = f"{internal}.bias"

    styled("conv1", "units.0.conv1")
    rgb("to_rgb1", "units.0.to_rgb")
    for k in range(levels - 1):
        styled(f"convs.{2 * k}", f"units.{k + 1}.conv0")
        styled(f"convs.{2 * k + 1}", f"units.{k + 1}.conv1")
        rgb(f"to_rgbs.{k}", f"units.{k + 1}.to_rgb")
    return m


def load_name_map(name: str) -> dict[str, str]:
    """Name-map table shipped with the package (``name_maps/<name>.json``)."""
    text = resources.files("retouchgan").joinpath("name_maps", f"{name}.json").read_text()
    return json.loads(text)
