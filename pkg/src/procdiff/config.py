"""Layered run configuration: defaults < config file < command-line flags < environment.

Keys are dotted (``memory.kind``). Environment variables use the ``PROCDIFF_``
prefix with ``__`` for dots, e.g. ``PROCDIFF_MEMORY__KIND=imn``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .errors import ConfigurationError

ENV_PREFIX = "PROCDIFF_"

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs",
    "encoder": {"backend": "toy", "weights": None, "device": "cpu", "dim": 64},
    "memory": {"kind": "tmn", "dim": 256, "heads": 4, "retain_text": False},
    "scenario": {"kind": "text_only", "p": 0.3, "placement": "ordered", "retain_text": False,
                 "random_p": False},
    "diffusion": {"T": 1000, "beta_start": 1e-4, "beta_end": 2e-2, "image_size": 32,
                  "base_channels": 32, "time_dim": 128, "lr": 1e-5, "epochs": 75, "steps": None,
                  "batch_recipes": 8},
    "sampler": {"kind": "ddim", "stride": 20},
    "baseline": {"kind": None, "tp": "A"},
    "metrics": {"fid": {"extractor": "toy"}},
    "pipeline": {"sample_rate": 1.0, "workers": 1},
}


def _set(cfg: dict, dotted: str, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"config key {dotted!r} collides with a scalar")
    node[parts[-1]] = value


def get(cfg: dict, dotted: str, default=None):
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return default
        node = node[p]
    return node


def _merge(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _parse_scalar(text: str):
    return yaml.safe_load(text) if text != "" else ""


def resolve(config_file=None, flags: dict | None = None, environ=None, preset: dict | None = None) -> dict:
    """Build the fully resolved config.

    ``flags`` maps dotted keys to values (``None`` values are ignored);
    ``preset`` is a nested layer applied between the defaults and the file.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        _merge(cfg, copy.deepcopy(preset))
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{config_file}: top level must be a mapping")
        _merge(cfg, loaded)
    for k, v in (flags or {}).items():
        if v is not None:
            _set(cfg, k, v)
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            _set(cfg, key, _parse_scalar(raw))
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def hash_inputs(paths) -> str:
    """Content hash over files (directories are walked in sorted order)."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def write_provenance(run_dir, cfg: dict, inputs=()) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    existing = [p for p in inputs if p is not None and Path(p).exists()]
    (run_dir / "inputs.sha256").write_text(hash_inputs(existing) + "\n")
