"""Checkpoints: ``model.safetensors`` (flat named tensors), ``state.json`` sidecar, ``optimizer.pt``."""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from . import config as cfglib
from .controlnet import ControlledDiffusion
from .diffusion import ProceduralDiffusion, ToyDenoiser, build_model
from .encoders import EmbeddingProvider


def build_from_config(cfg: dict, provider: EmbeddingProvider):
    """Instantiate the model a resolved config describes (weights freshly initialized)."""
    seed = cfg["seed"]
    d = cfg["diffusion"]
    baseline = cfglib.get(cfg, "baseline.kind")
    if baseline in ("controlnet_text", "controlnet_image"):
        torch.manual_seed(seed)
        base = ToyDenoiser(base=d["base_channels"], time_dim=d["time_dim"], context_dim=provider.text_dim)
        mode = "text" if baseline == "controlnet_text" else "image"
        return ControlledDiffusion(base, mode, tp_variant=cfg["baseline"]["tp"],
                                   memory_dim=cfg["memory"]["dim"], heads=cfg["memory"]["heads"])
    m = cfg["memory"]
    return build_model(m["kind"], provider, base=d["base_channels"], time_dim=d["time_dim"],
                       memory_dim=m["dim"], heads=m["heads"], retain_text=m["retain_text"], seed=seed)


def save_checkpoint(directory, model, optimizer, cfg: dict, step: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    save_file(tensors, str(directory / "model.safetensors"))
    state = {
        "step": step,
        "seed": cfg["seed"],
        "config_hash": cfglib.config_hash(cfg),
        "config": cfg,
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
    }
    (directory / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
    if optimizer is not None:
        torch.save(optimizer.state_dict(), directory / "optimizer.pt")
    return directory


def load_checkpoint(directory, provider: EmbeddingProvider):
    """Returns ``(model, state)``; ``state["config"]`` is the config the model was trained with."""
    directory = Path(directory)
    state = json.loads((directory / "state.json").read_text())
    model = build_from_config(state["config"], provider)
    model.load_state_dict(load_file(str(directory / "model.safetensors")))
    return model, state


def load_optimizer_state(directory, optimizer) -> bool:
    path = Path(directory) / "optimizer.pt"
    if not path.exists():
        return False
    optimizer.load_state_dict(torch.load(path, weights_only=True))
    return True


def is_controlled(model) -> bool:
    return isinstance(model, ControlledDiffusion)


def is_procedural(model) -> bool:
    return isinstance(model, ProceduralDiffusion)
