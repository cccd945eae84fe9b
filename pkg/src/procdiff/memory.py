"""Procedural memory networks.

A memory net turns the per-step prompt embeddings of a recipe into one
procedural representation ``m_j`` per step, which is added to the denoiser's
timestep embedding through a zero-initialized linear head.

* TMN / IMN attend over the *history* only: ``m_j`` depends on steps ``< j``
  and ``m_1`` is the zero vector.
* MMN attends over the whole mixed text/image sequence in both directions.

The causal nets compute every ``m_j`` in one masked pass: an inclusive causal
attention is run over the sequence and position ``j - 1`` is read out as
``m_j``. This is the same as re-running attention on each sliced history
``[1 .. j-1]`` and taking its last position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import ProjectionHead
from .errors import ValidationError

MEMORY_KINDS = ("tmn", "imn", "mmn")
MASK_MODES = ("causal_strict", "full")


def sinusoidal_positions(n: int, dim: int, dtype=None, device=None) -> torch.Tensor:
    """Standard sin/cos position table of shape ``(n, dim)`` for positions ``0..n-1``."""
    pos = torch.arange(n, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    table = torch.zeros(n, dim, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table.to(dtype or torch.get_default_dtype())


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention with a residual connection.

    ``mask="causal_strict"`` shifts the causal readout by one position, so
    output ``j`` only sees inputs ``< j`` and output 0 is zero.
    """

    def __init__(self, dim: int, heads: int = 4, mask: str = "causal_strict", positional: bool = True):
        super().__init__()
        if mask not in MASK_MODES:
            raise ValidationError(f"mask must be one of {MASK_MODES}, got {mask!r}")
        if dim % heads:
            raise ValidationError(f"dim {dim} is not divisible by heads {heads}")
        self.dim, self.heads, self.mask, self.positional = dim, heads, mask, positional
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def attend(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        """Plain self-attention over ``x`` of shape ``(..., N, D)``; ``causal`` is inclusive."""
        n = x.shape[-2]
        if self.positional:
            x = x + sinusoidal_positions(n, self.dim, dtype=x.dtype, device=x.device)
        h = self.norm(x)
        lead = h.shape[:-2]
        d_head = self.dim // self.heads

        def split(t):
            return t.reshape(*lead, n, self.heads, d_head).transpose(-2, -3)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d_head)
        if causal:
            future = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v).transpose(-2, -3).reshape(*lead, n, self.dim)
        return x + self.out(ctx)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mask == "full":
            return self.attend(x, causal=False)
        y = self.attend(x, causal=True)
        return torch.cat([torch.zeros_like(y[..., :1, :]), y[..., :-1, :]], dim=-2)


class FusionHead(nn.Module):
    """Linear map from memory width to time-embedding width, initialized to exactly zero."""

    def __init__(self, memory_dim: int, time_dim: int):
        super().__init__()
        self.memory_dim, self.time_dim = memory_dim, time_dim
        self.linear = nn.Linear(memory_dim, time_dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        return self.linear(m)


class TokenMixer(nn.Module):
    """MLP that merges a step's text and image encodings into one token."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        self.dim = dim
        hidden = hidden or 2 * dim
        self.net = nn.Sequential(nn.Linear(2 * dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, text: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([text, image], dim=-1))


@dataclass
class ProceduralMemory:
    vectors: torch.Tensor  # (N, D_m)
    source: str  # "text" | "image" | "multimodal"

    def __len__(self):
        return self.vectors.shape[-2]

    def __getitem__(self, j):
        return self.vectors[..., j, :]


def _check_sequence(embs: torch.Tensor, dim: int):
    if embs.dim() < 2:
        raise ValidationError("expected a (N, D) sequence of embeddings")
    if embs.shape[-2] == 0:
        raise ValidationError("empty step sequence")
    if embs.shape[-1] != dim:
        raise ValidationError(f"embedding width {embs.shape[-1]} != memory width {dim}")


def _causal_forward(block: AttentionBlock, embs: torch.Tensor, source: str) -> ProceduralMemory:
    if block.mask != "causal_strict":
        raise ValidationError(f"{source} memory needs a causal_strict attention block")
    _check_sequence(embs, block.dim)
    return ProceduralMemory(block(embs), source)


def tmn_forward(block: AttentionBlock, text_embs: torch.Tensor) -> ProceduralMemory:
    """Text memory: ``m_j`` summarizes step texts ``1..j-1``."""
    return _causal_forward(block, text_embs, "text")


def imn_forward(block: AttentionBlock, image_embs: torch.Tensor) -> ProceduralMemory:
    """Image memory: ``m_j`` summarizes ground-truth step images ``1..j-1``."""
    return _causal_forward(block, image_embs, "image")


def mix_entries(text_embs: torch.Tensor, image_embs: torch.Tensor | None, modalities,
                mixer: TokenMixer | None = None) -> torch.Tensor:
    """Assemble the mixed MMN input: one memory-width token per step.

    Text steps take the text row, image steps the image row, and
    ``text+image`` steps the mixer's fusion of both rows.
    """
    n = text_embs.shape[-2]
    if len(modalities) != n:
        raise ValidationError(f"{len(modalities)} modality tags for {n} steps")
    rows = []
    for j, mod in enumerate(modalities):
        if mod == "text":
            rows.append(text_embs[..., j, :])
        elif mod in ("image", "text+image"):
            if image_embs is None:
                raise ValidationError(f"step {j + 1} is tagged {mod!r} but no image embeddings were given")
            if image_embs.shape[-1] != text_embs.shape[-1]:
                raise ValidationError("text and image embeddings must share the memory width")
            if mod == "image":
                rows.append(image_embs[..., j, :])
            else:
                if mixer is None:
                    raise ValidationError("text+image steps need a TokenMixer")
                rows.append(mixer(text_embs[..., j, :], image_embs[..., j, :]))
        else:
            raise ValidationError(f"unknown modality {mod!r}")
    return torch.stack(rows, dim=-2)


def mmn_forward(block: AttentionBlock, mixed_embs: torch.Tensor) -> ProceduralMemory:
    """Multi-modal memory: every ``m_j`` attends over the whole mixed sequence."""
    if block.mask != "full":
        raise ValidationError("multimodal memory needs a full (bi-directional) attention block")
    _check_sequence(mixed_embs, block.dim)
    return ProceduralMemory(block(mixed_embs), "multimodal")


def fuse_with_time(t_emb: torch.Tensor, m: torch.Tensor, head: FusionHead) -> torch.Tensor:
    """``e_j = t_j + head(m_j)``."""
    if m.shape[-1] != head.memory_dim:
        raise ValidationError(f"memory width {m.shape[-1]} != head input {head.memory_dim}")
    if t_emb.shape[-1] != head.time_dim:
        raise ValidationError(f"time embedding width {t_emb.shape[-1]} != head output {head.time_dim}")
    return t_emb + head(m)


class MemoryNet(nn.Module):
    """Projection heads, attention block and fusion head for one memory kind."""

    def __init__(self, kind: str, text_dim: int, image_dim: int, time_dim: int,
                 dim: int = 256, heads: int = 4, retain_text: bool = False):
        super().__init__()
        if kind not in MEMORY_KINDS:
            raise ValidationError(f"memory kind must be one of {MEMORY_KINDS}, got {kind!r}")
        self.kind, self.dim, self.retain_text = kind, dim, retain_text
        self.text_proj = ProjectionHead(text_dim, dim) if kind in ("tmn", "mmn") else None
        self.image_proj = ProjectionHead(image_dim, dim) if kind in ("imn", "mmn") else None
        self.mixer = TokenMixer(dim) if kind == "mmn" and retain_text else None
        self.attention = AttentionBlock(dim, heads, mask="full" if kind == "mmn" else "causal_strict")
        self.fusion = FusionHead(dim, time_dim)

    def forward(self, text_embs: torch.Tensor | None = None, image_embs: torch.Tensor | None = None,
                modalities=None) -> ProceduralMemory:
        if self.kind == "tmn":
            if text_embs is None:
                raise ValidationError("TMN needs text embeddings")
            return tmn_forward(self.attention, self.text_proj(text_embs))
        if self.kind == "imn":
            if image_embs is None:
                raise ValidationError("IMN needs image embeddings")
            return imn_forward(self.attention, self.image_proj(image_embs))
        if text_embs is None:
            raise ValidationError("MMN needs text embeddings")
        modalities = list(modalities) if modalities is not None else ["text"] * text_embs.shape[-2]
        if self.mixer is None and "text+image" in modalities:
            raise ValidationError("text+image steps need an MMN built with retain_text=True")
        img = self.image_proj(image_embs) if image_embs is not None else None
        mixed = mix_entries(self.text_proj(text_embs), img, modalities, self.mixer)
        return mmn_forward(self.attention, mixed)

    def fuse(self, t_emb: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return fuse_with_time(t_emb, m, self.fusion)


__all__ = [
    "AttentionBlock",
    "FusionHead",
    "MemoryNet",
    "ProceduralMemory",
    "TokenMixer",
    "fuse_with_time",
    "imn_forward",
    "mix_entries",
    "mmn_forward",
    "sinusoidal_positions",
    "tmn_forward",
]

