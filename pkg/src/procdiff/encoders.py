"""Text/image embedding providers and the CLIP-style score.

``ToyEncoder`` is a deterministic stand-in for a contrastive encoder: it needs
no weights, so every test in the package runs offline. ``ClipEncoder`` wraps a
pretrained ``transformers`` CLIP checkpoint behind the same interface.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import nn

from .errors import ConfigurationError, DecodeError, NumericalError, ValidationError
from .procedure import stable_hash

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def to_rgb_array(image) -> np.ndarray:
    """Coerce a path, PIL image, or array into an ``(H, W, 3)`` uint8 array."""
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                return np.asarray(im.convert("RGB"))
        except (UnidentifiedImageError, OSError) as exc:
            raise DecodeError(f"cannot decode image {image}: {exc}") from exc
    if isinstance(image, Image.Image):
        return np.asarray(image.convert("RGB"))
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DecodeError(f"expected an RGB image array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


class EmbeddingProvider:
    """Interface every encoder backend implements."""

    name = "abstract"
    text_dim: int
    image_dim: int
    deterministic = True

    def encode_text(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def encode_image(self, image) -> np.ndarray:
        raise NotImplementedError

    def encode_texts(self, texts) -> np.ndarray:
        return np.stack([self.encode_text(t) for t in texts])

    def encode_images(self, images) -> np.ndarray:
        return np.stack([self.encode_image(im) for im in images])


class ToyEncoder(EmbeddingProvider):
    """Hash-bucket text embeddings and patch-statistic image embeddings.

    Both outputs are unit-norm vectors of width ``dim``. Text: sum of seeded
    random table rows for each word and word bigram. Image: per-cell mean and
    standard deviation over a 4x4 grid, plus a constant, pushed through a
    seeded random projection.
    """

    name = "toy"

    def __init__(self, dim: int = 64, seed: int = 0, n_buckets: int = 4096, grid: int = 4):
        self.text_dim = self.image_dim = dim
        self.seed = seed
        self.grid = grid
        rng = np.random.default_rng(seed)
        self._table = rng.standard_normal((n_buckets, dim))
        n_feat = 2 * 3 * grid * grid + 1
        self._proj = rng.standard_normal((n_feat, dim)) / np.sqrt(n_feat)

    def _bucket(self, token: str) -> int:
        return stable_hash(self.seed, token) % len(self._table)

    def encode_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("cannot encode empty text")
        tokens = _TOKEN_RE.findall(text.lower()) or [text.strip()]
        grams = tokens + [a + " " + b for a, b in zip(tokens, tokens[1:])]
        vec = np.zeros(self.text_dim)
        for g in grams:
            vec += self._table[self._bucket(g)]
        return _unit(vec)

    def image_features(self, image) -> np.ndarray:
        arr = to_rgb_array(image).astype(np.float64) / 255.0
        h, w, _ = arr.shape
        ys = np.linspace(0, h, self.grid + 1).astype(int)
        xs = np.linspace(0, w, self.grid + 1).astype(int)
        means, stds = [], []
        for i in range(self.grid):
            for j in range(self.grid):
                cell = arr[ys[i]:max(ys[i + 1], ys[i] + 1), xs[j]:max(xs[j + 1], xs[j] + 1)]
                means.append(cell.mean(axis=(0, 1)) - 0.5)
                stds.append(cell.std(axis=(0, 1)))
        return np.concatenate([np.ravel(means), np.ravel(stds), [1.0]])

    def encode_image(self, image) -> np.ndarray:
        return _unit(self.image_features(image) @ self._proj)


class ClipEncoder(EmbeddingProvider):
    """Pretrained CLIP text/vision towers via ``transformers``; returns pooled projections."""

    name = "clip"

    def __init__(self, weights: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - transformers is a hard dep in practice
            raise ConfigurationError("the pretrained backend needs `transformers`") from exc
        self.device = device
        self.model = CLIPModel.from_pretrained(weights).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(weights)
        self.text_dim = self.image_dim = self.model.config.projection_dim
        self.name = f"clip:{weights}"

    @torch.no_grad()
    def encode_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("cannot encode empty text")
        inputs = self.processor(text=[text], return_tensors="pt", padding=True, truncation=True)
        feats = self.model.get_text_features(**{k: v.to(self.device) for k, v in inputs.items()})
        return feats[0].double().cpu().numpy()

    @torch.no_grad()
    def encode_image(self, image) -> np.ndarray:
        pil = Image.fromarray(to_rgb_array(image))
        inputs = self.processor(images=[pil], return_tensors="pt")
        feats = self.model.get_image_features(pixel_values=inputs["pixel_values"].to(self.device))
        return feats[0].double().cpu().numpy()


def make_encoder(backend: str = "toy", weights: str | None = None, device: str = "cpu",
                 dim: int = 64, seed: int = 0) -> EmbeddingProvider:
    """Build a provider from the ``encoder.*`` config keys."""
    if backend == "toy":
        return ToyEncoder(dim=dim, seed=seed)
    if backend == "pretrained":
        return ClipEncoder(weights or "openai/clip-vit-base-patch32", device=device)
    raise ConfigurationError(f"unknown encoder backend {backend!r}")


def _unit(vec: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(vec)
    if not np.isfinite(n) or n == 0:
        raise NumericalError("embedding has zero or non-finite norm")
    return vec / n


@dataclass(frozen=True)
class StepEmbedding:
    vector: np.ndarray
    modality: str  # "text" | "image"

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


def encode_step_text(provider: EmbeddingProvider, text: str) -> StepEmbedding:
    if not isinstance(text, str) or not text.strip():
        raise ValidationError("step text must be non-empty")
    return StepEmbedding(np.asarray(provider.encode_text(text)), "text")


def encode_step_image(provider: EmbeddingProvider, image) -> StepEmbedding:
    return StepEmbedding(np.asarray(provider.encode_image(image)), "image")


def clip_score(image_emb, text_emb) -> float:
    """100 * max(0, cosine similarity)."""
    a = np.asarray(image_emb, dtype=np.float64)
    b = np.asarray(text_emb, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0 or not (np.isfinite(na) and np.isfinite(nb)):
        raise NumericalError("clip_score needs finite, non-zero embeddings")
    cos = float(a @ b) / (na * nb)
    return 100.0 * min(1.0, max(0.0, cos))


def clip_score_matrix(image_embs, text_embs) -> np.ndarray:
    """Pairwise ``clip_score`` between rows of two embedding matrices."""
    a = np.asarray(image_embs, dtype=np.float64)
    b = np.asarray(text_embs, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0) or not (np.all(np.isfinite(na)) and np.all(np.isfinite(nb))):
        raise NumericalError("clip_score needs finite, non-zero embeddings")
    return 100.0 * np.clip((a / na) @ (b / nb).T, 0.0, 1.0)


class ProjectionHead(nn.Module):
    """Two-layer MLP from a provider's embedding width to the memory width."""

    def __init__(self, in_dim: int, out_dim: int = 256, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(in_dim, out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValidationError(f"projection expects width {self.in_dim}, got {x.shape[-1]}")
        return self.net(x)
