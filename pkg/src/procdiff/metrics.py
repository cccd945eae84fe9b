"""Average Procedure Consistency and Frechet distance."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoders import EmbeddingProvider, clip_score_matrix, to_rgb_array
from .errors import NumericalError, UndefinedMetricError, ValidationError

log = logging.getLogger(__name__)

HISTORY_BUCKETS = [str(i) for i in range(9)] + ["more than 8"]


# --------------------------------------------------------------------------- Avg-PCon


def consistency_weights(text_embs) -> np.ndarray:
    """Row-normalized clamped text-text clip scores with a zero diagonal.

    A row whose off-diagonal scores are all zero falls back to uniform weights.
    """
    t = np.asarray(text_embs, dtype=np.float64)
    n = t.shape[0]
    s = clip_score_matrix(t, t)
    np.fill_diagonal(s, 0.0)
    rows = s.sum(axis=1, keepdims=True)
    w = np.divide(s, rows, out=np.zeros_like(s), where=rows > 0)
    dead = rows[:, 0] == 0
    if dead.any():
        warnings.warn(f"{int(dead.sum())} step(s) have zero similarity to every other step; "
                      "using uniform weights", RuntimeWarning, stacklevel=2)
        w[dead] = 1.0 / (n - 1)
        w[dead, np.flatnonzero(dead)] = 0.0
    return w


def consistency_from_embeddings(text_embs, image_embs) -> tuple[np.ndarray, float]:
    """Per-step ``P_i`` and their mean ``P`` from pre-computed embeddings."""
    t = np.asarray(text_embs, dtype=np.float64)
    im = np.asarray(image_embs, dtype=np.float64)
    if t.shape[0] != im.shape[0]:
        raise ValidationError(f"{t.shape[0]} texts but {im.shape[0]} images")
    if t.shape[0] < 2:
        raise UndefinedMetricError("procedure consistency needs at least two steps")
    w = consistency_weights(t)
    scores = clip_score_matrix(im, t)
    p = (w * scores).sum(axis=1)
    return p, float(p.mean())


def procedure_consistency(step_texts: Sequence[str], gen_images: Sequence, encoder: EmbeddingProvider):
    """``(P_i list, P)`` for one recipe's texts and generated images."""
    if len(step_texts) != len(gen_images):
        raise ValidationError(f"{len(step_texts)} texts but {len(gen_images)} images")
    if len(step_texts) < 2:
        raise UndefinedMetricError("procedure consistency needs at least two steps")
    return consistency_from_embeddings(encoder.encode_texts(step_texts), encoder.encode_images(gen_images))


@dataclass
class ConsistencyReport:
    per_recipe: dict[str, float]
    per_step: dict[str, list[float]]
    avg_pcon: float
    n_recipes: int
    n_excluded: int
    encoder: str
    excluded: list[str] = field(default_factory=list)

    def to_dict(self, detail: bool = True) -> dict:
        d = asdict(self)
        if not detail:
            d.pop("per_recipe")
            d.pop("per_step")
        return d


def avg_pcon(items: Iterable[tuple[str, Sequence[str], Sequence]], encoder: EmbeddingProvider) -> ConsistencyReport:
    """Dataset-level mean of per-recipe ``P``.

    ``items`` yields ``(recipe_id, step_texts, gen_images)``. Recipes with
    fewer than two steps or a missing image are excluded and counted.
    """
    per_recipe, per_step, excluded = {}, {}, []
    for rid, texts, images in items:
        if len(texts) < 2 or len(images) != len(texts) or any(im is None for im in images):
            excluded.append(rid)
            continue
        p_i, p = procedure_consistency(texts, images, encoder)
        per_recipe[rid] = p
        per_step[rid] = [float(v) for v in p_i]
    if not per_recipe:
        raise UndefinedMetricError("no recipe is eligible for Avg-PCon")
    # ordered fold keeps the result independent of how items were produced
    values = [per_recipe[k] for k in sorted(per_recipe)]
    return ConsistencyReport(per_recipe, per_step, float(np.mean(values)), len(per_recipe),
                             len(excluded), getattr(encoder, "name", type(encoder).__name__), excluded)


# --------------------------------------------------------------------------- Frechet distance


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValidationError("feature statistics need at least two samples")
        self.cov = 0.5 * (self.cov + self.cov.T)

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        """Two-pass mean and (population) covariance."""
        x = np.asarray(feats, dtype=np.float64)
        mu = x.mean(axis=0)
        d = x - mu
        return cls(mu, d.T @ d / x.shape[0], x.shape[0])


class StreamingStats:
    """Batch-merging mean/covariance accumulator (Chan et al. pairwise update)."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, batch):
        x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        nb = x.shape[0]
        if nb == 0:
            return self
        mb = x.mean(axis=0)
        db = x - mb
        m2b = db.T @ db
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return self
        n = self.n + nb
        delta = mb - self.mean
        self.m2 = self.m2 + m2b + np.outer(delta, delta) * self.n * nb / n
        self.mean = self.mean + delta * nb / n
        self.n = n
        return self

    def finalize(self) -> FeatureStats:
        if self.n < 2:
            raise ValidationError("feature statistics need at least two samples")
        return FeatureStats(self.mean.copy(), self.m2 / self.n, self.n)


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """``Tr((A B)^{1/2})`` via the symmetric form ``Tr((A^{1/2} B A^{1/2})^{1/2})``."""
    ra = _sym_sqrt(a)
    inner = ra @ b @ ra
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValidationError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    for arr in (a.mean, a.cov, b.mean, b.cov):
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite feature statistics")
    diff = a.mean - b.mean
    try:
        tr_sqrt = _trace_sqrt_product(a.cov, b.cov)
        if not np.isfinite(tr_sqrt):
            raise np.linalg.LinAlgError("non-finite trace")
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.eye(a.cov.shape[0])
        tr_sqrt = _trace_sqrt_product(a.cov + jitter, b.cov + jitter)
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    if d < -1e-6:
        raise NumericalError(f"negative Frechet distance {d}")
    return max(d, 0.0)


# --------------------------------------------------------------------------- feature extractors


class ToyFeatureExtractor:
    """Fixed random projection of an 8x8 thumbnail; fast and deterministic."""

    name = "toy"

    def __init__(self, dim: int = 32, seed: int = 0, thumb: int = 8):
        from PIL import Image

        self._image = Image
        self.thumb = thumb
        rng = np.random.default_rng(seed)
        n_in = 3 * thumb * thumb
        self.proj = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)

    def __call__(self, image) -> np.ndarray:
        arr = to_rgb_array(image)
        small = self._image.fromarray(arr).resize((self.thumb, self.thumb), self._image.BILINEAR)
        x = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
        return x @ self.proj


class InceptionFeatureExtractor:
    """2048-d pool features of torchvision's Inception-v3 (needs downloadable weights)."""

    name = "inception"

    def __init__(self, device: str = "cpu"):
        import torch
        from torchvision.models import Inception_V3_Weights, inception_v3

        weights = Inception_V3_Weights.IMAGENET1K_V1
        model = inception_v3(weights=weights, aux_logits=True)
        model.fc = torch.nn.Identity()
        self.model = model.eval().to(device)
        self.transform = weights.transforms()
        self.device = device
        self._torch = torch

    def __call__(self, image) -> np.ndarray:
        from PIL import Image

        pil = Image.fromarray(to_rgb_array(image))
        with self._torch.no_grad():
            x = self.transform(pil).unsqueeze(0).to(self.device)
            return self.model(x)[0].double().cpu().numpy()


def make_extractor(kind: str = "toy", device: str = "cpu"):
    if kind == "toy":
        return ToyFeatureExtractor()
    if kind == "inception":
        return InceptionFeatureExtractor(device)
    raise ValidationError(f"unknown feature extractor {kind!r}")


def feature_stats(images: Iterable, extractor: Callable, max_skip_frac: float = 0.01,
                  batch: int = 64) -> FeatureStats:
    acc = StreamingStats()
    buf, seen, skipped = [], 0, 0
    for im in images:
        seen += 1
        try:
            buf.append(np.asarray(extractor(im), dtype=np.float64))
        except Exception as exc:  # noqa: BLE001 - any extractor failure is a per-image skip
            skipped += 1
            log.warning("feature extraction failed, skipping image: %s", exc)
            continue
        if len(buf) >= batch:
            acc.update(np.stack(buf))
            buf = []
    if buf:
        acc.update(np.stack(buf))
    if seen and skipped / seen > max_skip_frac:
        raise NumericalError(f"{skipped}/{seen} images failed feature extraction")
    return acc.finalize()


def fid_over_sets(real_images: Sequence, gen_images: Sequence, extractor: Callable) -> float:
    if len(real_images) < 2 or len(gen_images) < 2:
        raise ValidationError("FID needs at least two images in each set")
    return frechet_distance(feature_stats(real_images, extractor), feature_stats(gen_images, extractor))


# --------------------------------------------------------------------------- evaluation report


def history_bucket(step_index: int) -> str:
    """Bucket label for a step by its number of previous steps."""
    h = step_index - 1
    return str(h) if h <= 8 else "more than 8"


def evaluation_report(recipes, gen_images: dict[str, list], encoder: EmbeddingProvider,
                      extractor: Callable, by_history_length: bool = False) -> dict:
    """FID and Avg-PCon of generated images against ground-truth keyframes.

    ``gen_images`` maps recipe_id to the generated images in step order.
    """
    real, gen, items = [], [], []
    for r in recipes:
        imgs = gen_images[r.recipe_id]
        items.append((r.recipe_id, r.texts, imgs))
        real.extend(r.image_path(s) for s in r.steps)
        gen.extend(imgs)
    report = {"n_recipes": len(items), "n_images": len(gen),
              "fid": fid_over_sets(real, gen, extractor), "extractor": getattr(extractor, "name", "custom")}
    pc = avg_pcon(items, encoder)
    report["avg_pcon"] = pc.avg_pcon
    report["consistency"] = pc.to_dict()
    if by_history_length:
        report["by_history_length"] = _bucketed(recipes, gen_images, pc, extractor)
    return report


def _bucketed(recipes, gen_images, pc: ConsistencyReport, extractor) -> dict:
    real = {b: [] for b in HISTORY_BUCKETS}
    gen = {b: [] for b in HISTORY_BUCKETS}
    pvals = {b: [] for b in HISTORY_BUCKETS}
    for r in recipes:
        p_i = pc.per_step.get(r.recipe_id)
        for k, s in enumerate(r.steps):
            b = history_bucket(s.index)
            real[b].append(r.image_path(s))
            gen[b].append(gen_images[r.recipe_id][k])
            if p_i is not None:
                pvals[b].append(p_i[k])
    out = {}
    for b in HISTORY_BUCKETS:
        fid = None
        if len(real[b]) >= 2:
            fid = fid_over_sets(real[b], gen[b], extractor)
        out[b] = {"n_images": len(gen[b]), "fid": fid,
                  "avg_pcon": float(np.mean(pvals[b])) if pvals[b] else None}
    return out


def summary_line(report: dict) -> str:
    return (f"recipes={report['n_recipes']} images={report['n_images']} "
            f"FID={report['fid']:.4f} Avg-PCon={report['avg_pcon']:.4f}")


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
