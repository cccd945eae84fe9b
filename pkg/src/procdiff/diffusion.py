"""Desk-scale pixel-space diffusion with the procedural-memory conditioning path.

The toy denoiser is a small conv encoder/decoder over 32x32 RGB arrays in
``[-1, 1]``. Every residual block receives the conditioned time embedding
``e_j = t_j + head(m_j)``; the current step's text enters through a single
cross-attention site in the deepest encoder stage.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import EmbeddingProvider, to_rgb_array
from .errors import ConfigurationError, EditError, NumericalError, ValidationError
from .memory import MemoryNet, fuse_with_time
from .procedure import (
    PromptScenario,
    PromptSequence,
    Recipe,
    Step,
    make_prompt_sequence,
    stable_hash,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- schedule


class NoiseSchedule:
    """Linear beta schedule; timesteps are 1-based (``t`` in ``1..T``)."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if T < 1:
            raise ValidationError("T must be >= 1")
        if not 0 < beta_start <= beta_end < 1:
            raise ValidationError("need 0 < beta_start <= beta_end < 1")
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    def _index(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValidationError(f"timestep out of range [1, {self.T}]: {t.tolist()}")
        return t - 1

    def beta(self, t) -> torch.Tensor:
        return self.betas[self._index(t)]

    def alpha(self, t) -> torch.Tensor:
        return self.alphas[self._index(t)]

    def alpha_bar(self, t) -> torch.Tensor:
        return self.alpha_bars[self._index(t)]


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise``; ``t`` scalar or per-sample."""
    if noise.shape != x0.shape:
        raise ValidationError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar(t)
    return _bcast(ab.sqrt(), x0) * x0 + _bcast((1 - ab).sqrt(), x0) * noise


def predict_x0(schedule: NoiseSchedule, x_t, t, eps) -> torch.Tensor:
    ab = schedule.alpha_bar(t)
    return (x_t - _bcast((1 - ab).sqrt(), x_t) * eps) / _bcast(ab.sqrt(), x_t)


def clip_eps(schedule: NoiseSchedule, x_t, t, eps, bound: float = 1.0) -> torch.Tensor:
    """Noise estimate consistent with the x0 estimate clipped to ``[-bound, bound]``."""
    ab = schedule.alpha_bar(t)
    x0 = predict_x0(schedule, x_t, t, eps).clamp(-bound, bound)
    return (x_t - _bcast(ab.sqrt(), x_t) * x0) / _bcast((1 - ab).sqrt(), x_t)


def ddpm_step(schedule: NoiseSchedule, x_t, t: int, eps, noise=None) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}``; no noise is added at ``t = 1``."""
    a, ab, b = schedule.alpha(t), schedule.alpha_bar(t), schedule.beta(t)
    mean = (x_t - (b / (1 - ab).sqrt()).to(x_t.dtype) * eps) / a.sqrt().to(x_t.dtype)
    if t == 1 or noise is None:
        return mean
    ab_prev = schedule.alpha_bar(t - 1)
    var = b * (1 - ab_prev) / (1 - ab)
    return mean + var.sqrt().to(x_t.dtype) * noise


def ddim_step(schedule: NoiseSchedule, x_t, t: int, t_prev: int, eps) -> torch.Tensor:
    """Deterministic jump ``x_t -> x_{t_prev}``; ``t_prev = 0`` returns the x0 estimate."""
    x0 = predict_x0(schedule, x_t, t, eps)
    if t_prev == 0:
        return x0
    ab_prev = schedule.alpha_bar(t_prev).to(x_t.dtype)
    return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps


# --------------------------------------------------------------------------- networks


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int = 128, freq_dim: int = 64):
        super().__init__()
        self.dim, self.freq_dim = dim, freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        feats = timestep_features(t, self.freq_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(feats)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    """Residual conv block; the embedding sets a per-channel scale and shift after the second norm."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, e):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(F.silu(e))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial queries attend over a few tokens projected from the pooled step-text embedding."""

    def __init__(self, channels: int, context_dim: int, tokens: int = 4, heads: int = 4):
        super().__init__()
        self.channels, self.tokens, self.heads = channels, tokens, heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.context = nn.Linear(context_dim, tokens * channels)
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(channels, 2 * channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))  # (B, HW, C)
        toks = self.context(ctx).reshape(b, self.tokens, c)
        k, v = self.kv(toks).chunk(2, dim=-1)

        def split(z):
            return z.reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)

        attn = F.scaled_dot_product_attention(split(q), split(k), split(v))
        attn = attn.transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(attn).transpose(1, 2).reshape(b, c, h, w)


class DownPath(nn.Module):
    """Encoder half of the toy denoiser; also the template for a control branch copy."""

    def __init__(self, in_ch: int, base: int, time_dim: int, context_dim: int, context_tokens: int):
        super().__init__()
        c1, c2 = base, 2 * base
        self.conv_in = nn.Conv2d(in_ch, c1, 3, padding=1)
        self.block1 = ResBlock(c1, c1, time_dim)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.block2 = ResBlock(c1, c2, time_dim)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.block3 = ResBlock(c2, c2, time_dim)
        self.attn = CrossAttention(c2, context_dim, context_tokens)
        self.channels = (c1, c2, c2)

    def forward(self, x, e, ctx):
        s1 = self.block1(self.conv_in(x), e)
        s2 = self.block2(self.down1(s1), e)
        s3 = self.attn(self.block3(self.down2(s2), e), ctx)
        return [s1, s2, s3]


class ToyDenoiser(nn.Module):
    """Noise predictor over ``(B, 3, S, S)`` arrays with ``S`` divisible by 4."""

    def __init__(self, image_channels: int = 3, base: int = 32, time_dim: int = 128,
                 context_dim: int = 64, context_tokens: int = 4):
        super().__init__()
        self.image_channels, self.time_dim, self.context_dim = image_channels, time_dim, context_dim
        c1, c2 = base, 2 * base
        self.time_embed = TimestepEmbedder(time_dim)
        self.text_embed = nn.Linear(context_dim, time_dim)
        self.down = DownPath(image_channels, base, time_dim, context_dim, context_tokens)
        self.mid = ResBlock(c2, c2, time_dim)
        self.up3 = ResBlock(2 * c2, c2, time_dim)
        self.up2 = ResBlock(2 * c2, c1, time_dim)
        self.up1 = ResBlock(2 * c1, c1, time_dim)
        self.norm_out = nn.GroupNorm(_groups(c1), c1)
        self.conv_out = nn.Conv2d(c1, image_channels, 3, padding=1)

    def forward_embedded(self, x, e, ctx, residuals=None):
        """Denoise given an already-built time embedding ``e``.

        ``residuals`` (control branch outputs) are added to the three skip
        features and to the input of the middle block.
        """
        if ctx.shape[-1] != self.context_dim:
            raise ValidationError(f"text context width {ctx.shape[-1]} != {self.context_dim}")
        # the pooled text embedding also modulates every block, alongside cross-attention
        e = e + self.text_embed(ctx)
        skips = self.down(x, e, ctx)
        h = skips[-1]
        if residuals is not None:
            skips = [s + r for s, r in zip(skips, residuals[:3])]
            h = skips[-1] + residuals[3]
        h = self.mid(h, e)
        h = self.up3(torch.cat([h, skips[2]], 1), e)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up2(torch.cat([h, skips[1]], 1), e)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, skips[0]], 1), e)
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward(self, x, t, ctx):
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        return self.forward_embedded(x, self.time_embed(t), ctx)


# --------------------------------------------------------------------------- backbone adapters


class BackboneAdapter:
    """What the memory path needs from a (possibly pretrained) denoising backbone.

    Subclasses expose the time-embedding injection point so a fusion head can
    intercept it, plus the backbone's latent encode/decode pair.
    """

    def time_embedding(self, t) -> torch.Tensor:
        raise NotImplementedError

    def denoise(self, x, time_emb, cond) -> torch.Tensor:
        raise NotImplementedError

    def encode_latents(self, images: torch.Tensor) -> torch.Tensor:
        return images

    def decode_latents(self, latents: torch.Tensor) -> torch.Tensor:
        return latents

    def __call__(self, x, t, cond):
        return self.denoise(x, self.time_embedding(t), cond)


class ToyBackbone(BackboneAdapter):
    """Pixel-space adapter around :class:`ToyDenoiser` (identity latents)."""

    def __init__(self, denoiser: ToyDenoiser):
        self.denoiser = denoiser

    def time_embedding(self, t):
        return self.denoiser.time_embed(torch.as_tensor(t).reshape(-1))

    def denoise(self, x, time_emb, cond):
        return self.denoiser.forward_embedded(x, time_emb.expand(x.shape[0], -1), cond)


class HookedBackbone(BackboneAdapter):
    """Adapter for an arbitrary module whose time embedding is produced by a named submodule.

    A forward hook on that submodule adds whatever extra term is pending, so
    the backbone's own forward runs unmodified. For a diffusers-style UNet
    this is ``HookedBackbone(unet, "time_embedding", call=lambda m, x, t, c: m(x, t, c).sample)``.
    """

    def __init__(self, module: nn.Module, time_module: str,
                 call: Callable | None = None, vae=None, latent_scale: float = 1.0):
        self.module = module
        self.time_module = module.get_submodule(time_module)
        self.call = call or (lambda m, x, t, c: m(x, t, c))
        self.vae, self.latent_scale = vae, latent_scale
        self._extra = None
        self._captured = None
        self.time_module.register_forward_hook(self._hook)

    def _hook(self, _module, _inputs, output):
        self._captured = output
        if self._extra is None:
            return None
        return output + self._extra

    def forward_with_extra(self, x, t, cond, extra):
        self._extra = extra
        try:
            return self.call(self.module, x, t, cond)
        finally:
            self._extra = None

    def time_embedding(self, t):
        raise NotImplementedError("hooked backbones inject through forward_with_extra")

    def __call__(self, x, t, cond):
        return self.forward_with_extra(x, t, cond, None)

    def encode_latents(self, images):
        if self.vae is None:
            return images
        return self.vae.encode(images).latent_dist.mean * self.latent_scale

    def decode_latents(self, latents):
        if self.vae is None:
            return latents
        return self.vae.decode(latents / self.latent_scale).sample


class MemoryConditionedBackbone:
    """Wraps a backbone so that ``m_j`` is fused into its time embedding."""

    def __init__(self, backbone: BackboneAdapter, memory: MemoryNet):
        self.backbone, self.memory = backbone, memory

    def __call__(self, x, t, cond, m):
        if isinstance(self.backbone, HookedBackbone):
            return self.backbone.forward_with_extra(x, t, cond, self.memory.fusion(m))
        e = fuse_with_time(self.backbone.time_embedding(t).expand(x.shape[0], -1), m, self.memory.fusion)
        return self.backbone.denoise(x, e, cond)


# --------------------------------------------------------------------------- data


@dataclass
class EncodedProcedure:
    """One recipe's prompt sequence, embedded and ready for the networks."""

    recipe_id: str
    text_embs: torch.Tensor  # (N, D_t) conditional prompts, always present
    modalities: list[str]
    image_embs: torch.Tensor | None = None  # (N, D_i); rows without images are zero
    images: torch.Tensor | None = None  # (N, 3, S, S) in [-1, 1]; ground truth
    kind: str = "text_only"
    texts: list[str] = field(default_factory=list)

    def __len__(self):
        return self.text_embs.shape[0]


def image_to_tensor(image, size: int) -> torch.Tensor:
    """Load/resize an RGB image to ``(3, size, size)`` float32 in ``[-1, 1]``."""
    from PIL import Image

    arr = to_rgb_array(image)
    if arr.shape[:2] != (size, size):
        arr = np.asarray(Image.fromarray(arr).resize((size, size), Image.BILINEAR))
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """``(3, S, S)`` in ``[-1, 1]`` -> ``(S, S, 3)`` uint8."""
    arr = ((x.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def encode_procedure(recipe: Recipe, sequence: PromptSequence, provider: EmbeddingProvider,
                     image_size: int = 32, load_images: bool = True) -> EncodedProcedure:
    texts = [s.text for s in recipe.steps]
    text_embs = torch.tensor(provider.encode_texts(texts), dtype=torch.float32)
    image_embs = None
    if any(m != "text" for m in sequence.modalities):
        rows = []
        for entry in sequence.entries:
            path = recipe.image_path(entry.position)
            if entry.modality != "text" and path is not None:
                rows.append(torch.tensor(provider.encode_image(path), dtype=torch.float32))
            else:
                rows.append(torch.zeros(provider.image_dim))
        image_embs = torch.stack(rows)
    images = None
    if load_images and all(s.image_ref is not None for s in recipe.steps):
        images = torch.stack([image_to_tensor(recipe.image_path(s), image_size) for s in recipe.steps])
    return EncodedProcedure(recipe.recipe_id, text_embs, sequence.modalities, image_embs,
                            images, sequence.kind, texts)


# --------------------------------------------------------------------------- model


class ProceduralDiffusion(nn.Module):
    """Toy denoiser plus an optional memory net (``None`` gives the plain baseline)."""

    def __init__(self, denoiser: ToyDenoiser, memory: MemoryNet | None = None):
        super().__init__()
        self.denoiser = denoiser
        self.memory = memory

    @property
    def memory_kind(self) -> str | None:
        return None if self.memory is None else self.memory.kind

    def procedure_conditioning(self, proc: EncodedProcedure) -> torch.Tensor | None:
        check_scenario(self.memory_kind, proc.kind)
        if self.memory is None:
            return None
        return self.memory(proc.text_embs, proc.image_embs, proc.modalities).vectors

    def time_embedding(self, t, cond=None):
        e = self.denoiser.time_embed(t)
        if self.memory is not None and cond is not None:
            e = fuse_with_time(e, cond, self.memory.fusion)
        return e

    def predict_noise(self, x_t, t, text_emb, cond=None):
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        return self.denoiser.forward_embedded(x_t, self.time_embedding(t, cond), text_emb)


_SCENARIO_FOR = {"tmn": "text_only", "imn": "image_history", "mmn": "multimodal"}


def check_scenario(memory_kind: str | None, scenario_kind: str):
    """Raise :class:`ConfigurationError` if a memory kind cannot consume a scenario."""
    if memory_kind is None:
        return
    want = _SCENARIO_FOR[memory_kind]
    if scenario_kind != want:
        raise ConfigurationError(
            f"memory {memory_kind!r} consumes {want!r} prompts, got scenario {scenario_kind!r}"
        )


# --------------------------------------------------------------------------- training


def _cat_cond(conds):
    if all(c is None for c in conds):
        return None
    return torch.cat(conds, dim=0)


def train_step(model, optimizer: torch.optim.Optimizer, procedures: Sequence[EncodedProcedure],
               schedule: NoiseSchedule, generator: torch.Generator | None = None) -> float:
    """One noise-prediction MSE update over every step of ``procedures``."""
    model.train()
    x0 = torch.cat([p.images for p in procedures], dim=0)
    text = torch.cat([p.text_embs for p in procedures], dim=0)
    cond = _cat_cond([model.procedure_conditioning(p) for p in procedures])
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=generator)
    noise = torch.randn(x0.shape, generator=generator)
    x_t = q_sample(schedule, x0, t, noise)
    loss = F.mse_loss(model.predict_noise(x_t, t, text, cond), noise)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss {loss.item()}",
            snapshot={"t": t.tolist(), "recipes": [p.recipe_id for p in procedures],
                      "x_t_absmax": float(x_t.abs().max())},
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-5
    batch_recipes: int = 8
    seed: int = 0
    log_every: int = 100


def train(model, procedures: Sequence[EncodedProcedure], schedule: NoiseSchedule,
          config: TrainConfig, optimizer: torch.optim.Optimizer | None = None,
          start_step: int = 0, on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Run ``config.steps`` updates; returns the per-step losses."""
    if not procedures:
        raise ValidationError("no training procedures")
    missing = [p.recipe_id for p in procedures if p.images is None]
    if missing:
        raise ValidationError(f"recipes without ground-truth images cannot be trained on: {missing}")
    if optimizer is None:
        optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.lr)
    gen = torch.Generator().manual_seed(stable_hash(config.seed, "train", start_step) % 2**63)
    order = np.random.default_rng([config.seed, start_step])
    losses = []
    for step in range(start_step, start_step + config.steps):
        if len(procedures) > config.batch_recipes:
            idx = order.choice(len(procedures), size=config.batch_recipes, replace=False)
            batch = [procedures[i] for i in sorted(idx)]
        else:
            batch = list(procedures)
        loss = train_step(model, optimizer, batch, schedule, gen)
        losses.append(loss)
        if on_step is not None:
            on_step(step + 1, loss)
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("step %d loss %.5f", step + 1, loss)
    return losses


def smoothed(losses: Sequence[float], window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------- sampling


@dataclass
class SamplerConfig:
    kind: str = "ddim"  # "ddpm" (ancestral, all T steps) | "ddim" (strided, deterministic)
    stride: int = 20
    image_size: int = 32
    clip_x0: bool = True  # pixel-space data lives in [-1, 1]


def step_generator(seed: int, step_index: int) -> torch.Generator:
    return torch.Generator().manual_seed(stable_hash(seed, "step", step_index) % 2**63)


@torch.no_grad()
def sample_procedure(model, proc: EncodedProcedure, schedule: NoiseSchedule,
                     sampler: SamplerConfig | None = None, seed: int = 0) -> torch.Tensor:
    """Generate one image per step, each with its own noise stream."""
    sampler = sampler or SamplerConfig()
    model.eval()
    n = len(proc)
    cond = model.procedure_conditioning(proc)
    gens = [step_generator(seed, j + 1) for j in range(n)]
    shape = (model.denoiser.image_channels, sampler.image_size, sampler.image_size)
    x = torch.stack([torch.randn(shape, generator=g) for g in gens])

    def eps_at(t):
        eps = model.predict_noise(x, torch.full((n,), t), proc.text_embs, cond)
        return clip_eps(schedule, x, t, eps) if sampler.clip_x0 else eps

    if sampler.kind == "ddpm":
        for t in range(schedule.T, 0, -1):
            noise = torch.stack([torch.randn(shape, generator=g) for g in gens]) if t > 1 else None
            x = ddpm_step(schedule, x, t, eps_at(t), noise)
    elif sampler.kind == "ddim":
        ts = list(range(schedule.T, 0, -max(1, sampler.stride)))
        for t, t_prev in zip(ts, ts[1:] + [0]):
            x = ddim_step(schedule, x, t, t_prev, eps_at(t))
    else:
        raise ConfigurationError(f"unknown sampler {sampler.kind!r}")
    return x.clamp(-1, 1)


# --------------------------------------------------------------------------- manipulation


@dataclass(frozen=True)
class Edit:
    """A text edit on one step.

    ``replace``: swap ``find`` for ``text``; ``insert``: put ``text`` right
    after ``find``; ``remove``: drop ``find``; ``delete``: drop the step.
    """

    step: int
    kind: str = "replace"
    find: str = ""
    text: str = ""

    @classmethod
    def parse(cls, spec: str) -> "Edit":
        """Parse ``"3:bake->boil"``, ``"3:tomatoes+> and potatoes"``, ``"3:-eggs"`` or ``"3:delete"``."""
        try:
            idx, rest = spec.split(":", 1)
            step = int(idx)
        except ValueError as exc:
            raise EditError(f"bad edit {spec!r}; expected '<step>:<edit>'") from exc
        if rest == "delete":
            return cls(step, "delete")
        if "->" in rest:
            find, text = rest.split("->", 1)
            return cls(step, "replace", find, text)
        if "+>" in rest:
            find, text = rest.split("+>", 1)
            return cls(step, "insert", find, text)
        if rest.startswith("-"):
            return cls(step, "remove", rest[1:])
        raise EditError(f"bad edit {spec!r}")


def apply_edits(recipe: Recipe, edits: Sequence[Edit]) -> Recipe:
    """Apply edits (indices refer to the original recipe) and reindex the steps."""
    steps = {s.index: s for s in recipe.steps}
    deleted = set()
    for ed in edits:
        if ed.step not in steps:
            raise EditError(f"{recipe.recipe_id}: no step {ed.step}")
        s = steps[ed.step]
        if ed.kind == "delete":
            deleted.add(ed.step)
            continue
        if ed.find not in s.text or not ed.find:
            raise EditError(f"{recipe.recipe_id} step {ed.step}: {ed.find!r} not found in {s.text!r}")
        if ed.kind == "replace":
            new = s.text.replace(ed.find, ed.text)
        elif ed.kind == "insert":
            pos = s.text.index(ed.find) + len(ed.find)
            new = s.text[:pos] + ed.text + s.text[pos:]
        elif ed.kind == "remove":
            new = " ".join(s.text.replace(ed.find, "").split())
        else:
            raise EditError(f"unknown edit kind {ed.kind!r}")
        if not new.strip():
            raise EditError(f"{recipe.recipe_id} step {ed.step}: edit leaves an empty step")
        steps[ed.step] = Step(s.index, new, s.image_ref, s.t_start, s.t_end)
    kept = [steps[i] for i in sorted(steps) if i not in deleted]
    if not kept:
        raise EditError(f"{recipe.recipe_id}: edits delete every step")
    reindexed = tuple(Step(i, s.text, s.image_ref, s.t_start, s.t_end) for i, s in enumerate(kept, 1))
    return Recipe(recipe.recipe_id, reindexed, recipe.split, recipe.label, recipe.root)


def manipulate_and_generate(model, recipe: Recipe, edits: Sequence[Edit], provider: EmbeddingProvider,
                            scenario: PromptScenario, schedule: NoiseSchedule,
                            sampler: SamplerConfig | None = None, seed: int = 0):
    """Edit a recipe, rebuild its prompt sequence end-to-end and sample it.

    Returns ``(edited_recipe, images)``.
    """
    edited = apply_edits(recipe, edits)
    seq = make_prompt_sequence(edited, scenario)
    sampler = sampler or SamplerConfig()
    proc = encode_procedure(edited, seq, provider, sampler.image_size, load_images=False)
    return edited, sample_procedure(model, proc, schedule, sampler, seed)


def build_model(memory_kind: str | None, provider: EmbeddingProvider, base: int = 32,
                time_dim: int = 128, memory_dim: int = 256, heads: int = 4,
                retain_text: bool = False, seed: int = 0) -> ProceduralDiffusion:
    torch.manual_seed(seed)
    den = ToyDenoiser(base=base, time_dim=time_dim, context_dim=provider.text_dim)
    mem = None
    if memory_kind not in (None, "none"):
        mem = MemoryNet(memory_kind, provider.text_dim, provider.image_dim, time_dim,
                        dim=memory_dim, heads=heads, retain_text=retain_text)
    return ProceduralDiffusion(den, mem)


def clone_frozen(module: nn.Module) -> nn.Module:
    m = copy.deepcopy(module)
    for p in m.parameters():
        p.requires_grad_(False)
    return m
