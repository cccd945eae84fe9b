"""Control-branch baseline driven by procedural prompts.

The branch is a trainable copy of the denoiser's down path. Its outputs go
through zero-initialized 1x1 convolutions and are added to the frozen base
denoiser's skip features and middle-block input.

* Text prompts: the branch's cross-attention reads the causal text memory of
  the previous steps instead of the current step text. Only attention
  parameters (plus the memory path and zero convs) train.
* Image prompts: a temporal projection network encodes the history images;
  its output is added to the noisy input of the branch.
"""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import EncodedProcedure, ToyDenoiser, check_scenario
from .encoders import ProjectionHead
from .errors import ValidationError
from .memory import AttentionBlock, tmn_forward

TP_VARIANTS = ("A", "B")


class CausalTemporalConv(nn.Module):
    """Convolution along the step axis of a ``(N, C, H, W)`` sequence.

    Left padding of ``kernel - 1`` makes output ``j`` depend on frames ``<= j`` only.
    """

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv3d(channels, channels, (kernel, 1, 1))

    def forward(self, x):
        seq = x.permute(1, 0, 2, 3).unsqueeze(0)  # (1, C, N, H, W)
        seq = F.pad(seq, (0, 0, 0, 0, self.kernel - 1, 0))
        return self.conv(seq)[0].permute(1, 0, 2, 3)


def _spatial_stack(in_ch, hidden, out_ch):
    chans = [in_ch, *hidden, out_ch]
    return nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans, chans[1:]))


class TemporalProjection(nn.Module):
    """Seven-conv projection network with masked temporal convolutions.

    Variant ``"A"`` follows every spatial conv with a temporal conv; variant
    ``"B"`` runs a stack of temporal convs before an unchanged spatial stack.

    The input is the recipe's image sequence ``(N, C, H, W)``; it is shifted
    one step so that output ``j`` sees images ``1..j-1`` only, and output 1
    (empty history) is zero.
    """

    def __init__(self, variant: str = "A", in_ch: int = 3, out_ch: int = 3,
                 hidden=(16, 16, 32, 32, 32, 32), kernel: int = 3, n_temporal: int = 3):
        super().__init__()
        if variant not in TP_VARIANTS:
            raise ValidationError(f"TP variant must be one of {TP_VARIANTS}, got {variant!r}")
        if len(hidden) != 6:
            raise ValidationError("the projection network has exactly seven spatial convs")
        self.variant, self.out_ch = variant, out_ch
        self.spatial = _spatial_stack(in_ch, hidden, out_ch)
        if variant == "A":
            self.temporal = nn.ModuleList(CausalTemporalConv(c, kernel) for c in [*hidden, out_ch])
        else:
            self.temporal = nn.ModuleList(CausalTemporalConv(in_ch, kernel) for _ in range(n_temporal))

    def network(self, x):
        """The projection network on an already-shifted sequence."""
        last = len(self.spatial) - 1
        if self.variant == "B":
            for tconv in self.temporal:
                x = F.silu(tconv(x))
        for i, conv in enumerate(self.spatial):
            x = conv(x)
            if self.variant == "A":
                x = self.temporal[i](x)
            if i < last:
                x = F.silu(x)
        return x

    def forward(self, images):
        if images.dim() != 4:
            raise ValidationError("expected an (N, C, H, W) image sequence")
        shifted = torch.cat([torch.zeros_like(images[:1]), images[:-1]], dim=0)
        out = self.network(shifted)
        keep = torch.ones(out.shape[0], 1, 1, 1, dtype=out.dtype)
        keep[0] = 0
        return out * keep


def _zero_conv(ch):
    conv = nn.Conv2d(ch, ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Copy of the base down path plus per-resolution zero-initialized output convs."""

    def __init__(self, base: ToyDenoiser):
        super().__init__()
        self.down = copy.deepcopy(base.down)
        c1, c2, c3 = self.down.channels
        self.zero_convs = nn.ModuleList([_zero_conv(c1), _zero_conv(c2), _zero_conv(c3), _zero_conv(c3)])

    def forward(self, x, e, ctx):
        skips = self.down(x, e, ctx)
        outs = [zc(s) for zc, s in zip(self.zero_convs[:3], skips)]
        outs.append(self.zero_convs[3](skips[-1]))
        return outs

    def attention_parameters(self):
        return list(self.down.attn.parameters())


def control_text_forward(branch: ControlBranch, x_t, e, procedural_ctx):
    """Residuals from the branch with the procedural text representation as its context."""
    if procedural_ctx.shape[0] != x_t.shape[0]:
        raise ValidationError("one procedural representation per noisy latent is required")
    return branch(x_t, e, procedural_ctx)


def control_image_forward(branch: ControlBranch, x_t, e, ctx, history_images, tp: TemporalProjection):
    """Residuals from the branch fed ``x_t + tp(history)``.

    ``history_images`` is the recipe's aligned image sequence; ``tp`` shifts it
    so row ``j`` only carries steps before ``j``.
    """
    proc = tp(history_images)
    if proc.shape != x_t.shape:
        raise ValidationError(f"temporal projection output {tuple(proc.shape)} != latents {tuple(x_t.shape)}")
    return branch(x_t + proc, e, ctx)


class ControlledDiffusion(nn.Module):
    """Frozen base denoiser plus a procedural control branch."""

    def __init__(self, base: ToyDenoiser, mode: str = "text", tp_variant: str = "A",
                 memory_dim: int = 64, heads: int = 4):
        super().__init__()
        if mode not in ("text", "image"):
            raise ValidationError(f"control mode must be 'text' or 'image', got {mode!r}")
        self.mode = mode
        self.denoiser = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.branch = ControlBranch(base)
        for p in self.branch.parameters():
            p.requires_grad_(True)  # the copy starts from frozen weights but trains
        if mode == "text":
            self.text_proj = ProjectionHead(base.context_dim, memory_dim)
            self.history = AttentionBlock(memory_dim, heads, mask="causal_strict")
            self.to_context = nn.Linear(memory_dim, base.context_dim)
            trainable = {id(p) for p in self.branch.attention_parameters()}
            for p in self.branch.down.parameters():
                p.requires_grad_(id(p) in trainable)
        else:
            self.tp = TemporalProjection(tp_variant, in_ch=base.image_channels, out_ch=base.image_channels)

    @property
    def memory_kind(self):
        return "tmn" if self.mode == "text" else "imn"

    def procedure_conditioning(self, proc: EncodedProcedure) -> torch.Tensor:
        check_scenario(self.memory_kind, proc.kind)
        if self.mode == "text":
            return self.to_context(tmn_forward(self.history, self.text_proj(proc.text_embs)).vectors)
        if proc.images is None:
            raise ValidationError(f"{proc.recipe_id}: image control needs ground-truth history images")
        return self.tp(proc.images)

    def predict_noise(self, x_t, t, text_emb, cond):
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        e = self.denoiser.time_embed(t)
        if self.mode == "text":
            res = control_text_forward(self.branch, x_t, e, cond)
        else:
            res = self.branch(x_t + cond, e, text_emb)
        return self.denoiser.forward_embedded(x_t, e, text_emb, res)
