"""Independent reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np
import torch

from procdiff.diffusion import EncodedProcedure
from procdiff.encoders import EmbeddingProvider


def naive_attention_last(block, hist: torch.Tensor) -> torch.Tensor:
    """Re-run a block's attention on a sliced history and return its last position.

    Written with explicit per-head loops, no masking (the last row sees all rows).
    """
    n, d = hist.shape
    heads = block.heads
    dh = d // heads
    x = hist.clone()
    if block.positional:
        for pos in range(n):
            for i in range(0, d, 2):
                freq = math.exp(-math.log(10000.0) * i / d)
                x[pos, i] = x[pos, i] + math.sin(pos * freq)
                if i + 1 < d:
                    x[pos, i + 1] = x[pos, i + 1] + math.cos(pos * freq)
    mu = x.mean(dim=1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=1, keepdim=True)
    h = (x - mu) / torch.sqrt(var + block.norm.eps) * block.norm.weight + block.norm.bias
    q = h @ block.q.weight.T + block.q.bias
    k = h @ block.k.weight.T + block.k.bias
    v = h @ block.v.weight.T + block.v.bias
    ctx = torch.zeros(d, dtype=hist.dtype)
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        scores = torch.stack([q[-1, sl] @ k[r, sl] for r in range(n)]) / math.sqrt(dh)
        w = torch.exp(scores - scores.max())
        w = w / w.sum()
        ctx[sl] = sum(w[r] * v[r, sl] for r in range(n))
    return x[-1] + block.out.weight @ ctx + block.out.bias


def slicing_oracle(block, embs: torch.Tensor) -> torch.Tensor:
    """``m_j`` by re-running attention on history ``[1..j-1]``; ``m_1`` is zero."""
    rows = [torch.zeros(embs.shape[1], dtype=embs.dtype)]
    for j in range(1, embs.shape[0]):
        rows.append(naive_attention_last(block, embs[:j]))
    return torch.stack(rows)


def brute_force_consistency(text_embs, image_embs):
    """Triple loop over (i, j, k) for the weighted cross-step consistency score."""
    t = np.asarray(text_embs, dtype=np.float64)
    im = np.asarray(image_embs, dtype=np.float64)
    n = t.shape[0]

    def score(a, b):
        cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        return 100.0 * min(1.0, max(0.0, cos))

    p = []
    for i in range(n):
        denom = 0.0
        for k in range(n):
            if k != i:
                denom += score(t[i], t[k])
        total = 0.0
        for j in range(n):
            if j == i:
                continue
            w = score(t[i], t[j]) / denom if denom > 0 else 1.0 / (n - 1)
            total += w * score(im[i], t[j])
        p.append(total)
    return p, sum(p) / n


def param_gradient_errors(module, loss_fn, h: float = 1e-5, floor_frac: float = 1e-3):
    """Relative error between autograd and central differences, per parameter tensor.

    Tensors whose true gradient is zero (attention key biases, which softmax
    is invariant to) have no meaningful relative error, so the denominator is
    floored at ``floor_frac`` times the whole module's gradient norm.
    """
    module.zero_grad()
    loss_fn().backward()
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    total = torch.sqrt(sum((p.grad.detach() ** 2).sum() for _, p in params)).item()
    errors = {}
    for name, p in params:
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric[i] = (up - down) / (2 * h)
        scale = max(analytic.norm().item(), numeric.norm().item(), floor_frac * total, 1e-12)
        errors[name] = (analytic - numeric).norm().item() / scale
    return errors


def random_procedure(n: int, text_dim: int, image_dim: int, gen: torch.Generator, kind="text_only",
                     modalities=None, image_size: int = 8) -> EncodedProcedure:
    return EncodedProcedure(
        recipe_id="rand",
        text_embs=torch.randn(n, text_dim, generator=gen),
        modalities=list(modalities or ["text"] * n),
        image_embs=torch.randn(n, image_dim, generator=gen),
        images=torch.rand(n, 3, image_size, image_size, generator=gen) * 2 - 1,
        kind=kind,
    )


class PixelEncoder(EmbeddingProvider):
    """Provider whose image embedding is a linear read-out of the first pixel row.

    Lets a test plant a frame whose embedding is collinear with a text embedding.
    """

    name = "pixel"

    def __init__(self, dim: int = 16, seed: int = 0):
        self.text_dim = self.image_dim = dim
        self.rng = np.random.default_rng(seed)
        self.texts = {}

    def encode_text(self, text):
        if text not in self.texts:
            self.texts[text] = self.rng.standard_normal(self.text_dim)
        return self.texts[text]

    def encode_image(self, image):
        arr = np.asarray(image, dtype=np.float64)
        return arr[0, : self.image_dim, 0] / 127.5 - 1.0

    def frame_for(self, vec, noise_rng=None):
        """Frame whose embedding is (up to 8-bit rounding) proportional to ``vec``."""
        v = np.asarray(vec, dtype=np.float64)
        v = v / np.abs(v).max()
        frame = np.zeros((2, self.image_dim, 3), dtype=np.uint8)
        frame[0, :, 0] = np.rint((v + 1.0) * 127.5).astype(np.uint8)
        return frame

    def random_frame(self, rng):
        return self.frame_for(rng.standard_normal(self.image_dim))
