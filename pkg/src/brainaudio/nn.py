"""Small transformer building blocks shared by the acoustic decoder, denoiser and baselines."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ctx: int | None = None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        d_ctx = d_ctx or d_model
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_ctx, d_model)
        self.v = nn.Linear(d_ctx, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x, ctx):
        b, n, d = x.shape
        m = ctx.shape[1]
        h, dh = self.n_heads, d // self.n_heads
        q = self.q(x).view(b, n, h, dh).transpose(1, 2)
        k = self.k(ctx).view(b, m, h, dh).transpose(1, 2)
        v = self.v(ctx).view(b, m, h, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        return self.o((att @ v).transpose(1, 2).reshape(b, n, d))


def feed_forward(d_model: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model))


class EncoderBlock(nn.Module):
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = feed_forward(d_model)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = Attention(d_model, n_heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = feed_forward(d_model)

    def forward(self, x, memory):
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))


class Encoder(nn.Module):
    def __init__(self, d_model, n_heads, n_layers):
        super().__init__()
        self.blocks = nn.ModuleList([EncoderBlock(d_model, n_heads) for _ in range(n_layers)])
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, d_model, n_heads, n_layers):
        super().__init__()
        self.blocks = nn.ModuleList([DecoderBlock(d_model, n_heads) for _ in range(n_layers)])
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, memory):
        for block in self.blocks:
            x = block(x, memory)
        return self.norm(x)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


class BatchSampler:
    """Seeded epoch-wise shuffling; fixed batch order for a given seed."""

    def __init__(self, n: int, batch: int, seed: int):
        self.n, self.batch = n, min(batch, n)
        self.gen = torch.Generator().manual_seed(seed)
        self._perm = torch.empty(0, dtype=torch.long)
        self._pos = 0

    def next(self) -> torch.Tensor:
        if self._pos + self.batch > len(self._perm):
            self._perm = torch.randperm(self.n, generator=self.gen)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return idx


def finite_difference_check(loss_fn, params, n_probe: int = 6, h: float = 1e-6, seed: int = 0,
                            floor_frac: float = 1e-3) -> float:
    """Max relative error between autograd and central differences on sampled entries.

    ``loss_fn`` maps nothing to a scalar tensor using ``params`` (float64 leaves).
    The denominator is floored at ``floor_frac`` times the RMS of the full
    gradient, so entries whose exact gradient is zero (e.g. attention key
    biases, which softmax ignores) compare their roundoff against the gradient
    scale rather than against zero.
    """
    gen = torch.Generator().manual_seed(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    flat_all = torch.cat([g.reshape(-1) for g in grads])
    floor = max(floor_frac * float(flat_all.pow(2).mean().sqrt()), 1e-12)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        picks = torch.randperm(flat.numel(), generator=gen)[:n_probe]
        for i in picks.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = g.view(-1)[i].item()
            scale = max(abs(numeric), abs(analytic), floor)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst
