"""Shared attention building blocks.

Both diffusion stages are built from the same two primitives: a transformer
block that treats every frame independently (attention along the token axis)
and a frame-attention block that treats every token position independently
(attention along the frame axis). Output projections default to zero init so
each residual branch starts as a no-op.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ValidationError


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sinusoidal features of a timestep vector, [b] -> [b, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    freqs = freqs.to(device=t.device, dtype=torch.get_default_dtype())
    args = t.to(freqs.dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbed(nn.Module):
    """Sinusoidal timestep features passed through a 2-layer map."""

    def __init__(self, dim: int, out_dim: int | None = None):
        super().__init__()
        out_dim = out_dim or dim
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.dim).to(self.net[0].weight.dtype)
        return self.net(emb)


class MultiheadAttention(nn.Module):
    """Plain multi-head attention with optional cross inputs and padding mask.

    `key_padding_mask` marks VALID key positions with True. Weights can be
    returned for inspection ([b, heads, Lq, Lk]).
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, zero_init_out: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)
        if zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor | None = None,
        key_padding_mask: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        key = query if key is None else key
        b, lq, _ = query.shape
        lk = key.shape[1]
        q = self.q(query).reshape(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(key).reshape(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(key).reshape(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            invalid = ~key_padding_mask[:, None, None, :]
            scores = scores.masked_fill(invalid, float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, lq, self.heads * self.head_dim)
        out = self.out(out)
        if need_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int = 4, zero_init_out: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)
        if zero_init_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP over the token axis of a [b, f, n, d] grid.

    The frame axis is folded into the batch, so every frame is processed
    independently; output for frame i depends only on tokens of frame i.
    """

    def __init__(self, dim: int, heads: int, zero_init_out: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, zero_init_out=zero_init_out)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, zero_init_out=zero_init_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, f, n, d = x.shape
        h = x.reshape(b * f, n, d)
        h = h + self.attn(self.norm1(h))
        h = h + self.mlp(self.norm2(h))
        return h.reshape(b, f, n, d)


class FrameAttentionBlock(nn.Module):
    """Self-attention along the frame axis, run independently per token index.

    The token axis is folded into the batch, so output at token j depends only
    on inputs at token j across all frames.
    """

    def __init__(self, dim: int, heads: int, zero_init_out: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, zero_init_out=zero_init_out)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, zero_init_out=zero_init_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, f, n, d = x.shape
        h = x.permute(0, 2, 1, 3).reshape(b * n, f, d)
        h = h + self.attn(self.norm1(h))
        h = h + self.mlp(self.norm2(h))
        return h.reshape(b, n, f, d).permute(0, 2, 1, 3)
