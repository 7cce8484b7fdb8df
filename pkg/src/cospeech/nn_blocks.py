"""Shared transformer building blocks for both generator branches."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def sinusoidal_positions(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """(n, dim) fixed sinusoidal position table."""
    pos = torch.arange(n, dtype=dtype).unsqueeze(1)
    half = dim // 2
    freq = torch.exp(torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1)))
    table = torch.zeros(n, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim - half])
    return table


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class CrossAttentionLayer(nn.Module):
    """Pre-LN cross-attention + FFN, residual connections."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.ln_q = nn.LayerNorm(dim)
        self.ln_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim)
        )

    def forward(self, x, ctx):
        ctx_n = self.ln_kv(ctx)
        x = x + self.attn(self.ln_q(x), ctx_n, ctx_n, need_weights=False)[0]
        return x + self.ffn(self.ln_ffn(x))


class CrossAttentionStack(nn.Module):
    def __init__(self, dim: int, heads: int, num_layers: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(CrossAttentionLayer(dim, heads) for _ in range(num_layers))

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer(x, ctx)
        return x


class SelfAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.ln = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim)
        )

    def forward(self, x):
        h = self.ln(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ffn(self.ln_ffn(x))


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return F.normalize(x, p=2, dim=dim, eps=eps)
