"""Attention building blocks shared by the text encoder, the mapping network and the decoder."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        # x: (..., Lq, dim), context: (..., Lk, dim)
        h = self.heads
        dh = self.dim // h
        q = self.q(x).unflatten(-1, (h, dh)).transpose(-2, -3)
        k = self.k(context).unflatten(-1, (h, dh)).transpose(-2, -3)
        v = self.v(context).unflatten(-1, (h, dh)).transpose(-2, -3)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        y = (attn @ v).transpose(-2, -3).flatten(-2)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class AttentionBlock(nn.Module):
    """Pre-norm residual block: attention sub-block followed by a feed-forward sub-block.

    With ``cross=True`` the keys and values come from a separate context sequence,
    normalised by its own LayerNorm.
    """

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, cross: bool = False):
        super().__init__()
        self.cross = cross
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim) if cross else None
        self.attn = MultiHeadAttention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult)

    def attend(self, x, context=None):
        """Residual attention sub-block only."""
        q = self.norm_q(x)
        if self.cross:
            if context is None:
                raise ValueError("cross-attention block needs a context")
            kv = self.norm_kv(context)
        else:
            kv = q
        return x + self.attn(q, kv)

    def forward(self, x, context=None):
        x = self.attend(x, context)
        return x + self.ffn(self.norm_ff(x))
