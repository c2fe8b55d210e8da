"""Automatic text-token generation: learnable prompt rows followed by rows mapped from the class token."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, InputError
from .layers import AttentionBlock


@dataclass
class TextTokenSequence:
    """Rows ``[learnable | mapped]``; ``split`` is the index of the first mapped row."""

    matrix: torch.Tensor
    split: int

    @property
    def learnable(self) -> torch.Tensor:
        return self.matrix[..., : self.split, :]

    @property
    def mapped(self) -> torch.Tensor:
        return self.matrix[..., self.split :, :]

    def __len__(self):
        return self.matrix.shape[-2]


class LearnableTokens(nn.Module):
    def __init__(self, count: int, dim: int, std: float = 0.02):
        super().__init__()
        self.matrix = nn.Parameter(torch.randn(count, dim) * std)

    def forward(self):
        return self.matrix


class MLPMapper(nn.Module):
    """linear -> GELU -> linear -> GELU -> linear, reshaped to ``(K_m, d_tok)``."""

    def __init__(self, in_dim: int, hidden: int, count: int, token_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.count = count
        self.token_dim = token_dim
        self.layers = nn.ModuleList([
            nn.Linear(in_dim, hidden),
            nn.Linear(hidden, hidden),
            nn.Linear(hidden, count * token_dim),
        ])

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        x = cls
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x.unflatten(-1, (self.count, self.token_dim))


class TransformerMapper(nn.Module):
    """Learned token seed, shifted by a projection of the class token, through three attention blocks."""

    def __init__(self, in_dim: int, count: int, token_dim: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.in_dim = in_dim
        self.count = count
        self.token_dim = token_dim
        self.seed = nn.Parameter(torch.randn(count, token_dim) * 0.02)
        self.cond = nn.Linear(in_dim, token_dim)
        self.blocks = nn.ModuleList(AttentionBlock(token_dim, heads, ffn_mult) for _ in range(3))
        self.out = nn.Linear(token_dim, token_dim)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        x = self.seed + self.cond(cls).unsqueeze(-2)
        for blk in self.blocks:
            x = blk(x)
        return self.out(x)


class TokenGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dim = cfg.feature_dim
        self.learnable = LearnableTokens(cfg.num_learnable_tokens, cfg.token_dim)
        if cfg.mapping_network == "mlp":
            self.mapper = MLPMapper(cfg.feature_dim, cfg.mapping_hidden,
                                    cfg.num_mapped_tokens, cfg.token_dim)
        else:
            heads = cfg.heads if cfg.token_dim % cfg.heads == 0 else 1
            self.mapper = TransformerMapper(cfg.feature_dim, cfg.num_mapped_tokens,
                                            cfg.token_dim, heads, cfg.ffn_mult)

    def map_tokens(self, cls: torch.Tensor) -> torch.Tensor:
        if cls.shape[-1] != self.dim:
            raise ConfigError(f"class token width {cls.shape[-1]} != configured {self.dim}")
        return self.mapper(cls)

    def forward(self, cls: torch.Tensor) -> TextTokenSequence:
        return compose_text_tokens(self.learnable(), self.map_tokens(cls))


def compose_text_tokens(learnable: torch.Tensor, mapped: torch.Tensor) -> TextTokenSequence:
    """Concatenate learnable rows (shared) before mapped rows (possibly batched)."""
    if learnable.shape[-1] != mapped.shape[-1]:
        raise InputError(f"token width mismatch: {learnable.shape[-1]} vs {mapped.shape[-1]}")
    p = learnable.expand(*mapped.shape[:-2], *learnable.shape[-2:])
    return TextTokenSequence(torch.cat([p, mapped], dim=-2), learnable.shape[-2])
