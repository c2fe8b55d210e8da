"""Consistency decoder: text enhancement against a pooled image embedding, then image-text integration.

The integration step builds the integrated map ``z[i, j, k] = <x_I[i, j], t[k]>``
and projects ``concat(x_I, z)`` back to ``d`` channels with one linear layer.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .encoders import AttentionPool
from .errors import InputError, NumericError
from .layers import AttentionBlock


def integrated_map(x_img: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """``(..., H, W, d) x (..., K, d) -> (..., H, W, K)``."""
    if x_img.shape[-1] != text.shape[-1]:
        raise InputError(f"channel mismatch: image {x_img.shape[-1]} vs text {text.shape[-1]}")
    return torch.einsum("...hwc,...kc->...hwk", x_img, text)


def _check_finite(x: torch.Tensor, what: str) -> None:
    bad = ~torch.isfinite(x)
    if bad.any():
        loc = tuple(int(i) for i in bad.nonzero()[0])
        raise NumericError(f"non-finite value in {what}", where=loc)


class ConsistencyDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.feature_dim
        self.dim = d
        self.num_tokens = cfg.num_learnable_tokens + cfg.num_mapped_tokens
        self.integration = cfg.integration
        self.self_layers = cfg.self_layers
        self.cross_layers = cfg.cross_layers
        self.image_pool = AttentionPool(d)
        self.self_blocks = nn.ModuleList(
            AttentionBlock(d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.self_layers))
        self.cross_blocks = nn.ModuleList(
            AttentionBlock(d, cfg.heads, cfg.ffn_mult, cross=True) for _ in range(cfg.cross_layers))
        in_ch = {"cat_and_map": d + self.num_tokens,
                 "map_only": self.num_tokens,
                 "cat_only": 2 * d}[cfg.integration]
        self.proj = nn.Linear(in_ch, d)
        self.reset_projection()

    def reset_projection(self, extra_scale: float = 0.1) -> None:
        """Identity on the image channels, small random weights on the others.

        The fused features start close to the image features and the text
        pathway grows in during training.
        """
        with torch.no_grad():
            w = self.proj.weight.mul_(extra_scale)
            self.proj.bias.zero_()
            if self.integration != "map_only":
                w[:, : self.dim] = torch.eye(self.dim, dtype=w.dtype)

    def enhance_text(self, t0: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        """Alternate self- and cross-attention rounds; keys/values always come from the original ``g``."""
        if t0.shape[-1] != g.shape[-1]:
            raise InputError(f"text width {t0.shape[-1]} != image embedding width {g.shape[-1]}")
        context = g.unsqueeze(-2)
        t = t0
        for i in range(max(self.self_layers, self.cross_layers)):
            if i < self.self_layers:
                t = self.self_blocks[i](t)
            if i < self.cross_layers:
                t = self.cross_blocks[i](t, context)
        return t

    def pre_projection(self, x_img: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """The tensor fed to the projection for the configured integration mode."""
        if self.integration == "cat_only":
            pooled = text.mean(-2)[..., None, None, :].expand_as(x_img)
            return torch.cat([x_img, pooled], dim=-1)
        z = integrated_map(x_img, text)
        if self.integration == "map_only":
            return z
        return torch.cat([x_img, z], dim=-1)

    def integrate_features(self, x_img: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        cat = self.pre_projection(x_img, text)
        _check_finite(cat, "integration input")
        out = self.proj(cat)
        _check_finite(out, "projected features")
        return out

    def set_passthrough_projection(self) -> None:
        """Projection ``[I | 0]``: the first ``d`` input channels pass through unchanged."""
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.zero_()
            n = min(self.dim, self.proj.in_features)
            self.proj.weight[:n, :n] = torch.eye(n, dtype=self.proj.weight.dtype)

    def forward(self, x_img: torch.Tensor, t0: torch.Tensor) -> torch.Tensor:
        g = self.image_pool(x_img)
        t = self.enhance_text(t0, g)
        return self.integrate_features(x_img, t)


def decode(x_img, cls, token_generator, text_encoder, decoder: ConsistencyDecoder,
           enabled: bool = True, share_tokens: bool = False):
    """Per-frame fusion: class token -> text tokens -> text embedding -> enhanced -> fused features.

    ``x_img`` is ``(T, H', W', d)`` (or a single frame), ``cls`` the matching ``(T, d)``.
    With ``share_tokens`` every frame uses the tokens generated from the first frame.
    """
    if not enabled:
        return x_img
    if share_tokens and cls.dim() > 1:
        cls = cls[:1].expand_as(cls)
    tokens = token_generator(cls)
    t0 = text_encoder(tokens.matrix)
    return decoder(x_img, t0)
