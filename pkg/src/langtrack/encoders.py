"""Image and text encoders.

Both are small seeded stand-ins with the interface a pretrained vision-language
pair would expose: the image encoder maps a frame to a dense feature grid plus a
class token, the text encoder maps a sequence of continuous token vectors to a
``K x d`` embedding matrix.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, InputError
from .layers import AttentionBlock


@dataclass
class FeatureMap:
    """Dense features laid out channels-last, ``(..., H', W', d)``."""

    grid: torch.Tensor
    stride: int

    @property
    def dim(self) -> int:
        return self.grid.shape[-1]

    @property
    def spatial(self) -> tuple:
        return tuple(self.grid.shape[-3:-1])


def feature_size(height: int, width: int, stride: int) -> tuple:
    return math.ceil(height / stride), math.ceil(width / stride)


def to_frames_tensor(frames, dtype=None) -> torch.Tensor:
    """Accept numpy or torch frames ``(..., H, W, 3)`` and return a float tensor."""
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames))
    if not torch.is_floating_point(frames):
        frames = frames.float() / 255.0
    if dtype is not None:
        frames = frames.to(dtype)
    return frames


class AttentionPool(nn.Module):
    """One learned query attending over every cell of a feature grid.

    The output is the softmax-weighted sum of the cells themselves, so a grid
    whose cells all equal ``v`` pools to exactly ``v``.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.key = nn.Linear(dim, dim)
        self.query = nn.Parameter(torch.randn(dim) * 0.02)

    def weights(self, grid: torch.Tensor) -> torch.Tensor:
        cells = grid.flatten(-3, -2)
        logits = self.key(cells) @ self.query / math.sqrt(grid.shape[-1])
        return torch.softmax(logits, dim=-1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.shape[-3] * grid.shape[-2] == 0:
            raise InputError("attention pooling over an empty grid")
        w = self.weights(grid)
        return (w.unsqueeze(-1) * grid.flatten(-3, -2)).sum(-2)


class ImageEncoder(nn.Module):
    """Four 3x3 convolution stages (the first log2(stride) downsample by 2).

    The output is centred over each frame's grid and then LayerNorm-ed per cell.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input_size = (cfg.image_height, cfg.image_width)
        self.stride = cfg.stride
        self.dim = cfg.feature_dim
        n_down = int(math.log2(cfg.stride))
        w = cfg.encoder_width
        widths = [3, w, 2 * w, 2 * w, cfg.feature_dim]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2 if i < n_down else 1, padding=1)
            for i in range(4)
        )
        self.out_norm = nn.LayerNorm(cfg.feature_dim)
        self.cls_pool = AttentionPool(cfg.feature_dim)

    def check_frames(self, frames: torch.Tensor) -> None:
        if frames.shape[-1] != 3 or tuple(frames.shape[-3:-1]) != self.input_size:
            raise ConfigError(
                f"frame shape {tuple(frames.shape[-3:])} does not match encoder input "
                f"{self.input_size + (3,)}"
            )
        if not torch.isfinite(frames).all():
            raise InputError("non-finite intensities in frame")
        if frames.numel() and (frames.min() < 0 or frames.max() > 1):
            raise InputError("intensities must lie in [0, 1]")

    def grid(self, frames: torch.Tensor) -> torch.Tensor:
        lead = frames.shape[:-3]
        x = frames.reshape(-1, *frames.shape[-3:]).permute(0, 3, 1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.gelu(x)
        # remove the per-frame mean: raw activations share one dominant direction
        x = x - x.mean((2, 3), keepdim=True)
        x = x.permute(0, 2, 3, 1).reshape(*lead, *x.shape[-2:], self.dim)
        return self.out_norm(x)

    def forward(self, frames: torch.Tensor):
        """frames ``(..., H, W, 3)`` in [0, 1] -> (grid ``(..., H', W', d)``, class token ``(..., d)``)."""
        self.check_frames(frames)
        g = self.grid(frames)
        return g, self.cls_pool(g)


class TextEncoder(nn.Module):
    """Two pre-norm self-attention blocks over continuous token vectors."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.max_len = cfg.max_text_len
        self.token_dim = cfg.token_dim
        self.dim = cfg.feature_dim
        self.embed = nn.Linear(cfg.token_dim, cfg.feature_dim)
        self.pos = nn.Parameter(torch.randn(cfg.max_text_len, cfg.feature_dim) * 0.02)
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.feature_dim, cfg.text_heads, cfg.ffn_mult)
            for _ in range(cfg.text_layers)
        )
        self.norm = nn.LayerNorm(cfg.feature_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens ``(..., K, token_dim)`` -> embeddings ``(..., K, d)``."""
        k = tokens.shape[-2]
        if k > self.max_len:
            raise InputError(f"{k} tokens exceed max_text_len={self.max_len}")
        if tokens.shape[-1] != self.token_dim:
            raise InputError(f"token width {tokens.shape[-1]} != {self.token_dim}")
        x = self.embed(tokens) + self.pos[:k]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class EncoderBundle(nn.Module):
    """Trainable image encoder plus a text encoder frozen at construction."""

    def __init__(self, cfg: ModelConfig, text_frozen: bool = True):
        super().__init__()
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self._dims = (cfg.feature_dim, cfg.feature_dim)
        self.text_frozen = text_frozen
        if text_frozen:
            self.text_encoder.requires_grad_(False)

    @property
    def dims(self) -> tuple:
        """(image channel dim, text channel dim); fixed at construction."""
        return self._dims

    def encode_image(self, frame) -> tuple:
        frame = to_frames_tensor(frame, dtype=self.image_encoder.convs[0].weight.dtype)
        grid, cls = self.image_encoder(frame)
        return FeatureMap(grid, self.image_encoder.stride), cls

    def encode_text(self, tokens) -> torch.Tensor:
        matrix = getattr(tokens, "matrix", tokens)
        return self.text_encoder(matrix)

    def text_checksum(self) -> str:
        return parameter_checksum(self.text_encoder)
