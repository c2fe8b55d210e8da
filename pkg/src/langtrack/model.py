"""End-to-end language-assisted tracker: encoders, token generation, consistency decoder, window tracker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .decoder import ConsistencyDecoder, decode
from .encoders import EncoderBundle, to_frames_tensor
from .errors import InputError
from .tokens import TokenGenerator
from .tracker import WindowTracker, build_pyramid
from .tracks import QueryPoint, TrackSet, VideoClip


@dataclass
class TrackResult:
    coords: torch.Tensor  # (T, N, 2)
    vis_logits: torch.Tensor  # (T, N)
    valid: torch.Tensor  # (T, N) bool
    groups: list  # [(query indices, TrackOutput)] in forward time of that pass


def queries_to_array(queries) -> np.ndarray:
    if isinstance(queries, np.ndarray):
        return queries.reshape(-1, 3).astype(np.float64)
    return np.array([[q.t, q.x, q.y] for q in queries], dtype=np.float64).reshape(-1, 3)


class LanguageTracker(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.encoders = EncoderBundle(cfg, text_frozen=True)
        self.tokens = TokenGenerator(cfg)
        self.decoder = ConsistencyDecoder(cfg)
        self.tracker = WindowTracker(cfg)

    @property
    def dtype(self):
        return self.encoders.image_encoder.convs[0].weight.dtype

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def image_features(self, frames: torch.Tensor):
        return self.encoders.image_encoder(frames)

    def decode(self, x_img: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
        return decode(x_img, cls, self.tokens, self.encoders.text_encoder, self.decoder,
                      enabled=self.cfg.decoder_enabled,
                      share_tokens=self.cfg.share_tokens_across_clip)

    def features(self, frames) -> torch.Tensor:
        """Frames ``(T, H, W, 3)`` at model resolution -> fused features ``(T, H', W', d)``."""
        frames = to_frames_tensor(frames, self.dtype)
        x_img, cls = self.image_features(frames)
        return self.decode(x_img, cls)

    def track_features(self, feats: torch.Tensor, queries, direction: str = "forward",
                       iters: int = None) -> TrackResult:
        q = queries_to_array(queries)
        num_frames = feats.shape[0]
        n = q.shape[0]
        coords = feats.new_zeros(num_frames, n, 2)
        logits = feats.new_zeros(num_frames, n)
        valid = torch.zeros(num_frames, n, dtype=torch.bool)
        groups = []
        if n == 0:
            return TrackResult(coords, logits, valid, groups)
        if direction not in ("forward", "backward"):
            raise InputError(f"direction must be forward or backward, got {direction!r}")
        if q[:, 0].min() < 0 or q[:, 0].max() >= num_frames:
            raise InputError("query frame outside the clip")
        if direction == "backward":
            feats = feats.flip(0)
            q = q.copy()
            q[:, 0] = num_frames - 1 - q[:, 0]
        pyramid = build_pyramid(feats, self.cfg.pyramid_levels)
        qxy_all = torch.as_tensor(q[:, 1:], dtype=feats.dtype)
        cols_c, cols_l = [None] * n, [None] * n
        for t in sorted(set(int(v) for v in q[:, 0])):
            idx = np.nonzero(q[:, 0] == t)[0]
            out = self.tracker.forward_group(pyramid, t, qxy_all[idx], iters)
            groups.append((idx, out))
            for j, i in enumerate(idx):
                cols_c[i] = out.coords[:, j]
                cols_l[i] = out.vis_logits[:, j]
            valid[t:, idx] = True
        coords = torch.stack(cols_c, dim=1)
        logits = torch.stack(cols_l, dim=1)
        if direction == "backward":
            coords, logits, valid = coords.flip(0), logits.flip(0), valid.flip(0)
        return TrackResult(coords, logits, valid, groups)

    def _prepare_clip(self, clip):
        frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
        h, w = frames.shape[1:3]
        mh, mw = self.cfg.image_height, self.cfg.image_width
        x = to_frames_tensor(frames, self.dtype)
        if (h, w) != (mh, mw):
            x = F.interpolate(x.permute(0, 3, 1, 2), size=(mh, mw), mode="bilinear",
                              align_corners=False).clamp(0, 1).permute(0, 2, 3, 1)
        return x, mw / w, mh / h

    @torch.no_grad()
    def track_video(self, clip, queries, direction: str = "forward") -> TrackSet:
        """Track queries given in clip pixel coordinates; returns a TrackSet in the same coordinates."""
        q = queries_to_array(queries)
        num_frames = clip.frames.shape[0] if isinstance(clip, VideoClip) else len(clip)
        if q.shape[0] == 0:
            return TrackSet.empty(num_frames)
        frames, sx, sy = self._prepare_clip(clip)
        q = q.copy()
        q[:, 1] *= sx
        q[:, 2] *= sy
        res = self.track_features(self.features(frames), q, direction)
        pos = res.coords.double().numpy() / np.array([sx, sy])
        vis = torch.sigmoid(res.vis_logits).double().numpy()
        valid = res.valid.numpy()
        pos = np.where(valid[..., None], pos, np.nan)
        vis = np.where(valid, vis, 0.0)
        return TrackSet(pos, vis, valid)

    @torch.no_grad()
    def track_query_bidirectional(self, clip, queries) -> TrackSet:
        q = queries_to_array(queries)
        fwd = self.track_video(clip, q, "forward")
        bwd = self.track_video(clip, q, "backward")
        if q.shape[0] == 0:
            return fwd
        t = np.arange(fwd.num_frames)[:, None]
        before = t < q[:, 0][None, :]
        pos = np.where(before[..., None], bwd.positions, fwd.positions)
        vis = np.where(before, bwd.visibility, fwd.visibility)
        return TrackSet(pos, vis, np.ones_like(fwd.valid))


def build_model(cfg: ModelConfig, seed: int = None, dtype=torch.float32) -> LanguageTracker:
    """Seeded construction that leaves the global RNG untouched."""
    seed = cfg.encoder_seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = LanguageTracker(cfg)
    return model.to(dtype)


def as_queries(array) -> list:
    return [QueryPoint(int(t), float(x), float(y)) for t, x, y in queries_to_array(array)]
