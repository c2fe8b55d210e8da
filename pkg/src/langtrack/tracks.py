"""Value types for clips, queries and trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import InputError, IntegrityError


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    frame_rate: Optional[float] = None

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise InputError(f"frames must be (T, H, W, 3), got {f.shape}")
        if f.shape[0] < 1 or f.shape[1] < 8 or f.shape[2] < 8:
            raise InputError(f"clip too small: {f.shape}")
        if not np.isfinite(f).all() or f.min() < 0 or f.max() > 1:
            raise InputError("intensities must be finite and within [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple:
        """(H, W)"""
        return self.frames.shape[1], self.frames.shape[2]

    def reversed(self) -> "VideoClip":
        return VideoClip(self.frames[::-1].copy(), self.frame_rate)


class QueryPoint(NamedTuple):
    t: int
    x: float
    y: float
    track: int = -1  # ground-truth track this query was sampled from, if any


@dataclass
class TrackSet:
    """Per-query trajectories: positions ``(T, N, 2)`` as (x, y) pixels, visibility and validity ``(T, N)``."""

    positions: np.ndarray
    visibility: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.visibility.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        t, n = self.visibility.shape
        if self.positions.shape != (t, n, 2) or self.valid.shape != (t, n):
            raise InputError(
                f"inconsistent TrackSet shapes {self.positions.shape}, "
                f"{self.visibility.shape}, {self.valid.shape}")

    @property
    def num_frames(self) -> int:
        return self.visibility.shape[0]

    @property
    def num_tracks(self) -> int:
        return self.visibility.shape[1]

    @classmethod
    def empty(cls, num_frames: int) -> "TrackSet":
        return cls(np.zeros((num_frames, 0, 2)), np.zeros((num_frames, 0)),
                   np.zeros((num_frames, 0), dtype=bool))

    def visible(self, threshold: float = 0.5) -> np.ndarray:
        return self.visibility >= threshold

    def check(self) -> "TrackSet":
        """Validate the invariants; raise IntegrityError on violation."""
        if not np.isfinite(self.positions[self.valid]).all():
            raise IntegrityError("non-finite position on a valid entry")
        v = self.visibility[self.valid]
        if v.size and (not np.isfinite(v).all() or v.min() < 0 or v.max() > 1):
            raise IntegrityError("visibility outside [0, 1]")
        return self

    def select(self, idx) -> "TrackSet":
        return TrackSet(self.positions[:, idx], self.visibility[:, idx], self.valid[:, idx])

    def time_reversed(self) -> "TrackSet":
        return TrackSet(self.positions[::-1].copy(), self.visibility[::-1].copy(),
                        self.valid[::-1].copy())

    def scaled(self, sx: float, sy: float) -> "TrackSet":
        pos = self.positions * np.array([sx, sy])
        return TrackSet(pos, self.visibility.copy(), self.valid.copy())

    def equals(self, other: "TrackSet") -> bool:
        return (np.array_equal(self.positions, other.positions, equal_nan=True)
                and np.array_equal(self.visibility, other.visibility, equal_nan=True)
                and np.array_equal(self.valid, other.valid))


@dataclass
class DatasetRecord:
    clip: VideoClip
    tracks: TrackSet
    name: str = "video"
    source: str = "synthetic"

    @property
    def resolution(self) -> tuple:
        return self.clip.size

    def check(self) -> "DatasetRecord":
        if self.tracks.num_frames != self.clip.num_frames:
            raise IntegrityError(
                f"{self.name}: {self.tracks.num_frames} annotated frames vs "
                f"{self.clip.num_frames} video frames")
        self.tracks.check()
        h, w = self.clip.size
        vis = (self.tracks.visibility > 0.5) & self.tracks.valid
        p = self.tracks.positions[vis]
        if p.size and (p[:, 0].min() < -0.5 or p[:, 0].max() > w - 0.5
                       or p[:, 1].min() < -0.5 or p[:, 1].max() > h - 0.5):
            raise IntegrityError(f"{self.name}: visible point outside the frame")
        return self
