"""Trajectory overlays: coloured trails with circle (correct) or cross (incorrect) markers."""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image, ImageDraw

from .tracks import DatasetRecord, TrackSet


class Marker(NamedTuple):
    t: int
    track: int
    kind: Optional[str]  # "circle", "cross", or None when there is nothing to compare against
    x: float
    y: float


def track_colors(n: int) -> list:
    return [tuple(int(255 * c) for c in colorsys.hsv_to_rgb(k / max(n, 1), 0.9, 1.0))
            for k in range(n)]


def classify(pred: TrackSet, gt: Optional[TrackSet], t: int, k: int, threshold: float):
    if gt is None or not (gt.valid[t, k] and gt.visibility[t, k] > 0.5):
        return None
    err = np.linalg.norm(pred.positions[t, k] - gt.positions[t, k])
    return "circle" if err <= threshold else "cross"


def _draw_marker(draw: ImageDraw.ImageDraw, x: float, y: float, kind, color, size: float = 3.0):
    if kind == "cross":
        draw.line([(x - size, y - size), (x + size, y + size)], fill=color, width=2)
        draw.line([(x - size, y + size), (x + size, y - size)], fill=color, width=2)
    elif kind == "circle":
        draw.ellipse([x - size, y - size, x + size, y + size], outline=color, width=2)
    else:
        draw.ellipse([x - 1, y - 1, x + 1, y + 1], fill=color)


def overlay_frame(frame_u8: np.ndarray, pred: TrackSet, gt: Optional[TrackSet], t: int,
                  threshold: float, trail: int = 8):
    """One annotated frame and its marker list."""
    img = Image.fromarray(frame_u8)
    markers = []
    if pred.num_tracks == 0:
        return img, markers
    draw = ImageDraw.Draw(img)
    colors = track_colors(pred.num_tracks)
    for k in range(pred.num_tracks):
        ts = [s for s in range(max(0, t - trail), t + 1)
              if pred.valid[s, k] and np.isfinite(pred.positions[s, k]).all()]
        pts = [tuple(pred.positions[s, k]) for s in ts]
        if len(pts) > 1:
            draw.line(pts, fill=colors[k], width=1)
        if not ts or ts[-1] != t:
            continue
        x, y = pred.positions[t, k]
        kind = classify(pred, gt, t, k, threshold)
        _draw_marker(draw, x, y, kind, colors[k])
        markers.append(Marker(t, k, kind, float(x), float(y)))
    return img, markers


def render_trajectories(record: DatasetRecord, pred: TrackSet, out_dir, threshold: float = 4.0,
                        gt: Optional[TrackSet] = None, frames=None, trail: int = 8) -> list:
    """Write ``frame_XXXXXX.png`` overlays for the selected frames; returns every marker drawn.

    ``gt`` must be aligned with ``pred`` track for track; without it trails are
    drawn with no correctness markers.
    """
    if pred.num_frames != record.clip.num_frames:
        raise ValueError(f"prediction has {pred.num_frames} frames, clip has {record.clip.num_frames}")
    if gt is not None and gt.positions.shape != pred.positions.shape:
        raise ValueError("gt is not aligned with the prediction")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.rint(record.clip.frames * 255.0), 0, 255).astype(np.uint8)
    frames = range(record.clip.num_frames) if frames is None else frames
    markers = []
    for t in frames:
        img, m = overlay_frame(u8[t], pred, gt, t, threshold, trail)
        img.save(out / f"frame_{t:06d}.png")
        markers.extend(m)
    return markers


def point_overlay(frame, pred_points, gt_points, threshold: float) -> Image.Image:
    """Single-image overlay for correspondence results."""
    u8 = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(u8)
    draw = ImageDraw.Draw(img)
    pred_points = np.asarray(pred_points).reshape(-1, 2)
    gt_points = np.asarray(gt_points).reshape(-1, 2)
    colors = track_colors(len(pred_points))
    for k, (p, g) in enumerate(zip(pred_points, gt_points)):
        kind = "circle" if np.linalg.norm(p - g) <= threshold else "cross"
        _draw_marker(draw, p[0], p[1], kind, colors[k])
    return img
