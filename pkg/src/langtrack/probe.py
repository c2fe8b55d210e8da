"""Correspondence probe: nearest-neighbour matching on fused features under chosen conditioning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .decoder import decode
from .encoders import FeatureMap, to_frames_tensor
from .errors import InputError
from .tracker import pixel_to_grid, sample_grid
from .tracks import DatasetRecord


def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def cosine_scores(query: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """query ``(N, d)``, grid ``(H, W, d)`` -> ``(N, H*W)``; zero-norm cells score -inf."""
    cells = grid.reshape(-1, grid.shape[-1])
    cn = cells.norm(dim=-1)
    qn = query.norm(dim=-1, keepdim=True)
    sim = (query @ cells.T) / (qn * cn).clamp_min(torch.finfo(cells.dtype).tiny)
    sim = torch.where(cn[None, :] > 0, sim, torch.full_like(sim, float("-inf")))
    return torch.where(qn > 0, sim, torch.full_like(sim, float("-inf")))


def nearest_correspondence(src_feat: FeatureMap, tgt_feat: FeatureMap, src_points) -> np.ndarray:
    """Pixel coordinates in the target of the most cosine-similar cell for each source point.

    Ties go to the lowest row-major cell index.
    """
    if src_feat.dim != tgt_feat.dim:
        raise InputError(f"channel mismatch: {src_feat.dim} vs {tgt_feat.dim}")
    pts = _as_points(src_points)
    if pts.shape[0] == 0:
        return pts
    s = src_feat.stride
    h, w = src_feat.spatial
    if (pts < -0.5).any() or (pts[:, 0] > w * s - 0.5).any() or (pts[:, 1] > h * s - 0.5).any():
        raise InputError("source point outside the source frame")
    src = src_feat.grid.detach()
    xy = pixel_to_grid(torch.as_tensor(pts, dtype=src.dtype), s)
    q = sample_grid(src.permute(2, 0, 1)[None], xy[None])[0]
    sim = cosine_scores(q, tgt_feat.grid.detach())
    idx = sim.argmax(dim=-1).numpy()
    tw = tgt_feat.spatial[1]
    ts = tgt_feat.stride
    row, col = np.divmod(idx, tw)
    return np.stack([ts * col + (ts - 1) / 2, ts * row + (ts - 1) / 2], axis=-1).astype(np.float64)


def pck_bbox(pred, gt, bbox, alpha: float = 0.1) -> Optional[float]:
    """Fraction of points with L2 error at most ``alpha * max(w, h)``; None for no points."""
    bw, bh = bbox
    if bw <= 0 or bh <= 0:
        raise InputError(f"bounding box must be positive, got {bbox}")
    p, g = _as_points(pred), _as_points(gt)
    if p.shape != g.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {g.shape}")
    if p.shape[0] == 0:
        return None
    err = np.linalg.norm(p - g, axis=-1)
    return float(np.mean(err <= alpha * max(bw, bh)))


def conditioned_features(model, frame, cond_frame=None) -> FeatureMap:
    """Fused features of ``frame`` with text tokens generated from ``cond_frame`` (default: itself)."""
    with torch.no_grad():
        x = to_frames_tensor(np.asarray(frame)[None], model.dtype)
        grid, cls = model.image_features(x)
        if cond_frame is not None:
            c = to_frames_tensor(np.asarray(cond_frame)[None], model.dtype)
            cls = model.image_features(c)[1]
        fused = decode(grid, cls, model.tokens, model.encoders.text_encoder, model.decoder,
                       enabled=model.cfg.decoder_enabled)
    return FeatureMap(fused[0], model.cfg.stride)


@dataclass
class ProbeResult:
    name: str
    matched_pck: Optional[float]
    mismatched_pck: Optional[float]
    gt: np.ndarray
    pred_matched: np.ndarray
    pred_mismatched: np.ndarray
    bbox: tuple


def probe_pair(model, src_frame, tgt_frame, src_points, tgt_points, bbox, unrelated_frame,
               alpha: float = 0.1, name: str = "") -> ProbeResult:
    """Same-conditioning versus mismatched-conditioning PCK for one image pair.

    Matched: both images use tokens generated from the source image.
    Mismatched: the target uses tokens generated from ``unrelated_frame``.
    """
    src = conditioned_features(model, src_frame)
    tgt_same = conditioned_features(model, tgt_frame, src_frame)
    tgt_other = conditioned_features(model, tgt_frame, unrelated_frame)
    gt = _as_points(tgt_points)
    pm = nearest_correspondence(src, tgt_same, src_points)
    pu = nearest_correspondence(src, tgt_other, src_points)
    return ProbeResult(name, pck_bbox(pm, gt, bbox, alpha), pck_bbox(pu, gt, bbox, alpha),
                       gt, pm, pu, tuple(bbox))


def record_pair(record: DatasetRecord, src_t: int = 0, tgt_t: int = None):
    """Points visible in both frames of one clip and the extent of their target positions."""
    tgt_t = record.clip.num_frames - 1 if tgt_t is None else tgt_t
    vis = record.tracks.visible()
    ok = vis[src_t] & vis[tgt_t]
    src = record.tracks.positions[src_t, ok]
    tgt = record.tracks.positions[tgt_t, ok]
    if tgt.shape[0] == 0:
        return src, tgt, (1.0, 1.0)
    ext = tgt.max(0) - tgt.min(0) + 1.0
    return src, tgt, (float(ext[0]), float(ext[1]))


def run_probe(model, records, alpha: float = 0.1) -> list:
    """Probe every record against the next one (cyclically) as the unrelated image."""
    out = []
    for i, rec in enumerate(records):
        other = records[(i + 1) % len(records)]
        src, tgt, bbox = record_pair(rec)
        frames = rec.clip.frames
        out.append(probe_pair(model, frames[0], frames[-1], src, tgt, bbox,
                              other.clip.frames[0], alpha, rec.name))
    return out


def probe_table(results: list) -> str:
    lines = [f"{'pair':<16}{'matched':>10}{'mismatched':>12}"]
    fmt = lambda v: "-" if v is None else f"{v:.3f}"
    for r in results:
        lines.append(f"{r.name:<16}{fmt(r.matched_pck):>10}{fmt(r.mismatched_pck):>12}")
    mean = lambda vals: None if not vals else float(np.mean(vals))
    m = mean([r.matched_pck for r in results if r.matched_pck is not None])
    u = mean([r.mismatched_pck for r in results if r.mismatched_pck is not None])
    lines.append(f"{'mean':<16}{fmt(m):>10}{fmt(u):>12}")
    return "\n".join(lines) + "\n"
