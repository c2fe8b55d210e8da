"""Point-tracking metrics (AJ, position accuracy, OA, MTE, survival) and dataset evaluation.

All functions take a prediction and a ground-truth TrackSet of identical shape
``(T, N)`` plus an optional boolean ``mask`` selecting the (frame, point) pairs
that are scored. Predicted visibility is binarised at ``vis_threshold``
(``>=`` counts as visible); invalid predictions count as occluded with an
infinite position error.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import sample_queries
from .tracks import DatasetRecord, TrackSet, VideoClip

log = logging.getLogger(__name__)

THRESHOLDS = (1, 2, 4, 8, 16)
FAIL_DIST = 50.0
SURVIVAL_MAX_FRAMES = 2000
EVAL_SIZE = (256, 256)


def _prep(pred: TrackSet, gt: TrackSet, mask, vis_threshold: float):
    if pred.positions.shape != gt.positions.shape:
        raise ValueError(f"shape mismatch: pred {pred.positions.shape} vs gt {gt.positions.shape}")
    m = gt.valid.copy() if mask is None else (np.asarray(mask, dtype=bool) & gt.valid)
    err = np.linalg.norm(pred.positions - gt.positions, axis=-1)
    err = np.where(pred.valid & np.isfinite(err), err, np.inf)
    gv = gt.visibility > 0.5
    pv = pred.valid & (pred.visibility >= vis_threshold)
    return m, err, gv, pv


def position_accuracy(pred: TrackSet, gt: TrackSet, thresholds=THRESHOLDS, mask=None,
                      vis_threshold: float = 0.5) -> dict:
    """Fraction of gt-visible pairs with L2 error strictly below each threshold; None if none visible."""
    m, err, gv, _ = _prep(pred, gt, mask, vis_threshold)
    sel = m & gv
    n = int(sel.sum())
    return {thr: (float((err[sel] < thr).sum()) / n if n else None) for thr in thresholds}


def occlusion_accuracy(pred: TrackSet, gt: TrackSet, mask=None, vis_threshold: float = 0.5):
    m, _, gv, pv = _prep(pred, gt, mask, vis_threshold)
    n = int(m.sum())
    return float((gv == pv)[m].sum()) / n if n else None


def jaccard_per_threshold(pred: TrackSet, gt: TrackSet, thresholds=THRESHOLDS, mask=None,
                          vis_threshold: float = 0.5) -> dict:
    """TP / (TP + FP + FN); a visible-both pair beyond the threshold is both an FP and an FN."""
    m, err, gv, pv = _prep(pred, gt, mask, vis_threshold)
    out = {}
    for thr in thresholds:
        within = err < thr
        tp = int((m & gv & pv & within).sum())
        fp = int((m & pv & (~gv | ~within)).sum())
        fn = int((m & gv & (~pv | ~within)).sum())
        denom = tp + fp + fn
        out[thr] = tp / denom if denom else 1.0
    return out


def average_jaccard(pred: TrackSet, gt: TrackSet, thresholds=THRESHOLDS, mask=None,
                    vis_threshold: float = 0.5) -> float:
    per = jaccard_per_threshold(pred, gt, thresholds, mask, vis_threshold)
    return float(np.mean(list(per.values())))


def mte(pred: TrackSet, gt: TrackSet, mask=None):
    """Median L2 error over gt-visible pairs."""
    m, err, gv, _ = _prep(pred, gt, mask, 0.5)
    e = err[m & gv]
    return float(np.median(e)) if e.size else None


def survival_rate(pred: TrackSet, gt: TrackSet, fail_dist: float = FAIL_DIST,
                  query_frames=None, mask=None, max_frames: int = SURVIVAL_MAX_FRAMES):
    """Mean over trajectories of the fraction of evaluated frames before the first failure.

    A trajectory is evaluated on its valid frames from its query frame onwards
    (at most ``max_frames``); it fails at the first gt-visible frame whose error
    exceeds ``fail_dist``.
    """
    m, err, gv, _ = _prep(pred, gt, mask, 0.5)
    num_frames, n = m.shape
    q = np.zeros(n, dtype=int) if query_frames is None else np.asarray(query_frames, dtype=int)
    rates = []
    for k in range(n):
        frames = [t for t in range(q[k], num_frames) if m[t, k]][:max_frames]
        if not frames:
            continue
        survived = len(frames)
        for i, t in enumerate(frames):
            if gv[t, k] and err[t, k] > fail_dist:
                survived = i
                break
        rates.append(survived / len(frames))
    return float(np.mean(rates)) if rates else None


@dataclass
class MetricsReport:
    aj: Optional[float]
    delta_avg: Optional[float]
    delta_per_threshold: dict
    oa: Optional[float]
    mte: Optional[float]
    survival: Optional[float]
    n_points: int
    n_videos: int
    jaccard_per_threshold: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta_per_threshold"] = {str(k): v for k, v in self.delta_per_threshold.items()}
        d["jaccard_per_threshold"] = {str(k): v for k, v in self.jaccard_per_threshold.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["delta_per_threshold"] = {float(k) if "." in k else int(k): v
                                    for k, v in d["delta_per_threshold"].items()}
        d["jaccard_per_threshold"] = {float(k) if "." in k else int(k): v
                                      for k, v in d.get("jaccard_per_threshold", {}).items()}
        return cls(**d)

    ROW_KEYS = ("aj", "delta_avg", "oa", "mte", "survival", "n_points", "n_videos")

    def row(self, label: str = "") -> dict:
        out = {"label": label}
        for k in self.ROW_KEYS:
            out[k] = getattr(self, k)
        for thr, v in self.delta_per_threshold.items():
            out[f"delta_{thr}"] = v
        return out

    def to_csv(self, label: str = "") -> str:
        row = self.row(label)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue()


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def protocol_mask(num_frames: int, query_frames, protocol: str) -> np.ndarray:
    """Frames scored per query: at/after the query for ``first``, every frame for ``strided``."""
    q = np.asarray(query_frames, dtype=int)
    t = np.arange(num_frames)[:, None]
    if protocol == "first":
        return t >= q[None, :]
    if protocol == "strided":
        return np.ones((num_frames, q.size), dtype=bool)
    raise ValueError(f"unknown protocol {protocol!r}")


def video_metrics(pred: TrackSet, gt: TrackSet, query_frames, protocol: str,
                  thresholds=THRESHOLDS, vis_threshold: float = 0.5,
                  fail_dist: float = FAIL_DIST) -> MetricsReport:
    mask = protocol_mask(gt.num_frames, query_frames, protocol)
    delta = position_accuracy(pred, gt, thresholds, mask, vis_threshold)
    jac = jaccard_per_threshold(pred, gt, thresholds, mask, vis_threshold)
    dvals = [v for v in delta.values() if v is not None]
    return MetricsReport(
        aj=float(np.mean(list(jac.values()))),
        delta_avg=float(np.mean(dvals)) if dvals else None,
        delta_per_threshold=delta,
        oa=occlusion_accuracy(pred, gt, mask, vis_threshold),
        mte=mte(pred, gt, mask),
        survival=survival_rate(pred, gt, fail_dist, query_frames, mask),
        n_points=gt.num_tracks,
        n_videos=1,
        jaccard_per_threshold=jac,
    )


def aggregate(reports: list, thresholds=THRESHOLDS, skipped=()) -> MetricsReport:
    """Per-video averaging; absent values are excluded."""
    return MetricsReport(
        aj=_mean(r.aj for r in reports),
        delta_avg=_mean(r.delta_avg for r in reports),
        delta_per_threshold={t: _mean(r.delta_per_threshold.get(t) for r in reports)
                             for t in thresholds},
        oa=_mean(r.oa for r in reports),
        mte=_mean(r.mte for r in reports),
        survival=_mean(r.survival for r in reports),
        n_points=sum(r.n_points for r in reports),
        n_videos=len(reports),
        jaccard_per_threshold={t: _mean(r.jaccard_per_threshold.get(t) for r in reports)
                               for t in thresholds},
        skipped=list(skipped),
    )


PredictFn = Callable[[VideoClip, list, str], TrackSet]


def evaluate(pred_fn: PredictFn, dataset, protocol: str = "first", thresholds=THRESHOLDS,
             eval_size=EVAL_SIZE, vis_threshold: float = 0.5, fail_dist: float = FAIL_DIST,
             return_videos: bool = False):
    """Run ``pred_fn(clip, queries, protocol)`` on every record and score at ``eval_size``.

    Predictions are made on the stored clip; predicted and ground-truth
    coordinates are both scaled by ``(W_eval / W, H_eval / H)`` before scoring.
    Videos without any visible query are skipped and listed in ``skipped``.
    """
    reports, skipped = [], []
    for rec in dataset:
        queries = sample_queries(rec.tracks, protocol)
        if not queries:
            log.warning("%s: no visible annotations; skipped", rec.name)
            skipped.append(rec.name)
            continue
        tracks = [q.track for q in queries]
        gt = rec.tracks.select(tracks)
        pred = pred_fn(rec.clip, queries, protocol)
        h, w = rec.resolution
        sx, sy = eval_size[1] / w, eval_size[0] / h
        rep = video_metrics(pred.scaled(sx, sy), gt.scaled(sx, sy), [q.t for q in queries],
                            protocol, thresholds, vis_threshold, fail_dist)
        reports.append((rec.name, rep))
    agg = aggregate([r for _, r in reports], thresholds, skipped)
    return (agg, reports) if return_videos else agg


def model_predictor(model) -> PredictFn:
    """``first`` -> forward tracking; ``strided`` -> forward and backward from each query."""

    def predict(clip, queries, protocol):
        if protocol == "strided":
            return model.track_query_bidirectional(clip, queries)
        return model.track_video(clip, queries, "forward")

    return predict


def oracle_predictor(dataset) -> PredictFn:
    """Returns ground truth; used as an upper-bound sanity check."""
    by_clip = {id(rec.clip): rec for rec in dataset}

    def predict(clip, queries, protocol):
        rec = by_clip[id(clip)]
        return rec.tracks.select([q.track for q in queries])

    return predict
