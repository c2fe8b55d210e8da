"""Training: windowed L1 track regression plus visibility cross-entropy, AdamW updates, checkpoints."""

from __future__ import annotations

import hashlib
import io
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, RunConfig, TrainConfig, apply_overrides
from .data import sample_queries
from .errors import IntegrityError, NumericError
from .model import LanguageTracker, build_model
from .tracks import DatasetRecord, TrackSet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "langtrack-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LossReport:
    track_loss: float
    visibility_loss: float
    total: float
    window_count: int

    def as_dict(self):
        return asdict(self)


def _l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return (pred - gt).abs().sum(-1)


def track_regression_loss(pred, gt: torch.Tensor, weights: torch.Tensor, windows) -> torch.Tensor:
    """Sum over windows of the weighted mean L1 distance inside each window.

    pred: ``(T, N, 2)`` tensor sliced per window, or a list with one ``(Tw, N, 2)``
    tensor per window; gt: ``(T, N, 2)``; weights: ``(T, N)``, zero where not scored;
    windows: ``[(begin, end), ...]``.
    """
    total = gt.new_zeros(())
    counted = False
    for j, (b, e) in enumerate(windows):
        p = pred[j] if isinstance(pred, (list, tuple)) else pred[b:e]
        w = weights[b:e]
        denom = w.sum()
        if denom <= 0:
            continue
        counted = True
        g = torch.where(w.unsqueeze(-1) > 0, gt[b:e], p.detach())
        total = total + (w * _l1(p, g)).sum() / denom
    if not counted:
        warnings.warn("track_regression_loss: no scored points", RuntimeWarning, stacklevel=2)
    return total


def visibility_loss(logits: torch.Tensor, gt_vis: torch.Tensor, mask: torch.Tensor = None) -> torch.Tensor:
    """Mean binary cross-entropy over masked entries, in logit form."""
    bce = F.binary_cross_entropy_with_logits(logits, gt_vis.to(logits.dtype), reduction="none")
    if mask is None:
        return bce.mean()
    m = mask.to(logits.dtype)
    if m.sum() == 0:
        return logits.new_zeros(())
    return (bce * m).sum() / m.sum()


@dataclass
class Batch:
    frames: torch.Tensor  # (T, H, W, 3)
    queries: np.ndarray  # (N, 3) rows (t, x, y)
    gt: TrackSet  # (T, N) aligned with queries
    stride: int = 1
    record: str = ""


def make_batch(record: DatasetRecord, cfg: TrainConfig, rng: np.random.Generator,
               stride: int = None, offset: int = None) -> Batch:
    """Frame-interval subsampled clip with ``tracks_per_batch`` training queries."""
    stride = int(rng.choice(cfg.frame_intervals)) if stride is None else stride
    total = record.clip.num_frames
    span = (cfg.clip_len - 1) * stride + 1
    if offset is None:
        offset = int(rng.integers(0, max(total - span, 0) + 1))
    idx = np.arange(offset, total, stride)[: cfg.clip_len]
    if idx.size < 2:
        idx = np.arange(0, total)[: cfg.clip_len]
        stride = 1
    sub = TrackSet(record.tracks.positions[idx], record.tracks.visibility[idx],
                   record.tracks.valid[idx])
    qs = sample_queries(sub, "train", count=cfg.tracks_per_batch, rng=rng)
    tracks = [q.track for q in qs]
    q = np.array([[q.t, q.x, q.y] for q in qs], dtype=np.float64).reshape(-1, 3)
    frames = torch.from_numpy(np.ascontiguousarray(record.clip.frames[idx]))
    return Batch(frames, q, sub.select(tracks), stride, record.name)


def compute_losses(model: LanguageTracker, batch: Batch, cfg: TrainConfig):
    """Forward pass and both objectives. Returns (total tensor, LossReport)."""
    dtype = model.dtype
    feats = model.features(batch.frames.to(dtype))
    res = model.track_features(feats, batch.queries)
    gt_pos = torch.as_tensor(batch.gt.positions, dtype=dtype)
    gt_vis = torch.as_tensor(batch.gt.visibility > 0.5, dtype=dtype)
    gt_valid = torch.as_tensor(batch.gt.valid)
    track = feats.new_zeros(())
    vis_terms = []
    windows = 0
    iters = model.cfg.refine_iters
    for idx, out in res.groups:
        idx_t = torch.as_tensor(idx)
        g_pos = gt_pos[:, idx_t]
        scored = gt_valid[:, idx_t].clone()
        scored[: out.query_frame] = False
        w = torch.where(gt_vis[:, idx_t] > 0, 1.0, cfg.occluded_weight).to(dtype) * scored.to(dtype)
        spans = [(win.begin, win.end) for win in out.windows]
        windows += len(spans)
        for i in range(iters):
            gamma = cfg.iter_gamma ** (iters - 1 - i)
            preds = [win.iterations[i] for win in out.windows]
            track = track + gamma * track_regression_loss(preds, g_pos, w, spans)
        for win in out.windows:
            vis_terms.append((win.vis_logits, gt_vis[win.begin:win.end, idx_t],
                              scored[win.begin:win.end]))
    if vis_terms:
        logits = torch.cat([v[0].reshape(-1) for v in vis_terms])
        target = torch.cat([v[1].reshape(-1) for v in vis_terms])
        mask = torch.cat([v[2].reshape(-1) for v in vis_terms])
        vis = visibility_loss(logits, target, mask)
    else:
        vis = feats.new_zeros(())
    total = track + cfg.lambda_vis * vis
    report = LossReport(float(track.detach()), float(vis.detach()), float(total.detach()), windows)
    return total, report


def param_groups_with_names(model):
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def make_optimizer(model: LanguageTracker, cfg: TrainConfig):
    params = [p for _, p in param_groups_with_names(model)]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    warm = max(cfg.warmup_steps, 0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: 1.0 if warm == 0 else min(1.0, (step + 1) / warm))
    return opt, sched


def train_step(model: LanguageTracker, optimizer, batch, cfg: TrainConfig,
               scheduler=None) -> LossReport:
    """One decoupled-weight-decay update of every trainable parameter.

    ``batch`` may be a single Batch or a list of them; losses are averaged over clips.
    """
    batches = batch if isinstance(batch, (list, tuple)) else [batch]
    model.train()
    optimizer.zero_grad(set_to_none=True)
    reports = []
    for b in batches:
        total, rep = compute_losses(model, b, cfg)
        if not math.isfinite(rep.total):
            optimizer.zero_grad(set_to_none=True)
            raise NumericError("non-finite loss", where=b.record)
        (total / len(batches)).backward()
        reports.append(rep)
    for name, p in param_groups_with_names(model):
        if p.grad is not None and not torch.isfinite(p.grad).all():
            optimizer.zero_grad(set_to_none=True)
            raise NumericError("non-finite gradient; step aborted", where=name)
    if cfg.grad_clip and cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    if len(reports) == 1:
        return reports[0]
    mean = lambda k: float(np.mean([getattr(r, k) for r in reports]))
    return LossReport(mean("track_loss"), mean("visibility_loss"), mean("total"),
                      sum(r.window_count for r in reports))


def state_hash(state: dict) -> str:
    """Content hash over named arrays (order independent of insertion)."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    def __init__(self, run: RunConfig, model: LanguageTracker = None):
        self.run = run.validate()
        self.cfg = run.train
        self.model = model if model is not None else build_model(run.model)
        self.optimizer, self.scheduler = make_optimizer(self.model, self.cfg)
        self.iteration = 0
        self.rng = np.random.default_rng(self.cfg.seed)
        self.history: list = []

    def sample_batch(self, records) -> Batch:
        rec = records[int(self.rng.integers(0, len(records)))]
        return make_batch(rec, self.cfg, self.rng)

    def step(self, records) -> LossReport:
        batches = [self.sample_batch(records) for _ in range(self.cfg.batch_size)]
        rep = train_step(self.model, self.optimizer, batches, self.cfg, self.scheduler)
        self.iteration += 1
        self.history.append(rep)
        return rep

    def fit(self, records, steps: int = None, callback=None):
        steps = self.cfg.iterations if steps is None else steps
        for _ in range(steps):
            rep = self.step(records)
            if callback is not None:
                callback(self.iteration, rep)
            elif self.cfg.log_every and self.iteration % self.cfg.log_every == 0:
                log.info("iter %d total %.4f track %.4f vis %.4f", self.iteration,
                         rep.total, rep.track_loss, rep.visibility_loss)
        return self.history

    # ------------------------------------------------------------ checkpoints

    def save(self, path) -> str:
        return save_checkpoint(path, self.model, self.run, self.optimizer, self.iteration,
                               self.scheduler)

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        ck = read_checkpoint(path)
        run = apply_overrides(RunConfig(), ck["config"])
        model = build_model(run.model)
        model.load_state_dict(ck["model"])
        tr = cls(run, model)
        if ck.get("optimizer"):
            tr.optimizer.load_state_dict(ck["optimizer"])
        if ck.get("scheduler"):
            tr.scheduler.load_state_dict(ck["scheduler"])
        tr.iteration = ck["iteration"]
        return tr


def save_checkpoint(path, model, run: RunConfig, optimizer=None, iteration: int = 0,
                    scheduler=None) -> str:
    """Write-then-rename; returns the content hash of the model parameters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": state,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "config": run.to_flat(),
        "iteration": int(iteration),
        "content_hash": state_hash(state),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        torch.save(payload, fh)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return payload["content_hash"]


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"checkpoint not found: {path}")
    ck = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=False)
    if not isinstance(ck, dict) or ck.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if ck.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {ck.get('version')}")
    return ck


def load_model(path) -> tuple:
    """(model in eval mode, RunConfig, content hash)."""
    ck = read_checkpoint(path)
    run = apply_overrides(RunConfig(), ck["config"])
    model = build_model(run.model)
    model.load_state_dict(ck["model"])
    model.eval()
    return model, run, ck["content_hash"]
