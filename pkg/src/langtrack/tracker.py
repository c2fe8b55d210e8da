"""Sliding-window point tracker over per-frame fused features.

Each query is tracked online: windows of ``window_len`` frames start at the query
frame and advance by ``window_len - window_overlap``. Inside a window, positions
are refined iteratively from local cosine-correlation patches sampled around the
current estimate on a small feature pyramid. Overlapping frames are resolved in
favour of the later window.

Coordinates are (x, y) pixels at model input resolution with pixel ``j`` centred
at ``j``. Feature cell ``i`` of a stride-``s`` grid is centred at pixel ``s*i + (s-1)/2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import NumericError


def window_schedule(start: int, num_frames: int, window_len: int, overlap: int) -> list:
    """Half-open ``(begin, end)`` windows covering ``[start, num_frames)``."""
    if start >= num_frames:
        return []
    step = window_len - overlap
    out = []
    s = start
    while True:
        e = min(s + window_len, num_frames)
        out.append((s, e))
        if e >= num_frames:
            return out
        s += step


def pixel_to_grid(xy: torch.Tensor, stride: int, level: int = 0) -> torch.Tensor:
    g = (xy + 0.5) / stride - 0.5
    if level:
        g = (g + 0.5) / (2 ** level) - 0.5
    return g


def build_pyramid(feats: torch.Tensor, levels: int) -> list:
    """feats ``(T, H', W', d)`` -> list of channel-first maps ``(T, d, H_l, W_l)``."""
    x = feats.permute(0, 3, 1, 2)
    pyr = [x]
    for _ in range(1, levels):
        x = F.avg_pool2d(x, 2, ceil_mode=True)
        pyr.append(x)
    return pyr


def sample_grid(fmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear sample ``fmap (B, d, H, W)`` at grid coords ``(B, P, 2)`` -> ``(B, P, d)``.

    Coordinates are clamped into the grid first, so no sample lies outside it.
    """
    h, w = fmap.shape[-2:]
    x = coords[..., 0].clamp(0, w - 1)
    y = coords[..., 1].clamp(0, h - 1)
    gx = 2 * x / max(w - 1, 1) - 1
    gy = 2 * y / max(h - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1).unsqueeze(1)
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[:, :, 0].transpose(1, 2)


def neighborhood(radius: int, dtype=torch.float32) -> torch.Tensor:
    """Offsets ``((2r+1)^2, 2)`` as (dx, dy), row-major over dy then dx."""
    r = torch.arange(-radius, radius + 1, dtype=dtype)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)


@dataclass
class CorrelationVolume:
    scores: torch.Tensor  # (T, N, L, (2r+1)^2) cosine similarities
    radius: int
    clamped: int = 0  # count of centre estimates pulled back inside the frame


def query_features(pyramid: list, t: int, xy: torch.Tensor, stride: int) -> list:
    """Reference feature of each query on every level: list of ``(N, d)``."""
    out = []
    for lvl, fmap in enumerate(pyramid):
        g = pixel_to_grid(xy, stride, lvl)
        out.append(sample_grid(fmap[t:t + 1], g.unsqueeze(0))[0])
    return out


def _pad_br(x: torch.Tensor) -> torch.Tensor:
    """Replicate-pad the last row and column of ``(..., H, W)``."""
    x = torch.cat([x, x[..., -1:, :]], dim=-2)
    return torch.cat([x, x[..., :, -1:]], dim=-1)


def gram_maps(fmap: torch.Tensor) -> dict:
    """Inner products between each cell and its right/down/diagonal neighbours.

    With these, the squared norm of a bilinearly interpolated feature is a
    quadratic form in the four corner weights and needs no d-dimensional gather.
    """
    fp = _pad_br(fmap)
    return {
        "sq": (fp * fp).sum(1),                                   # (T, H+1, W+1)
        "hor": (fp[..., :, :-1] * fp[..., :, 1:]).sum(1),         # (T, H+1, W)
        "ver": (fp[..., :-1, :] * fp[..., 1:, :]).sum(1),         # (T, H, W+1)
        "diag": (fp[..., :-1, :-1] * fp[..., 1:, 1:]).sum(1),     # (T, H, W)
        "anti": (fp[..., :-1, 1:] * fp[..., 1:, :-1]).sum(1),     # (T, H, W)
    }


def _gather(m: torch.Tensor, i: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
    # m: (T, H, W) or (T, N, H, W); i, j: (T, N, P) long
    w = m.shape[-1]
    flat = i * w + j
    if m.dim() == 3:
        t, n, p = flat.shape
        return torch.gather(m.flatten(1), 1, flat.reshape(t, -1)).reshape(t, n, p)
    return torch.gather(m.flatten(2), 2, flat)


class CorrelationSampler:
    """Exact cosine similarity between bilinear feature samples and fixed query features.

    Built once per window (features and queries do not change across refinement
    iterations); each lookup then costs only scalar gathers.
    """

    def __init__(self, pyramid: list, qfeats: list, grams: list = None):
        self.levels = []
        for lvl, fmap in enumerate(pyramid):
            dots = _pad_br(torch.einsum("tdhw,nd->tnhw", fmap, qfeats[lvl]))
            g = grams[lvl] if grams is not None else gram_maps(fmap)
            qn = qfeats[lvl].norm(dim=-1)
            self.levels.append((fmap.shape[-2:], dots, g, qn))

    def lookup(self, centres: list, offsets: torch.Tensor) -> torch.Tensor:
        """centres: per-level grid coords ``(T, N, 2)`` -> scores ``(T, N, L, P)``."""
        out = []
        for (h, w), dots, g, qn in self.levels:
            c = centres[len(out)]
            pts = c.unsqueeze(2) + offsets
            x = pts[..., 0].clamp(0, w - 1)
            y = pts[..., 1].clamp(0, h - 1)
            j = x.detach().floor().long()
            i = y.detach().floor().long()
            ax = x - j
            ay = y - i
            w00, w01 = (1 - ax) * (1 - ay), ax * (1 - ay)
            w10, w11 = (1 - ax) * ay, ax * ay
            dot = (w00 * _gather(dots, i, j) + w01 * _gather(dots, i, j + 1)
                   + w10 * _gather(dots, i + 1, j) + w11 * _gather(dots, i + 1, j + 1))
            sq = g["sq"]
            nsq = (w00 ** 2 * _gather(sq, i, j) + w01 ** 2 * _gather(sq, i, j + 1)
                   + w10 ** 2 * _gather(sq, i + 1, j) + w11 ** 2 * _gather(sq, i + 1, j + 1)
                   + 2 * (w00 * w01 * _gather(g["hor"], i, j)
                          + w10 * w11 * _gather(g["hor"], i + 1, j)
                          + w00 * w10 * _gather(g["ver"], i, j)
                          + w01 * w11 * _gather(g["ver"], i, j + 1)
                          + w00 * w11 * _gather(g["diag"], i, j)
                          + w01 * w10 * _gather(g["anti"], i, j)))
            norm = nsq.clamp_min(1e-16).sqrt()
            denom = (norm * qn[None, :, None]).clamp_min(1e-8)
            out.append(dot / denom)
        return torch.stack(out, dim=2)


def clamp_to_image(coords: torch.Tensor, image_size: tuple):
    h, w = image_size
    cx = coords[..., 0].clamp(0, w - 1)
    cy = coords[..., 1].clamp(0, h - 1)
    clamped = int(((cx != coords[..., 0]) | (cy != coords[..., 1])).sum())
    return torch.stack([cx, cy], dim=-1), clamped


def build_correlation(pyramid: list, coords: torch.Tensor, qfeats: list, radius: int,
                      stride: int, image_size: tuple, sampler: CorrelationSampler = None
                      ) -> CorrelationVolume:
    """Cosine similarity between each query's reference feature and a patch around its estimate.

    pyramid: per-level ``(T, d, H_l, W_l)`` for the frames of ``coords``;
    coords: ``(T, N, 2)`` pixel estimates; qfeats: per-level ``(N, d)``.
    Estimates outside the image are clamped to its border first.
    """
    centre, clamped = clamp_to_image(coords, image_size)
    sampler = sampler or CorrelationSampler(pyramid, qfeats)
    offs = neighborhood(radius, coords.dtype).to(coords.device)
    grids = [pixel_to_grid(centre, stride, lvl) for lvl in range(len(pyramid))]
    return CorrelationVolume(sampler.lookup(grids, offs), radius, clamped)


def build_correlation_naive(pyramid: list, coords: torch.Tensor, qfeats: list, radius: int,
                            stride: int, image_size: tuple) -> CorrelationVolume:
    """Reference route: sample every d-vector with ``grid_sample`` and take its cosine."""
    centre, clamped = clamp_to_image(coords, image_size)
    offs = neighborhood(radius, coords.dtype).to(coords.device)
    t, n = coords.shape[:2]
    levels = []
    for lvl, fmap in enumerate(pyramid):
        g = pixel_to_grid(centre, stride, lvl)
        pts = (g.unsqueeze(2) + offs).reshape(t, -1, 2)
        samples = sample_grid(fmap, pts).reshape(t, n, offs.shape[0], -1)
        ref = qfeats[lvl].unsqueeze(0).unsqueeze(2)
        levels.append(F.cosine_similarity(samples, ref, dim=-1, eps=1e-8))
    return CorrelationVolume(torch.stack(levels, dim=2), radius, clamped)


class TemporalBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv1d(dim, dim, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class UpdateNet(nn.Module):
    """Per-track update: (correlations, displacement, visibility) per frame -> (dx, dy, dlogit).

    The position delta is a learned residual on top of the soft-argmax peak of each
    level's correlation patch, mixed by learned per-level gains. Weights are shared
    across tracks; frames of a track interact through 1-D temporal convolutions.
    """

    def __init__(self, levels: int, radius: int, hidden: int):
        super().__init__()
        p = (2 * radius + 1) ** 2
        self.register_buffer("offsets", neighborhood(radius))
        self.register_buffer("level_scale", 2.0 ** torch.arange(levels, dtype=torch.float32))
        self.prior_gain = nn.Parameter(torch.full((levels,), 1.0 / levels))
        self.prior_sharpness = nn.Parameter(torch.tensor(20.0))
        self.inp = nn.Linear(levels * p + 2 * levels + 3, hidden)
        self.temporal = nn.ModuleList([TemporalBlock(hidden), TemporalBlock(hidden)])
        self.head = nn.Linear(hidden, 3)
        with torch.no_grad():
            self.head.weight.mul_(0.01)
            self.head.bias.zero_()

    def peaks(self, corr: torch.Tensor) -> torch.Tensor:
        """corr ``(T, N, L, P)`` -> soft-argmax offsets ``(T, N, L, 2)`` in level-0 cells."""
        w = torch.softmax(corr * self.prior_sharpness, dim=-1)
        return (w @ self.offsets) * self.level_scale[:, None]

    def forward(self, corr: torch.Tensor, disp: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        # corr: (T, N, L, P); disp: (T, N, 2); vis: (T, N) -> (T, N, 3)
        peak = self.peaks(corr)
        x = torch.cat([corr.flatten(-2), peak.flatten(-2), disp, vis.unsqueeze(-1)], dim=-1)
        h = self.inp(x).permute(1, 2, 0)
        for blk in self.temporal:
            h = blk(h)
        out = self.head(F.gelu(h).permute(2, 0, 1))
        prior = (peak * self.prior_gain[:, None]).sum(-2)
        return torch.cat([out[..., :2] + prior, out[..., 2:]], dim=-1)

    def zero_(self):
        for p in self.parameters():
            nn.init.zeros_(p)
        return self


@dataclass
class WindowResult:
    begin: int
    end: int
    iterations: list  # per iteration coords (Tw, N, 2)
    vis_logits: torch.Tensor  # (Tw, N)


@dataclass
class TrackOutput:
    """Forward tracking of queries sharing one query frame."""

    query_frame: int
    coords: torch.Tensor  # (T, N, 2); frames before query_frame hold the query position
    vis_logits: torch.Tensor  # (T, N)
    windows: list = field(default_factory=list)
    clamped: int = 0


class WindowTracker(nn.Module):
    DISP_SCALE = 16.0

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stride = cfg.stride
        self.image_size = (cfg.image_height, cfg.image_width)
        self.update = UpdateNet(cfg.pyramid_levels, cfg.corr_radius, cfg.update_hidden)

    def refine_window(self, pyramid: list, init: torch.Tensor, vis_init: torch.Tensor,
                      qfeats: list, query_xy: torch.Tensor, anchor_index=None,
                      iters: int = None, grams: list = None):
        """Refine a window of estimates.

        pyramid: per-level ``(Tw, d, H_l, W_l)``; init: ``(Tw, N, 2)``; vis_init: ``(Tw, N)``.
        ``anchor_index`` pins that window frame to the query position (the query frame itself).
        Returns (list of per-iteration coords, final visibility logits, clamp count).
        """
        iters = self.cfg.refine_iters if iters is None else iters
        coords = init
        vis = vis_init
        history = []
        clamped = 0
        sampler = CorrelationSampler(pyramid, qfeats, grams) if iters else None
        for it in range(iters):
            coords = coords.detach()
            corr = build_correlation(pyramid, coords, qfeats, self.cfg.corr_radius,
                                     self.stride, self.image_size, sampler)
            clamped += corr.clamped
            disp = (coords - query_xy.unsqueeze(0)) / self.DISP_SCALE
            delta = self.update(corr.scores, disp, vis)
            if not torch.isfinite(delta).all():
                raise NumericError("non-finite tracker update", where=f"iteration {it}")
            coords = coords + delta[..., :2] * self.stride
            vis = vis + delta[..., 2]
            if anchor_index is not None:
                keep = torch.zeros_like(coords[..., :1], dtype=torch.bool)
                keep[anchor_index] = True
                coords = torch.where(keep, query_xy.unsqueeze(0).expand_as(coords), coords)
            history.append(coords)
        return history, vis, clamped

    def forward_group(self, pyramid: list, t_query: int, query_xy: torch.Tensor,
                      iters: int = None) -> TrackOutput:
        """Track queries that share ``t_query`` forward to the end of the clip."""
        cfg = self.cfg
        num_frames = pyramid[0].shape[0]
        n = query_xy.shape[0]
        qfeats = query_features(pyramid, t_query, query_xy, self.stride)
        grams = [gram_maps(p) for p in pyramid]
        coords = query_xy.unsqueeze(0).expand(num_frames, n, 2).clone()
        vis = query_xy.new_zeros(num_frames, n)
        out = TrackOutput(t_query, coords, vis)
        if n == 0:
            return out
        prev_end = None
        for begin, end in window_schedule(t_query, num_frames, cfg.window_len, cfg.window_overlap):
            init = coords[begin:end]
            vinit = vis[begin:end]
            if prev_end is not None and prev_end < end:
                carry = prev_end - begin
                # extrapolate the overlap's last step at constant velocity
                last = init[carry - 1:carry].detach()
                vel = last - init[carry - 2:carry - 1].detach() if carry > 1 else 0 * last
                ahead = torch.arange(1, end - prev_end + 1, dtype=init.dtype).view(-1, 1, 1)
                fill, _ = clamp_to_image(last + ahead * vel, self.image_size)
                init = torch.cat([init[:carry].detach(), fill], dim=0)
                vfill = vinit[carry - 1:carry].detach().expand(end - prev_end, n)
                vinit = torch.cat([vinit[:carry].detach(), vfill], dim=0)
            anchor = 0 if begin == t_query else None
            hist, vlog, clamped = self.refine_window(
                [p[begin:end] for p in pyramid], init, vinit, qfeats, query_xy, anchor, iters,
                [{k: v[begin:end] for k, v in g.items()} for g in grams])
            final = hist[-1] if hist else init
            out.windows.append(WindowResult(begin, end, hist, vlog))
            out.clamped += clamped
            # later window wins on overlapped frames
            coords = torch.cat([coords[:begin], final, coords[end:]], dim=0)
            vis = torch.cat([vis[:begin], vlog, vis[end:]], dim=0)
            prev_end = end
        out.coords = coords
        out.vis_logits = vis
        return out
