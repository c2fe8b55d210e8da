"""Synthetic clips with exact ground-truth tracks, the on-disk dataset format, and query sampling.

Dataset layout::

    <root>/<video>/frames/000000.png ...
    <root>/<video>/tracks.txt

``tracks.txt`` starts with a header (``resolution H W``, ``frames T``,
``tracks N`` plus optional ``name``/``source`` lines) followed by one row per
(track, frame): ``t n x y visible valid``. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IntegrityError, ParseError
from .tracks import DatasetRecord, QueryPoint, TrackSet, VideoClip

log = logging.getLogger(__name__)

MOTIONS = ("constant_velocity", "sinusoidal", "bounce")
FORMAT_TAG = "# langtrack tracks v1"


@dataclass
class SynthConfig:
    n_sprites: int = 3
    n_frames: int = 24
    resolution: tuple = (96, 128)  # (H, W)
    motion: tuple = ("constant_velocity", "bounce")
    occluder_density: float = 0.0  # occluders per sprite
    texture_seed: int = 0
    points_per_sprite: int = 8
    sprite_size: tuple = (16, 28)
    max_speed: int = 3

    def validate(self) -> "SynthConfig":
        h, w = self.resolution
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if h < 8 or w < 8:
            raise ConfigError("resolution must be at least 8x8")
        if self.sprite_size[0] < 4 or self.sprite_size[1] >= min(h, w):
            raise ConfigError(f"sprite sizes {self.sprite_size} do not fit {self.resolution}")
        for m in self.motion:
            if m not in MOTIONS:
                raise ConfigError(f"unknown motion model {m!r}")
        if self.n_sprites < 1 or self.points_per_sprite < 1:
            raise ConfigError("need at least one sprite and one point per sprite")
        return self


@dataclass
class Sprite:
    """Textured rectangle; ``path`` holds the integer top-left (x, y) per frame."""

    texture: np.ndarray  # (h, w, 3) float in [0, 1]
    path: np.ndarray  # (T, 2) int
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))

    @property
    def size(self):
        return self.texture.shape[:2]


def quantize(frames: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels, returned as float32 so PNG storage is lossless."""
    u8 = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    return u8_to_float(u8)


def u8_to_float(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255.0)


def random_texture(rng: np.random.Generator, h: int, w: int, block: int = 3,
                   lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(h // block + 2, w // block + 2, 3))
    tex = np.repeat(np.repeat(coarse, block, 0), block, 1)[:h, :w]
    tex = tex + rng.normal(0, 0.04, size=tex.shape)
    return np.clip(tex, 0, 1)


def render(background: np.ndarray, layers: list, num_frames: int) -> np.ndarray:
    """Paint layers back to front on a static background; returns (T, H, W, 3) float."""
    h, w = background.shape[:2]
    frames = np.repeat(background[None], num_frames, axis=0).astype(np.float64)
    for sp in layers:
        sh, sw = sp.size
        for t in range(num_frames):
            x0, y0 = (int(v) for v in sp.path[t])
            xa, ya = max(x0, 0), max(y0, 0)
            xb, yb = min(x0 + sw, w), min(y0 + sh, h)
            if xa >= xb or ya >= yb:
                continue
            frames[t, ya:yb, xa:xb] = sp.texture[ya - y0:yb - y0, xa - x0:xb - x0]
    return frames


def covered(sp: Sprite, t: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    sh, sw = sp.size
    x0, y0 = sp.path[t]
    return (x >= x0) & (x < x0 + sw) & (y >= y0) & (y < y0 + sh)


def tracks_from_layers(layers: list, num_frames: int, resolution: tuple) -> TrackSet:
    """Anchor trajectories of every layer; a point is occluded when a later layer covers it."""
    h, w = resolution
    pos, vis = [], []
    for k, sp in enumerate(layers):
        for ax, ay in sp.anchors:
            p = sp.path[:num_frames] + np.array([ax, ay])
            v = np.ones(num_frames, dtype=bool)
            for t in range(num_frames):
                x, y = p[t]
                inside = 0 <= x < w and 0 <= y < h
                occl = any(covered(other, t, x, y) for other in layers[k + 1:])
                v[t] = inside and not occl
            pos.append(p)
            vis.append(v)
    if not pos:
        return TrackSet.empty(num_frames)
    positions = np.stack(pos, axis=1).astype(np.float64)
    visibility = np.stack(vis, axis=1).astype(np.float64)
    return TrackSet(positions, visibility, np.ones(visibility.shape, dtype=bool))


def motion_path(rng, motion: str, num_frames: int, size: tuple, resolution: tuple,
                max_speed: int) -> np.ndarray:
    h, w = resolution
    sh, sw = size
    span = np.array([w - sw, h - sh])
    t = np.arange(num_frames)
    if motion == "constant_velocity":
        for _ in range(100):
            v = rng.integers(-max_speed, max_speed + 1, size=2)
            if not v.any():
                continue
            travel = np.abs(v) * (num_frames - 1)
            if np.all(travel <= span):
                lo = np.where(v < 0, travel, 0)
                hi = np.where(v < 0, span, span - travel)
                start = np.array([rng.integers(lo[i], hi[i] + 1) for i in range(2)])
                return start + v * t[:, None]
        v = np.zeros(2, dtype=int)
        return np.repeat(rng.integers(0, span + 1)[None], num_frames, axis=0) + v
    if motion == "bounce":
        v = rng.integers(1, max_speed + 1, size=2) * rng.choice([-1, 1], size=2)
        p = rng.integers(0, span + 1)
        out = []
        for _ in t:
            out.append(p.copy())
            p = p + v
            for i in range(2):
                if p[i] < 0:
                    p[i], v[i] = -p[i], -v[i]
                elif p[i] > span[i]:
                    p[i], v[i] = 2 * span[i] - p[i], -v[i]
                p[i] = min(max(p[i], 0), span[i])
        return np.array(out)
    # sinusoidal
    amp = rng.uniform(0.2, 0.45, size=2) * span
    centre = span / 2.0
    period = rng.uniform(num_frames / 2, num_frames * 1.5, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    p = centre + amp * np.sin(2 * np.pi * t[:, None] / period + phase)
    return np.clip(np.rint(p), 0, span).astype(int)


def generate_clip(cfg: SynthConfig, seed: int, name: str = None) -> DatasetRecord:
    """Deterministic synthetic clip with exact per-point trajectories and occlusion flags."""
    cfg.validate()
    rng = np.random.default_rng([seed, cfg.texture_seed])
    h, w = cfg.resolution
    background = random_texture(rng, h, w, block=8, lo=0.1, hi=0.6)
    layers = []
    lo, hi = cfg.sprite_size
    for k in range(cfg.n_sprites):
        sh, sw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        motion = cfg.motion[k % len(cfg.motion)]
        path = motion_path(rng, motion, cfg.n_frames, (sh, sw), cfg.resolution, cfg.max_speed)
        m = 2
        ax = rng.integers(m, sw - m, size=cfg.points_per_sprite)
        ay = rng.integers(m, sh - m, size=cfg.points_per_sprite)
        tex = random_texture(rng, sh, sw, block=3)
        layers.append(Sprite(tex, path.astype(int), np.stack([ax, ay], axis=1)))
    n_occ = int(round(cfg.occluder_density * cfg.n_sprites))
    for _ in range(n_occ):
        oh = int(rng.integers(h // 6, h // 3 + 1))
        ow = int(rng.integers(6, 14))
        start = np.array([rng.integers(0, w - ow + 1), rng.integers(0, h - oh + 1)])
        vx = int(rng.choice([-1, 1]))
        path = start + np.stack([vx * np.arange(cfg.n_frames), np.zeros(cfg.n_frames, int)], 1)
        tex = np.full((oh, ow, 3), rng.uniform(0.0, 1.0, size=3))
        layers.append(Sprite(tex, path))
    frames = quantize(render(background, layers, cfg.n_frames))
    tracks = tracks_from_layers(layers, cfg.n_frames, cfg.resolution)
    return DatasetRecord(VideoClip(frames), tracks, name or f"synth_{seed:05d}", "synthetic").check()


def generate_dataset(cfg: SynthConfig, n_clips: int, seed: int = 0) -> list:
    return [generate_clip(cfg, seed * 100003 + i, name=f"clip_{i:03d}") for i in range(n_clips)]


# ---------------------------------------------------------------- file format

def _fmt(v: float) -> str:
    if float(v).is_integer() and np.isfinite(v):
        return str(int(v)) if abs(v) < 2 ** 53 else repr(float(v))
    return repr(float(v))


def write_tracks_text(record: DatasetRecord) -> str:
    tr = record.tracks
    h, w = record.resolution
    lines = [FORMAT_TAG, f"name {record.name}", f"source {record.source}",
             f"resolution {h} {w}", f"frames {tr.num_frames}", f"tracks {tr.num_tracks}",
             "# t n x y visible valid"]
    for n in range(tr.num_tracks):
        for t in range(tr.num_frames):
            x, y = tr.positions[t, n]
            lines.append(f"{t} {n} {_fmt(x)} {_fmt(y)} {_fmt(tr.visibility[t, n])} "
                         f"{int(tr.valid[t, n])}")
    return "\n".join(lines) + "\n"


def parse_tracks_text(text: str, path=None) -> dict:
    header = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        key = parts[0]
        if key in ("name", "source"):
            header[key] = line[len(key):].strip()
            continue
        if key in ("resolution", "frames", "tracks"):
            want = 2 if key == "resolution" else 1
            if len(parts) != want + 1:
                raise ParseError(f"expected {want} value(s)", path, lineno, key)
            try:
                vals = [int(p) for p in parts[1:]]
            except ValueError:
                raise ParseError("expected integer", path, lineno, key) from None
            header[key] = vals if key == "resolution" else vals[0]
            continue
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, got {len(parts)}", path, lineno)
        names = ("t", "n", "x", "y", "visible", "valid")
        row = []
        for i, (nm, p) in enumerate(zip(names, parts)):
            try:
                row.append(int(p) if nm in ("t", "n", "valid") else float(p))
            except ValueError:
                raise ParseError(f"bad value {p!r}", path, lineno, nm) from None
        rows.append((lineno, row))
    for key in ("resolution", "frames", "tracks"):
        if key not in header:
            raise ParseError(f"missing header line {key!r}", path)
    t_n, n_n = header["frames"], header["tracks"]
    pos = np.full((t_n, n_n, 2), np.nan)
    vis = np.zeros((t_n, n_n))
    valid = np.zeros((t_n, n_n), dtype=bool)
    seen = np.zeros((t_n, n_n), dtype=bool)
    for lineno, (t, n, x, y, v, ok) in rows:
        if not (0 <= t < t_n):
            raise ParseError(f"frame index {t} outside [0, {t_n})", path, lineno, "t")
        if not (0 <= n < n_n):
            raise ParseError(f"track index {n} outside [0, {n_n})", path, lineno, "n")
        if ok not in (0, 1):
            raise ParseError("valid must be 0 or 1", path, lineno, "valid")
        if seen[t, n]:
            raise ParseError(f"duplicate entry for t={t} n={n}", path, lineno)
        seen[t, n] = True
        pos[t, n] = (x, y)
        vis[t, n] = v
        valid[t, n] = bool(ok)
    if not seen.all():
        raise IntegrityError(f"{path}: {int((~seen).sum())} (track, frame) entries missing")
    bad = valid & (vis > 0.5) & ~np.isfinite(pos).all(-1)
    if bad.any():
        t, n = (int(i) for i in np.argwhere(bad)[0])
        raise IntegrityError(f"{path}: non-finite position on visible frame t={t} n={n}")
    header["tracks_set"] = TrackSet(pos, vis, valid)
    return header


def save_record(record: DatasetRecord, root) -> Path:
    vdir = Path(root) / record.name
    fdir = vdir / "frames"
    fdir.mkdir(parents=True, exist_ok=True)
    for old in fdir.glob("*.png"):
        old.unlink()
    u8 = np.clip(np.rint(record.clip.frames * 255.0), 0, 255).astype(np.uint8)
    for t, frame in enumerate(u8):
        Image.fromarray(frame).save(fdir / f"{t:06d}.png")
    (vdir / "tracks.txt").write_text(write_tracks_text(record))
    return vdir


def save_records(records, root) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    for rec in records:
        save_record(rec, root)


def load_record(vdir) -> DatasetRecord:
    vdir = Path(vdir)
    tpath = vdir / "tracks.txt"
    if not tpath.is_file():
        raise IntegrityError(f"missing annotation file {tpath}")
    header = parse_tracks_text(tpath.read_text(), tpath)
    files = sorted((vdir / "frames").glob("*.png"))
    if len(files) != header["frames"]:
        raise IntegrityError(
            f"{vdir}: {len(files)} frame images but annotation declares {header['frames']}")
    frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
    h, w = header["resolution"]
    if frames.shape[1:3] != (h, w):
        raise IntegrityError(f"{vdir}: frames are {frames.shape[1:3]}, header says {(h, w)}")
    rec = DatasetRecord(VideoClip(u8_to_float(frames)), header["tracks_set"],
                        header.get("name", vdir.name), header.get("source", "unknown"))
    return rec.check()


def load_records(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise IntegrityError(f"dataset directory not found: {root}")
    return [load_record(d) for d in sorted(root.iterdir()) if (d / "tracks.txt").exists()]


def rescale_record(record: DatasetRecord, size=(256, 256)) -> DatasetRecord:
    """Resize frames to ``size = (H, W)`` and scale coordinates by ``(W'/W, H'/H)``."""
    h, w = record.resolution
    nh, nw = size
    u8 = np.clip(np.rint(record.clip.frames * 255.0), 0, 255).astype(np.uint8)
    frames = np.stack([np.asarray(Image.fromarray(f).resize((nw, nh), Image.BILINEAR))
                       for f in u8])
    tracks = record.tracks.scaled(nw / w, nh / h)
    return DatasetRecord(VideoClip(u8_to_float(frames)), tracks, record.name, record.source)


# ---------------------------------------------------------------- queries

QUERY_STRIDE = 5


def sample_queries(gt: TrackSet, protocol: str, count: int = None, seed: int = 0,
                   rng: np.random.Generator = None) -> list:
    """Query points per protocol; each carries the index of the track it belongs to.

    ``first``: earliest visible frame of every track. ``strided``: every visible
    frame among 0, 5, 10, ... ``train``: ``count`` random tracks visible in the
    first or middle frame, queried at that frame.
    """
    vis = (gt.visibility > 0.5) & gt.valid
    num_frames, n = vis.shape
    out = []
    if protocol == "first":
        for k in range(n):
            ts = np.nonzero(vis[:, k])[0]
            if ts.size == 0:
                log.info("track %d never visible; excluded", k)
                continue
            t = int(ts[0])
            out.append(QueryPoint(t, *gt.positions[t, k], track=k))
    elif protocol == "strided":
        for k in range(n):
            ts = [t for t in range(0, num_frames, QUERY_STRIDE) if vis[t, k]]
            if not ts:
                log.info("track %d not visible on any strided frame; excluded", k)
            out.extend(QueryPoint(t, *gt.positions[t, k], track=k) for t in ts)
    elif protocol == "train":
        mid = num_frames // 2
        ok = vis[0] | vis[mid]
        cand = np.nonzero(ok)[0]
        rng = rng if rng is not None else np.random.default_rng(seed)
        if count is not None and count < cand.size:
            cand = np.sort(rng.choice(cand, size=count, replace=False))
        for k in cand:
            t = 0 if vis[0, k] else mid
            out.append(QueryPoint(t, *gt.positions[t, k], track=int(k)))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return [QueryPoint(int(q.t), float(q.x), float(q.y), q.track) for q in out]
