import numpy as np
import pytest
from PIL import Image

from langtrack.data import SynthConfig, generate_clip
from langtrack.tracks import TrackSet
from langtrack.viz import classify, point_overlay, render_trajectories


@pytest.fixture(scope="module")
def record():
    return generate_clip(SynthConfig(n_frames=5), 12)


def test_perfect_prediction_all_circles(record, tmp_path):
    gt = record.tracks
    markers = render_trajectories(record, gt, tmp_path, gt=gt)
    vis = int((gt.visibility > 0.5).sum())
    assert sum(m.kind == "circle" for m in markers) == vis
    assert not any(m.kind == "cross" for m in markers)
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"frame_{t:06d}.png" for t in range(5)]


def test_empty_trackset_copies_frames(record, tmp_path):
    markers = render_trajectories(record, TrackSet.empty(5), tmp_path)
    assert markers == []
    u8 = np.clip(np.rint(record.clip.frames * 255.0), 0, 255).astype(np.uint8)
    for t in range(5):
        assert np.array_equal(np.asarray(Image.open(tmp_path / f"frame_{t:06d}.png")), u8[t])


def test_one_correct_one_wrong(record, tmp_path):
    gt = record.tracks.select([0, 1])
    pos = gt.positions.copy()
    pos[:, 1] += np.array([6.0, 0.0])
    pred = TrackSet(pos, gt.visibility, gt.valid)
    gt.visibility[:] = 1.0
    markers = render_trajectories(record, pred, tmp_path, threshold=4.0, gt=gt, frames=[2])
    assert [(m.track, m.kind) for m in markers] == [(0, "circle"), (1, "cross")]
    img = np.asarray(Image.open(tmp_path / "frame_000002.png"))
    u8 = np.clip(np.rint(record.clip.frames[2] * 255.0), 0, 255).astype(np.uint8)
    assert not np.array_equal(img, u8)


def test_threshold_is_inclusive():
    gt = TrackSet(np.zeros((1, 1, 2)), np.ones((1, 1)))
    assert classify(TrackSet(np.array([[[4.0, 0.0]]]), np.ones((1, 1))), gt, 0, 0, 4.0) == "circle"
    assert classify(TrackSet(np.array([[[4.1, 0.0]]]), np.ones((1, 1))), gt, 0, 0, 4.0) == "cross"


def test_without_ground_truth_no_correctness(record, tmp_path):
    markers = render_trajectories(record, record.tracks, tmp_path, frames=[0])
    assert markers and all(m.kind is None for m in markers)


def test_misaligned_inputs_rejected(record, tmp_path):
    with pytest.raises(ValueError):
        render_trajectories(record, TrackSet.empty(3), tmp_path)
    with pytest.raises(ValueError):
        render_trajectories(record, record.tracks, tmp_path, gt=record.tracks.select([0]))


def test_point_overlay_draws():
    frame = np.zeros((20, 20, 3))
    img = point_overlay(frame, [(5.0, 5.0)], [(5.0, 5.0)], 2.0)
    assert np.asarray(img).any()
