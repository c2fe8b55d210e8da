import numpy as np
import pytest
import torch

from langtrack.config import ModelConfig
from langtrack.errors import NumericError
from langtrack.model import build_model
from langtrack.tracker import (WindowTracker, build_correlation, build_correlation_naive,
                               build_pyramid, neighborhood, pixel_to_grid, query_features,
                               sample_grid, window_schedule, UpdateNet)
from langtrack.tracks import QueryPoint, TrackSet, VideoClip

from conftest import micro_cfg


# ------------------------------------------------------------ windows

def test_single_window():
    assert window_schedule(0, 8, 8, 4) == [(0, 8)]


def test_window_schedule_twenty_frames():
    assert window_schedule(0, 20, 8, 4) == [(0, 8), (4, 12), (8, 16), (12, 20)]


@pytest.mark.parametrize("start,total", [(0, 20), (3, 20), (0, 9), (5, 6), (0, 1), (7, 31)])
def test_window_composition_covers_each_frame_once(start, total):
    owner = {}
    for j, (b, e) in enumerate(window_schedule(start, total, 8, 4)):
        assert e - b <= 8
        for t in range(b, e):
            owner[t] = j  # later window wins
    assert sorted(owner) == list(range(start, total))


def test_window_schedule_empty_when_start_past_end():
    assert window_schedule(5, 5, 8, 4) == []


# ------------------------------------------------------------ correlation

def _onehot_grid(h, w):
    d = h * w
    g = torch.eye(d, dtype=torch.float64).reshape(h, w, d)
    return g


def test_identity_features_peak_at_centre():
    g = _onehot_grid(6, 6).unsqueeze(0)  # (1, 6, 6, 36), stride 1
    pyr = build_pyramid(g, 1)
    xy = torch.tensor([[2.0, 3.0]], dtype=torch.float64)
    q = query_features(pyr, 0, xy, 1)
    vol = build_correlation(pyr, xy.unsqueeze(0), q, 1, 1, (6, 6))
    scores = vol.scores[0, 0, 0]
    centre = scores[4]
    assert centre.item() == pytest.approx(1.0, abs=1e-12)
    assert torch.all(torch.cat([scores[:4], scores[5:]]) < 1.0)


def test_constant_grid_all_scores_equal():
    g = torch.ones(1, 5, 5, 4, dtype=torch.float64) * torch.tensor([1.0, -2.0, 0.5, 3.0],
                                                                    dtype=torch.float64)
    pyr = build_pyramid(g, 2)
    xy = torch.tensor([[1.3, 2.7], [4.0, 0.0]], dtype=torch.float64)
    q = query_features(pyr, 0, torch.tensor([[2.0, 2.0], [2.0, 2.0]], dtype=torch.float64), 1)
    vol = build_correlation(pyr, xy.unsqueeze(0), q, 2, 1, (5, 5))
    assert torch.allclose(vol.scores, torch.ones_like(vol.scores), atol=1e-12, rtol=0)


def test_hand_built_offset_argmax():
    rng = np.random.default_rng(0)
    cells = rng.normal(size=(4, 4, 6))
    target = rng.normal(size=6)
    cells[1, 2] = target  # row 1, column 2
    g = torch.from_numpy(cells).unsqueeze(0)
    pyr = build_pyramid(g, 1)
    q = [torch.from_numpy(target).unsqueeze(0)]
    centre = torch.tensor([[[1.0, 1.0]]], dtype=torch.float64)  # (x=1, y=1)
    vol = build_correlation(pyr, centre, q, 1, 1, (4, 4))
    offs = neighborhood(1, torch.float64)
    best = offs[vol.scores[0, 0, 0].argmax()]
    assert best.tolist() == [1.0, 0.0]
    # exhaustive oracle over the 3x3 neighbourhood
    oracle = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            v = cells[1 + dy, 1 + dx]
            oracle.append(v @ target / np.linalg.norm(v) / np.linalg.norm(target))
    assert np.abs(vol.scores[0, 0, 0].numpy() - np.array(oracle)).max() < 1e-12


def test_fast_correlation_matches_naive_route():
    torch.manual_seed(0)
    feats = torch.randn(3, 7, 9, 5, dtype=torch.float64)
    pyr = build_pyramid(feats, 2)
    qxy = torch.tensor([[3.0, 5.0], [20.0, 10.0], [0.0, 0.0]], dtype=torch.float64)
    q = query_features(pyr, 0, qxy, 4)
    coords = torch.rand(3, 3, 2, dtype=torch.float64) * torch.tensor([40.0, 32.0],
                                                                      dtype=torch.float64) - 2
    fast = build_correlation(pyr, coords, q, 3, 4, (28, 36))
    slow = build_correlation_naive(pyr, coords, q, 3, 4, (28, 36))
    assert torch.allclose(fast.scores, slow.scores, atol=1e-10, rtol=0)
    assert fast.clamped == slow.clamped
    assert fast.scores.abs().max() <= 1.0 + 1e-12


def test_fast_correlation_gradient_matches_naive():
    torch.manual_seed(1)
    feats = torch.randn(2, 6, 6, 4, dtype=torch.float64, requires_grad=True)
    coords = (torch.rand(2, 2, 2, dtype=torch.float64) * 18 + 2).requires_grad_(True)
    qxy = torch.tensor([[5.0, 6.0], [11.0, 9.0]], dtype=torch.float64)
    grads = []
    for fn in (build_correlation, build_correlation_naive):
        pyr = build_pyramid(feats, 2)
        q = query_features(pyr, 0, qxy, 4)
        s = fn(pyr, coords, q, 2, 4, (24, 24)).scores
        w = torch.linspace(-1, 1, s.numel(), dtype=torch.float64).reshape(s.shape)
        grads.append(torch.autograd.grad((s * w).sum(), (feats, coords)))
    for a, b in zip(*grads):
        assert torch.allclose(a, b, atol=1e-9, rtol=0)


def test_out_of_frame_estimates_are_clamped():
    feats = torch.randn(1, 4, 4, 3, dtype=torch.float64)
    pyr = build_pyramid(feats, 1)
    q = query_features(pyr, 0, torch.tensor([[1.0, 1.0]], dtype=torch.float64), 4)
    coords = torch.tensor([[[-50.0, 7.0]]], dtype=torch.float64)
    vol = build_correlation(pyr, coords, q, 1, 4, (16, 16))
    assert vol.clamped == 1
    inside = build_correlation(pyr, torch.tensor([[[0.0, 7.0]]], dtype=torch.float64), q, 1, 4,
                               (16, 16))
    assert torch.equal(vol.scores, inside.scores)


def test_sample_grid_never_leaves_grid():
    fmap = torch.arange(12, dtype=torch.float64).reshape(1, 1, 3, 4)
    pts = torch.tensor([[[-9.0, -9.0], [99.0, 99.0], [1.5, 0.5]]], dtype=torch.float64)
    out = sample_grid(fmap, pts)[0, :, 0]
    assert out.tolist() == [0.0, 11.0, 3.5]


def test_pixel_to_grid_centres():
    xy = torch.tensor([[1.5, 5.5]])
    assert pixel_to_grid(xy, 4).tolist() == [[0.0, 1.0]]
    assert pixel_to_grid(torch.tensor([[3.5, 3.5]]), 4, level=1).tolist() == [[0.0, 0.0]]


# ------------------------------------------------------------ refinement

def _tracker(**kw):
    torch.manual_seed(0)
    return WindowTracker(micro_cfg(**kw)).double()


def _window_inputs(t=4, n=3):
    torch.manual_seed(2)
    feats = torch.randn(t, 4, 4, 8, dtype=torch.float64)
    pyr = build_pyramid(feats, 2)
    qxy = torch.rand(n, 2, dtype=torch.float64) * 15
    q = query_features(pyr, 0, qxy, 4)
    init = qxy.unsqueeze(0).expand(t, n, 2) + torch.randn(t, n, 2, dtype=torch.float64)
    return pyr, init, torch.zeros(t, n, dtype=torch.float64), q, qxy


def test_zero_update_network_keeps_initialisation():
    tr = _tracker()
    tr.update.zero_()
    pyr, init, vis, q, qxy = _window_inputs()
    hist, vlog, _ = tr.refine_window(pyr, init, vis, q, qxy)
    assert len(hist) == 2
    assert torch.equal(hist[-1], init)
    assert torch.equal(vlog, vis)


def test_zero_iterations_return_initialisation():
    tr = _tracker()
    pyr, init, vis, q, qxy = _window_inputs()
    hist, vlog, _ = tr.refine_window(pyr, init, vis, q, qxy, iters=0)
    assert hist == []
    assert torch.equal(vlog, vis)
    out = tr.forward_group(pyr, 0, qxy, iters=0)
    assert torch.equal(out.coords, qxy.unsqueeze(0).expand(4, 3, 2))


def test_non_finite_update_names_iteration():
    tr = _tracker()
    with torch.no_grad():
        tr.update.head.bias[0] = float("nan")
    pyr, init, vis, q, qxy = _window_inputs()
    with pytest.raises(NumericError) as err:
        tr.refine_window(pyr, init, vis, q, qxy)
    assert "iteration 0" in str(err.value.where)


# ------------------------------------------------------------ video tracking

def _clip(t, seed=0, h=16, w=16):
    rng = np.random.default_rng(seed)
    return VideoClip(rng.uniform(size=(t, h, w, 3)).astype(np.float32))


@pytest.fixture(scope="module")
def micro_model():
    return build_model(micro_cfg(window_len=8, window_overlap=4), seed=0, dtype=torch.float64)


def test_eight_frames_one_window(micro_model):
    frames = torch.rand(8, 16, 16, 3, dtype=torch.float64)
    res = micro_model.track_features(micro_model.features(frames), [QueryPoint(0, 5.0, 6.0)])
    (_, out), = res.groups
    assert [(w.begin, w.end) for w in out.windows] == [(0, 8)]
    assert res.coords.shape == (8, 1, 2)


def test_twenty_frames_four_windows(micro_model):
    frames = torch.rand(20, 16, 16, 3, dtype=torch.float64)
    res = micro_model.track_features(micro_model.features(frames), [QueryPoint(0, 5.0, 6.0)])
    (_, out), = res.groups
    assert [(w.begin, w.end) for w in out.windows] == [(0, 8), (4, 12), (8, 16), (12, 20)]
    # final composition: each frame comes from the last window covering it
    for t in range(20):
        last = [w for w in out.windows if w.begin <= t < w.end][-1]
        assert torch.equal(res.coords[t, 0], last.iterations[-1][t - last.begin, 0])


def test_empty_queries(micro_model):
    ts = micro_model.track_video(_clip(5), [])
    assert ts.positions.shape == (5, 0, 2)


def test_forward_marks_earlier_frames_invalid(micro_model):
    ts = micro_model.track_video(_clip(10), [QueryPoint(4, 3.0, 9.0)])
    assert not ts.valid[:4].any() and ts.valid[4:].all()
    assert np.isnan(ts.positions[:4]).all()
    assert ((ts.visibility >= 0) & (ts.visibility <= 1)).all()
    assert ts.positions[4, 0].tolist() == [3.0, 9.0]


def test_backward_is_forward_on_reversed_clip(micro_model):
    clip = _clip(12, seed=3)
    queries = [QueryPoint(7, 4.0, 10.0), QueryPoint(2, 11.0, 1.5)]
    bwd = micro_model.track_video(clip, queries, "backward")
    rq = [QueryPoint(11 - q.t, q.x, q.y) for q in queries]
    fwd = micro_model.track_video(clip.reversed(), rq, "forward")
    assert bwd.equals(fwd.time_reversed())


def test_tracking_deterministic(micro_model):
    clip = _clip(9, seed=4)
    q = [QueryPoint(1, 7.0, 7.0), QueryPoint(0, 2.0, 12.0)]
    assert micro_model.track_video(clip, q).equals(micro_model.track_video(clip, q))


def test_bidirectional_edge_cases(micro_model):
    clip = _clip(10, seed=5)
    q0 = [QueryPoint(0, 6.0, 6.0)]
    bi = micro_model.track_query_bidirectional(clip, q0)
    fwd = micro_model.track_video(clip, q0, "forward")
    assert np.array_equal(bi.positions, fwd.positions)
    assert np.array_equal(bi.visibility, fwd.visibility)
    assert bi.valid.all()

    qe = [QueryPoint(9, 6.0, 6.0)]
    bi = micro_model.track_query_bidirectional(clip, qe)
    bwd = micro_model.track_video(clip, qe, "backward")
    assert np.array_equal(bi.positions[:9], bwd.positions[:9])
    assert np.array_equal(bi.visibility[:9], bwd.visibility[:9])
    fwd = micro_model.track_video(clip, qe, "forward")
    assert np.array_equal(bi.positions[9], fwd.positions[9])


def test_query_frame_outside_clip(micro_model):
    from langtrack.errors import InputError

    with pytest.raises(InputError):
        micro_model.track_video(_clip(4), [QueryPoint(4, 1.0, 1.0)])


def test_clip_resized_to_model_resolution(micro_model):
    clip = _clip(6, seed=6, h=32, w=32)
    ts = micro_model.track_video(clip, [QueryPoint(0, 20.0, 8.0)])
    assert ts.positions[0, 0].tolist() == [20.0, 8.0]
    assert ts.positions.shape == (6, 1, 2)


def test_update_prior_points_at_correlation_peak():
    net = UpdateNet(levels=2, radius=1, hidden=8)
    corr = torch.zeros(1, 1, 2, 9)
    corr[0, 0, 0, 5] = 1.0  # level 0, offset (+1, 0)
    corr[0, 0, 1, 1] = 1.0  # level 1, offset (0, -1) -> (0, -2) at level 0
    with torch.no_grad():
        net.prior_sharpness.fill_(1e3)
        peak = net.peaks(corr)[0, 0]
    assert torch.allclose(peak, torch.tensor([[1.0, 0.0], [0.0, -2.0]]))
    net.zero_()
    out = net(corr, torch.zeros(1, 1, 2), torch.zeros(1, 1))
    assert torch.equal(out, torch.zeros(1, 1, 3))
