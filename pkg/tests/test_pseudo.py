import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bleedtrack.pseudo import (SPAN, DenseLabels, KalmanConfig, LKTracker, MatchConfig, PseudoPointSet,
                               Trajectory, build_samples, cv_model, dense_labels, kalman_smooth,
                               load_dense_labels, match_region, propagate_trajectory, save_dense_labels,
                               with_fallback)
from bleedtrack.synth import SceneConfig, generate_scene, sparse_labels
from bleedtrack.video import AnnotatedPoint, Clip, ClipLabels

from reference_kalman import random_track, reference_smoother


def _texture(seed=0, size=(96, 128)):
    rng = np.random.default_rng(seed)
    img = cv2.GaussianBlur(rng.random((*size, 3)).astype(np.float32), (0, 0), 1.2)
    return cv2.normalize(img, None, 0, 255, cv2.NORM_MINMAX).astype(np.uint8)


def _shift(img, dx, dy):
    M = np.float32([[1, 0, dx], [0, 1, dy]])
    return cv2.warpAffine(img, M, img.shape[1::-1], borderMode=cv2.BORDER_REFLECT)


def _clip(frames, cid="c"):
    return Clip.from_images(cid, list(frames))


# --------------------------------------------------------------------------- matching


def test_match_identical_frames_zero_displacement():
    img = _texture()
    clip = _clip([img, img])
    pts = match_region(clip[0], clip[1], AnnotatedPoint(0, 64.0, 48.0))
    assert len(pts) >= 10
    assert np.allclose(pts.sources, pts.targets, atol=1e-3)


def test_match_translation():
    img = _texture()
    clip = _clip([img, _shift(img, 5, 0)])
    pts = match_region(clip[0], clip[1], AnnotatedPoint(0, 64.0, 48.0), anchor_t30=AnnotatedPoint(1, 69.0, 48.0))
    d = pts.targets - pts.sources
    assert len(pts) >= 10
    assert np.all(np.abs(d - [5, 0]) <= 1.0)


def test_match_respects_disc_and_threshold():
    img = _texture(1)
    clip = _clip([img, _shift(img, 2, 1)])
    cfg = MatchConfig(radius=20.0, min_confidence=0.9)
    pts = match_region(clip[0], clip[1], AnnotatedPoint(0, 60.0, 40.0), cfg)
    assert all(np.hypot(x - 60, y - 40) <= 20 for x, y in pts.sources)
    assert all(c > 0.9 for _, _, c in pts.pairs)


def test_match_on_scene(scene):
    clip, gt = scene
    t = gt.onset_frame
    a = AnnotatedPoint(t, *gt.source_track[t])
    b = AnnotatedPoint(t + SPAN, *gt.source_track[t + SPAN])
    pts = match_region(clip[t], clip[t + SPAN], a, anchor_t30=b)
    assert len(pts) >= 10
    oracle = np.array([gt.point_track(t, p)[t + SPAN] for p in pts.sources])
    assert np.median(np.linalg.norm(pts.targets - oracle, axis=1)) <= 2.0


def test_orb_matcher_runs():
    img = _texture(2)
    clip = _clip([img, _shift(img, 3, 0)])
    pts = match_region(clip[0], clip[1], AnnotatedPoint(0, 64.0, 48.0), MatchConfig(matcher="orb", min_confidence=0.5))
    assert isinstance(pts, PseudoPointSet)


def test_match_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(radius=0)
    with pytest.raises(ValueError):
        MatchConfig(min_confidence=1.0)
    with pytest.raises(ValueError):
        MatchConfig(matcher="sift")


def test_point_set_invariants():
    with pytest.raises(ValueError):
        PseudoPointSet((0, 0), 5.0, 0.7, (((10.0, 0.0), (10.0, 0.0), 0.9),))
    with pytest.raises(ValueError):
        PseudoPointSet((0, 0), 5.0, 0.7, (((1.0, 0.0), (1.0, 0.0), 0.7),))


def test_fallback_uses_anchor():
    empty = PseudoPointSet((10.0, 10.0), 50.0, 0.7)
    fb = with_fallback(empty, AnnotatedPoint(30, 12.0, 11.0))
    assert fb.fallback and fb.pairs == (((10.0, 10.0), (12.0, 11.0), 1.0),)
    assert with_fallback(empty, None) is empty


# --------------------------------------------------------------------------- trajectories


def test_static_clip_constant_trajectories():
    img = _texture()
    clip = _clip([img] * (SPAN + 1))
    pts = match_region(clip[0], clip[SPAN], AnnotatedPoint(0, 64.0, 48.0))
    trajs = propagate_trajectory(pts, clip, LKTracker(), 0)
    assert trajs and all(len(tr.points) == SPAN + 1 for tr in trajs)
    for tr in trajs:
        assert np.allclose(tr.points, tr.points[0], atol=1e-2)


def test_trajectories_follow_scene(scene):
    clip, gt = scene
    t = gt.onset_frame
    a = AnnotatedPoint(t, *gt.source_track[t])
    b = AnnotatedPoint(t + SPAN, *gt.source_track[t + SPAN])
    trajs = propagate_trajectory(match_region(clip[t], clip[t + SPAN], a, anchor_t30=b), clip, LKTracker(), t)
    close = [np.max(np.linalg.norm(tr.points - gt.point_track(t, tr.points[0])[t:t + SPAN + 1], axis=1)) <= 3.0
             for tr in trajs]
    assert len(close) >= 5 and np.mean(close) >= 0.8


def test_trajectory_past_clip_end():
    img = _texture()
    clip = _clip([img] * 10)
    with pytest.raises(ValueError):
        propagate_trajectory(PseudoPointSet((5, 5), 50, 0.7), clip, LKTracker(), 0)


def test_trajectory_shape_checked():
    with pytest.raises(ValueError):
        Trajectory(0, np.zeros((30, 2)))


# --------------------------------------------------------------------------- kalman


def test_kalman_matches_reference():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        z, anchor = random_track(rng)
        cfg = KalmanConfig(q=float(rng.uniform(0.1, 3)), r=float(rng.uniform(0.5, 10)),
                           r_anchor=float(rng.uniform(0.01, 2)))
        got = kalman_smooth(Trajectory(0, z, endpoint_anchor=tuple(anchor)), cfg).points
        worst = max(worst, float(np.abs(got - reference_smoother(z, anchor, cfg)).max()))
    assert worst < 1e-6


def test_kalman_constant_trajectory_unchanged():
    z = np.tile([40.0, 30.0], (SPAN + 1, 1))
    sm = kalman_smooth(Trajectory(0, z, endpoint_anchor=(40.0, 30.0)))
    assert np.allclose(sm.points, z, atol=1e-9) and sm.smoothed


def test_kalman_zero_terminal_noise_pins_anchor():
    z, anchor = random_track(np.random.default_rng(1))
    sm = kalman_smooth(Trajectory(0, z, endpoint_anchor=tuple(anchor)), KalmanConfig(r_anchor=0.0))
    assert np.array_equal(sm.points[-1], anchor)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 100_000), r_anchor=st.floats(1e-3, 50))
def test_kalman_final_point_between_raw_and_anchor(seed, r_anchor):
    z, anchor = random_track(np.random.default_rng(seed))
    final = kalman_smooth(Trajectory(0, z, endpoint_anchor=tuple(anchor)), KalmanConfig(r_anchor=r_anchor)).points[-1]
    d = anchor - z[-1]
    lam = float(np.dot(final - z[-1], d) / np.dot(d, d))
    assert -1e-9 <= lam <= 1 + 1e-9
    assert np.allclose(final, z[-1] + lam * d, atol=1e-7)
    # smoothing never moves the endpoint away from its anchor
    assert np.linalg.norm(final - anchor) <= np.linalg.norm(z[-1] - anchor) + 1e-9


def test_kalman_rejects_bad_input():
    z = np.zeros((SPAN + 1, 2))
    with pytest.raises(ValueError):
        kalman_smooth(Trajectory(0, z))
    z[3] = np.nan
    with pytest.raises(ValueError):
        kalman_smooth(Trajectory(0, z, endpoint_anchor=(0.0, 0.0)))


def test_cv_model():
    F, Q = cv_model(2.0)
    assert F[0, 2] == F[1, 3] == 1 and np.allclose(Q, Q.T)
    assert Q[0, 0] == pytest.approx(2 / 3) and Q[2, 2] == 2.0


# --------------------------------------------------------------------------- dense labels and samples


@pytest.fixture(scope="module")
def long_scene():
    clip, gt = generate_scene(SceneConfig(length=100, onset_frame=10, seed=5), "long")
    return clip, gt, sparse_labels("long", gt)


@pytest.fixture(scope="module")
def dense(long_scene):
    clip, gt, labels = long_scene
    return dense_labels(clip, labels)


def test_dense_labels_cover_spans(long_scene, dense):
    clip, gt, labels = long_scene
    src = dense.source_track()
    human = [p.frame_index for p in labels.points]
    assert len(dense.spans) == len(human) - 1
    for a in human[:-1]:
        assert all(t in src for t in range(a, a + SPAN + 1))
    err = [np.hypot(*(np.array(src[t]) - gt.source_track[t])) for t in src]
    assert np.median(err) <= 3.0
    for s in dense.spans:
        assert s["source_residual_smoothed"] <= s["source_residual_raw"] + 1e-9
        assert all(b <= a + 1e-9 for a, b in zip(s["endpoint_residual_raw"], s["endpoint_residual_smoothed"]))


def test_dense_labels_keep_human_points(long_scene, dense):
    _, _, labels = long_scene
    for p in labels.points:
        srcs = [q for q in dense.frames[p.frame_index] if q.track_id == "source"]
        assert len(srcs) == 1 and srcs[0].provenance == "human" and (srcs[0].x, srcs[0].y) == p.xy


def test_dense_labels_round_trip(tmp_path, dense):
    save_dense_labels(dense, tmp_path)
    back = load_dense_labels(tmp_path)
    assert back.to_json() == dense.to_json()
    assert json.loads((tmp_path / "pseudo_labels.json").read_text())["clip_id"] == "long"


def test_dense_labels_skip_irregular_spans(long_scene):
    clip, gt, _ = long_scene
    pts = [AnnotatedPoint(t, *gt.source_track[t]) for t in (10, 35)]
    out = dense_labels(clip, ClipLabels("long", 10, tuple(pts)))
    assert out.spans == []


def test_build_samples(long_scene, dense):
    clip, _, labels = long_scene
    short = build_samples(clip, labels, dense, "short", seed=0)
    assert short and all(len(s) == SPAN + 1 and s.kind == "short" for s in short)
    hybrid = build_samples(clip, labels, dense, "hybrid", seed=3)
    again = build_samples(clip, labels, dense, "hybrid", seed=3)
    assert [(s.kind, s.start, s.stop) for s in hybrid] == [(s.kind, s.start, s.stop) for s in again]
    longs = [s for s in hybrid if s.kind == "long"]
    assert longs and all(SPAN + 1 <= len(s) <= 731 for s in longs)
    for s in short:
        assert s.source.shape == (SPAN + 1, 2) and s.points.shape[1:] == (SPAN + 1, 2)
