import math

import cv2
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import bleedtrack.onset as onset_mod
from bleedtrack.detect import (SCALES, DetectPseudoConfig, FlowUnavailable, HeatMapHead, MultiScaleFusion,
                               SourceDetector, SpatialEncoder, SpatialLossConfig, detect_point, fuse_multiscale,
                               gaussian_target, heatmap_at_frame, locate_source, propagate_pseudo, red_mask,
                               soft_argmax, spatial_loss, to_frame_coords, to_work_coords)
from bleedtrack.detect_train import DetectTrainConfig, detect_sample, sample_loss
from bleedtrack.synth import SceneConfig, generate_scene, sparse_labels
from bleedtrack.video import AnnotatedPoint, Clip, ClipLabels

from gradcheck import check


def _px(rgb):
    return np.array(rgb, np.uint8).reshape(1, 1, 3)


def test_red_mask_examples():
    assert red_mask(_px((255, 0, 0)))[0, 0] == pytest.approx(1.0)
    assert red_mask(_px((128, 128, 128)))[0, 0] == 0.0
    assert red_mask(_px((200, 100, 50)))[0, 0] == pytest.approx(200 / 255 * 100 / 255, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=3, max_size=3))
def test_red_mask_range_and_gb_symmetry(rgb):
    r, g, b = rgb
    m = red_mask(_px((r, g, b)))[0, 0]
    assert 0 <= m <= 1
    assert m == red_mask(_px((r, b, g)))[0, 0]
    if r == g == b:
        assert m == 0


def test_red_mask_idempotent_on_binary_visualization():
    rng = np.random.default_rng(0)
    b = rng.random((10, 12)) > 0.5
    vis = np.zeros((10, 12, 3), np.uint8)
    vis[..., 0] = 255 * b
    assert np.array_equal(red_mask(vis), b.astype(np.float32))


# --------------------------------------------------------------------------- heat map head and encoder


def test_head_resolution_and_range():
    head = HeatMapHead()
    for h, w in ((16, 16), (48, 64), (17, 23)):
        out = head(torch.rand(2, 3, h, w))
        assert out.shape == (2, h, w)
        assert (out >= 0).all() and (out <= 1).all()


def test_head_deterministic():
    head = HeatMapHead()
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(head(x), head(x))


def test_head_gradient():
    torch.manual_seed(0)
    head = HeatMapHead(width=4).double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 16, 16, dtype=torch.float64)
    assert check(lambda: (head(x) * w).sum(), [x, head.up.weight]) < 1e-3


def test_encoder_stride_8():
    enc = SpatialEncoder(8)
    assert enc(torch.rand(1, 3, 48, 64)).shape == (1, 8, 6, 8)


# --------------------------------------------------------------------------- fusion


def _oracle_fusion(m: MultiScaleFusion, F_h, F_r, F_p):
    """Loop-based re-computation of the four-scale fusion for one unbatched instance."""
    H, W = F_h.shape
    wq = m.q.weight.detach().numpy()[:, 0]
    wk = m.k.weight.detach().numpy()[:, 0]
    Wv, bv = m.v.weight.detach().numpy(), m.v.bias.detach().numpy()
    ws, bs = m.saliency.weight.detach().numpy()[0], m.saliency.bias.detach().numpy()[0]
    total = np.zeros((H, W))
    for s in SCALES:
        h, w = H // s, W // s
        hs = F_h.reshape(h, s, w, s).mean((1, 3)).ravel()
        rs = F_r.reshape(h, s, w, s).mean((1, 3)).ravel()
        ps = cv2.resize(F_p.transpose(1, 2, 0), (w, h), interpolation=cv2.INTER_LINEAR).reshape(h * w, -1) \
            if F_p.shape[1:] != (h, w) else F_p.reshape(F_p.shape[0], -1).T
        L = h * w
        received = np.zeros(L)
        for i in range(L):
            logits = np.array([np.dot(hs[i] * wq, rs[j] * wk) for j in range(L)]) / math.sqrt(m.width)
            e = np.exp(logits - logits.max())
            received += e / e.sum()
        received -= 1.0
        v = ps @ Wv.T + bv
        sal = np.log1p(np.exp(v @ ws + bs))
        heat = (sal * received).reshape(h, w)
        up = heat if s == 1 else cv2.resize(heat, (W, H), interpolation=cv2.INTER_LINEAR)
        total += up
    total = np.maximum(total, 0)
    return total / total.max() if total.max() > 0 else total


def _delta_instance(p=(5, 2), size=8, C=4):
    F_h = np.zeros((size, size))
    F_r = np.zeros((size, size))
    F_h[p[1], p[0]] = 1.0
    F_r[p[1], p[0]] = 1.0
    F_p = np.ones((C, size // 8, size // 8))
    return F_h, F_r, F_p


def test_fusion_delta_peak_matches_oracle():
    torch.manual_seed(0)
    m = MultiScaleFusion(feat_channels=4, width=4).double()
    F_h, F_r, F_p = _delta_instance()
    out = fuse_multiscale(*(torch.as_tensor(a) for a in (F_h, F_r, F_p)), m).detach().numpy()
    ref = _oracle_fusion(m, F_h, F_r, F_p)
    assert np.allclose(out, ref, atol=1e-9)
    assert locate_source(out) == (5, 2) == locate_source(ref)


def test_fusion_argmax_invariant_to_key_scaling():
    torch.manual_seed(0)
    m = MultiScaleFusion(feat_channels=4, width=4).double()
    F_h, F_r, F_p = (torch.as_tensor(a) for a in _delta_instance())
    for scale in (0.5, 2.0, 7.0):
        assert locate_source(fuse_multiscale(F_h, F_r * scale, F_p, m)) == (5, 2)


def test_fusion_zero_key_gives_zero_map():
    m = MultiScaleFusion(4)
    out = fuse_multiscale(torch.rand(8, 8), torch.zeros(8, 8), torch.rand(4, 1, 1), m)
    assert torch.count_nonzero(out) == 0


def test_fusion_four_scales_and_range():
    m = MultiScaleFusion(4)
    out, per = m(torch.rand(2, 16, 16), torch.rand(2, 16, 16), torch.rand(2, 4, 2, 2), return_scales=True)
    assert len(per) == 4 and SCALES == (1, 2, 4, 8)
    assert out.shape == (2, 16, 16) and out.max() <= 1 + 1e-6 and out.min() >= 0


def test_fusion_non_finite_names_scale():
    m = MultiScaleFusion(4)
    with pytest.raises(FloatingPointError, match="scale 1/1"):
        m(torch.full((1, 8, 8), float("nan")), torch.rand(1, 8, 8), torch.rand(1, 4, 1, 1))


def test_fusion_gradient():
    torch.manual_seed(1)
    m = MultiScaleFusion(feat_channels=2, width=3).double()
    F_h = torch.rand(16, 16, dtype=torch.float64, requires_grad=True)
    F_r = torch.rand(16, 16, dtype=torch.float64, requires_grad=True)
    # F_p needs spatial extent: a constant saliency is removed by the peak normalisation
    F_p = torch.rand(2, 2, 2, dtype=torch.float64, requires_grad=True)
    w = torch.randn(16, 16, dtype=torch.float64)
    fn = lambda: (fuse_multiscale(F_h, F_r, F_p, m) * w).sum()
    assert check(fn, [F_h, F_r, F_p, m.q.weight, m.v.weight]) < 1e-3


# --------------------------------------------------------------------------- readout


def test_locate_source_examples():
    m = np.zeros((20, 20))
    m[7, 12] = 1
    assert locate_source(m) == (12, 7)
    m = np.zeros((12, 12))
    m[3, 3] = m[9, 9] = 1
    assert locate_source(m) == (3, 3)
    with pytest.raises(ValueError):
        locate_source(np.full((3, 3), np.nan))


def test_soft_argmax_sharp_peak():
    heat = torch.zeros(1, 10, 12)
    heat[0, 4, 7] = 10.0
    xy = soft_argmax(heat, temperature=0.05)
    assert torch.allclose(xy, torch.tensor([[7.0, 4.0]]), atol=1e-4)


def test_coordinate_maps_round_trip():
    xy = (37.3, 12.9)
    back = to_frame_coords(to_work_coords(xy, (64, 48), (128, 96)), (64, 48), (128, 96))
    assert back == pytest.approx(xy)


def test_detector_on_frame(small_scene):
    clip, gt = small_scene
    det = SourceDetector().eval()
    heat = heatmap_at_frame(det, clip[20].image)
    assert heat.shape == (clip.height, clip.width)
    x, y = detect_point(det, clip[20])
    assert 0 <= x < clip.width and 0 <= y < clip.height


# --------------------------------------------------------------------------- gaussian targets


def test_gaussian_examples():
    g = gaussian_target((10, 10), 3.0, (32, 32))
    assert g[10, 10] == 1.0
    assert g[10, 13] == pytest.approx(math.exp(-0.5))
    assert gaussian_target((32, 32), 2.0, (64, 64)).sum() == pytest.approx(2 * math.pi * 4, rel=0.01)
    with pytest.raises(ValueError):
        gaussian_target((64, 1), 2.0, (64, 64))


@settings(max_examples=60, deadline=None)
@given(x=st.integers(0, 39), y=st.integers(0, 29), sigma=st.floats(0.5, 8))
def test_gaussian_argmax_is_point(x, y, sigma):
    assert locate_source(gaussian_target((x, y), sigma, (30, 40))) == (x, y)


def test_default_sigma():
    assert SpatialLossConfig().sigma_for(128, 96) == pytest.approx(3.2)
    with pytest.raises(ValueError):
        SpatialLossConfig(lambda1=0)


# --------------------------------------------------------------------------- loss


def _scalar_spatial_loss(Hp, Hgt, pseudo, pp, pg, l1=0.5, l2=0.5, delta=1.0):
    n = Hp.size
    mse = lambda a, b: sum((float(a.flat[i]) - float(b.flat[i])) ** 2 for i in range(n)) / n
    total = l1 * mse(Hp, Hgt)
    if pseudo:
        total += l2 / len(pseudo) * sum(mse(Hp, m) for m in pseudo)
    hub = 0.0
    for r in (pp[0] - pg[0], pp[1] - pg[1]):
        hub += 0.5 * r * r if abs(r) <= 1 else abs(r) - 0.5
    return total + delta * hub


def test_spatial_loss_examples():
    H = torch.rand(8, 8)
    P = torch.tensor([3.0, 4.0])
    assert float(spatial_loss(H, H, [], P, P)) == 0.0
    off = torch.tensor([3.5, 4.0])
    assert float(spatial_loss(H, H, [], off, P)) == pytest.approx(0.125)
    with pytest.raises(ValueError):
        spatial_loss(H, torch.rand(4, 4), [], P, P)
    with pytest.raises(ValueError):
        spatial_loss(H, H, [torch.rand(4, 4)], P, P)


def test_spatial_loss_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        Hp, Hgt = rng.random((8, 8)), rng.random((8, 8))
        pseudo = [rng.random((8, 8)) for _ in range(int(rng.integers(0, 4)))]
        pp, pg = rng.normal(0, 2, 2), rng.normal(0, 2, 2)
        got = spatial_loss(*(torch.as_tensor(a) for a in (Hp, Hgt)), [torch.as_tensor(m) for m in pseudo],
                           torch.as_tensor(pp), torch.as_tensor(pg))
        assert float(got) == pytest.approx(_scalar_spatial_loss(Hp, Hgt, pseudo, pp, pg), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_spatial_loss_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    Hp, Hgt, M = (torch.rand(4, 4, generator=g) for _ in range(3))
    assert float(spatial_loss(Hp, Hgt, [M], torch.randn(2, generator=g), torch.randn(2, generator=g))) >= 0


def test_spatial_loss_gradient():
    torch.manual_seed(2)
    Hp = torch.rand(6, 6, dtype=torch.float64, requires_grad=True)
    Hgt = torch.rand(6, 6, dtype=torch.float64)
    ps = [torch.rand(6, 6, dtype=torch.float64) for _ in range(2)]
    P = torch.tensor([1.0, 2.3], dtype=torch.float64, requires_grad=True)
    G = torch.tensor([0.4, 4.0], dtype=torch.float64)
    assert check(lambda: spatial_loss(Hp, Hgt, ps, P, G), [Hp, P]) < 1e-3


# --------------------------------------------------------------------------- pseudo labels


def _textured_clip(n=12, shift=(0, 0)):
    rng = np.random.default_rng(0)
    base = cv2.GaussianBlur(rng.random((96, 128, 3)).astype(np.float32), (0, 0), 1.0)
    base = cv2.normalize(base, None, 0, 255, cv2.NORM_MINMAX).astype(np.uint8)
    big = np.pad(base, ((40, 40), (40, 40), (0, 0)), mode="reflect")
    frames = []
    for t in range(n):
        dx, dy = shift[0] * t, shift[1] * t
        M = np.float32([[1, 0, 40 - dx], [0, 1, 40 - dy]])
        frames.append(cv2.warpAffine(big, M, (128, 96), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP))
    return Clip.from_images("tex", frames)


def test_propagate_zero_flow():
    clip = _textured_clip()
    p = propagate_pseudo(clip, 0, AnnotatedPoint(0, 60.0, 40.0))
    assert (p.frame_index, p.source) == (10, "pseudo")
    assert (p.x, p.y) == pytest.approx((60.0, 40.0), abs=0.1)


def test_propagate_constant_flow_chains():
    clip = _textured_clip()
    flow = lambda a, b: np.broadcast_to(np.array([2.0, 1.0], np.float32), a.shape[:2] + (2,)).copy()
    p = propagate_pseudo(clip, 0, AnnotatedPoint(0, 30.0, 30.0), flow_fn=flow)
    assert (p.x, p.y) == pytest.approx((50.0, 40.0))


def test_propagate_known_translation():
    clip = _textured_clip(shift=(1.0, 0.5))
    p = propagate_pseudo(clip, 0, AnnotatedPoint(0, 60.0, 40.0))
    assert math.hypot(p.x - 70.0, p.y - 45.0) <= 2.0


def test_propagate_flat_texture_raises():
    clip = Clip.from_images("flat", [np.full((32, 32, 3), 120, np.uint8)] * 12)
    with pytest.raises(FlowUnavailable):
        propagate_pseudo(clip, 0, AnnotatedPoint(0, 10.0, 10.0))


def test_propagate_past_end():
    with pytest.raises(ValueError):
        propagate_pseudo(_textured_clip(n=5), 0, AnnotatedPoint(0, 10.0, 10.0))


def test_propagate_on_synthetic_scene():
    hits = 0
    for seed in range(4):
        clip, gt = generate_scene(SceneConfig(length=40, onset_frame=10, seed=seed), "s")
        a = AnnotatedPoint(10, *gt.source_track[10])
        p = propagate_pseudo(clip, 10, a)
        hits += math.hypot(p.x - gt.source_track[20, 0], p.y - gt.source_track[20, 1]) <= 2.0
    assert hits >= 3


# --------------------------------------------------------------------------- training


def test_trainer_uses_labelled_onset_only(monkeypatch, scene):
    clip, gt = scene

    def boom(*a, **k):
        raise AssertionError("onset predictions must not be consulted")

    monkeypatch.setattr(onset_mod, "locate_onset", boom)
    sample = detect_sample(clip, sparse_labels("scene", gt))
    assert sample.point == tuple(gt.source_track[gt.onset_frame])
    assert len(sample.pseudo_images) == DetectPseudoConfig().n
    assert detect_sample(clip, ClipLabels("scene", None)) is None


def test_sample_loss_backward(scene):
    clip, gt = scene
    det = SourceDetector()
    cfg = DetectTrainConfig(pseudo_per_step=2)
    loss = sample_loss(det, [detect_sample(clip, sparse_labels("scene", gt), cfg)], cfg, np.random.default_rng(0))
    loss.backward()
    assert torch.isfinite(loss) and det.head.conv1.weight.grad is not None
