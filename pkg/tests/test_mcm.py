import numpy as np
import pytest

from imcnet.errors import ShapeError
from imcnet.mcm import MCM
from imcnet.mcm.deform import TAPS, deformable_conv
from imcnet.mcm.module import TSC, AlignStage, CascadeAlign, SegmentHead
from imcnet.model import IMCNet
from imcnet.tensor import ops


def test_zero_offsets_match_regular_conv(rng):
    for _ in range(10):
        f = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        got = deformable_conv(f, np.zeros((2, 2 * TAPS, 5, 6)), w)
        assert np.abs(got - ops.conv2d(f, ops.ConvParams(w, None, 1, 1))).max() < 1e-6


@pytest.mark.parametrize("dx,dy", [(1, 0), (0, 1), (-1, 0), (2, -1)])
def test_integer_shift_oracle(rng, dx, dy):
    f = rng.standard_normal((1, 2, 6, 7))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1
    off = np.zeros((1, 2 * TAPS, 6, 7))
    off[:, 0::2], off[:, 1::2] = dx, dy
    out = deformable_conv(f, off, w)
    want = np.zeros_like(f)
    h, wd = f.shape[2:]
    for y in range(h):
        for x in range(wd):
            sy, sx = y + dy, x + dx
            if 0 <= sy < h and 0 <= sx < wd:
                want[..., y, x] = f[..., sy, sx]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_zero_initialised_generator(rng):
    stage = AlignStage(4, rng=rng)
    f = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
    assert not stage.generate_offsets(f, f).any()


def test_zero_offset_cascade_equals_successive_convs(rng):
    casc = CascadeAlign(3, 3, rng=rng).astype(np.float64)
    f_ref, f_nbr = rng.standard_normal((2, 1, 3, 5, 5))
    out = casc(f_ref, f_nbr)
    x = f_nbr
    for st in casc.stages:
        x = ops.conv2d(x, ops.ConvParams(st.dcn.weight.data, None, 1, 1))
    np.testing.assert_allclose(out, x, atol=1e-10)


def test_whole_network_zero_offsets_match_regular():
    clips = np.random.default_rng(3).random((2, 3, 3, 64, 64)).astype(np.float32)
    kw = dict(key_channels=4, channels=8, cascade_depth=2, encoder_channels=(4, 6, 8, 8), seed=5)
    a = IMCNet(**kw)(clips).mask
    b = IMCNet(regular=True, **kw)(clips).mask
    assert np.abs(a - b).max() < 1e-6


def test_depth_changes_output(rng):
    p2 = rng.standard_normal((3, 4, 8, 8))
    outs = []
    for depth in (1, 4):
        m = MCM(4, depth, 3, rng=np.random.default_rng(0)).astype(np.float64)
        for st in m.align.stages:   # non-degenerate offsets
            st.offset.weight.data[:] = np.random.default_rng(1).standard_normal(st.offset.weight.shape) * 0.3
        outs.append(m(p2, (32, 32)))
    assert np.abs(outs[0] - outs[1]).max() > 1e-6


@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
def test_depth_sweep_runs(rng, depth):
    m = MCM(4, depth, 3, rng=rng)
    out = m(rng.standard_normal((3, 4, 8, 8)).astype(np.float32), (32, 32))
    assert out.shape == (1, 1, 32, 32)
    g = m.backward(np.ones_like(out))
    assert g.shape == (3, 4, 8, 8) and np.isfinite(g).all()


def test_temporal_attention_cases(rng):
    tsc = TSC(3, 1, rng=rng).astype(np.float64)
    for conv in (tsc.phi, tsc.psi):
        conv.weight.data[:] = np.eye(3)[:, :, None, None]
        conv.bias.data[:] = 0
    f = rng.standard_normal((1, 3, 4, 4))
    att, _, _ = tsc.temporal_attention(f[:, None], f)
    np.testing.assert_allclose(att[0, 0, 0], ops.sigmoid((f[0] ** 2).sum(axis=0)))
    assert (att >= 0.5).all()
    g = np.zeros((1, 3, 1, 2))
    g[0, 0], h = 1.0, np.zeros((1, 3, 1, 2))
    h[0, 1] = 1.0
    att, _, _ = tsc.temporal_attention(g[:, None], h)
    np.testing.assert_allclose(att, 0.5)


def test_temporal_attention_dot_product_oracle(rng):
    tsc = TSC(3, 3, rng=rng).astype(np.float64)
    frames = rng.standard_normal((2, 3, 3, 4, 4))
    ref = rng.standard_normal((2, 3, 4, 4))
    att, _, _ = tsc.temporal_attention(frames, ref)
    wp, bp = tsc.phi.weight.data[:, :, 0, 0], tsc.phi.bias.data
    wq, bq = tsc.psi.weight.data[:, :, 0, 0], tsc.psi.bias.data
    for b in range(2):
        for t in range(3):
            for y in range(4):
                for x in range(4):
                    d = (wp @ frames[b, t, :, y, x] + bp) @ (wq @ ref[b, :, y, x] + bq)
                    assert abs(att[b, t, 0, y, x] - 1 / (1 + np.exp(-d))) < 1e-6
    assert ((att > 0) & (att < 1)).all()


def test_temporal_attention_open_interval(rng):
    tsc = TSC(4, 3, rng=rng)
    tsc(rng.standard_normal((2, 3, 4, 8, 8)).astype(np.float32),
        rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    assert ((tsc.last_temporal > 0) & (tsc.last_temporal < 1)).all()


def test_fused_output_finite_for_large_inputs(rng):
    tsc = TSC(4, 3, rng=rng)
    out = tsc(rng.standard_normal((2, 3, 4, 8, 8)).astype(np.float32) * 100,
              rng.standard_normal((2, 4, 8, 8)).astype(np.float32) * 100)
    assert np.isfinite(out).all()


def test_spatial_attention_constant_propagation(rng):
    tsc = TSC(2, 1, rng=rng).astype(np.float64)
    tsc.theta1.weight.data[:] = 0
    tsc.theta1.bias.data[:] = [0.3, -0.2]
    tsc.theta2.weight.data[:] = 0
    tsc.theta2.bias.data[:] = 0
    for c in range(2):
        tsc.theta2.weight.data[c, c, 1, 1] = 0.5       # max-pooled branch
        tsc.theta2.weight.data[c, 2 + c, 1, 1] = 0.5   # average-pooled branch
    r = np.full((1, 2, 4, 4), 0.7)
    t1 = tsc.theta1(r)
    np.testing.assert_allclose(ops.max_pool2(t1)[0], ops.avg_pool2(t1))
    a_s = tsc.spatial_attention(r)
    np.testing.assert_allclose(a_s - r, np.array([0.3, -0.2])[None, :, None, None] * np.ones_like(r))


def test_zero_segment_head_is_half():
    head = SegmentHead(3)
    for p in head.parameters():
        p.data[:] = 0
    out = head(np.random.default_rng(0).standard_normal((1, 3, 4, 4)).astype(np.float32), (16, 16))
    np.testing.assert_allclose(out, 0.5)


def test_translation_tracking():
    """A one-stage cascade learns to undo an integer shift."""
    rng = np.random.default_rng(0)
    base = rng.standard_normal((1, 4, 12, 12))
    # smooth so that the bilinear offset objective has a usable basin
    from scipy.ndimage import gaussian_filter
    base = gaussian_filter(base, sigma=(0, 0, 1.2, 1.2))
    base /= base.std()
    f_ref = base[..., 2:-2, 2:-2]
    f_nbr = np.roll(base, 1, axis=3)[..., 2:-2, 2:-2]   # content shifted right by one pixel
    casc = CascadeAlign(4, 1, rng=np.random.default_rng(1)).astype(np.float64)
    dcn = casc.stages[0].dcn
    dcn.weight.data[:] = 0
    for c in range(4):
        dcn.weight.data[c, c, 1, 1] = 1
    inner = (slice(None), slice(None), slice(2, -2), slice(2, -2))
    unaligned = np.mean((f_nbr - f_ref)[inner] ** 2)
    params = casc.parameters()
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    lr = 3e-3
    for step in range(1, 501):
        out = casc(f_ref, f_nbr)
        diff = np.zeros_like(out)
        diff[inner] = out[inner] - f_ref[inner]
        casc.zero_grad()
        casc.backward(2 * diff / diff[inner].size)
        for p, mi, vi in zip(params, m, v):
            mi[:] = 0.9 * mi + 0.1 * p.grad
            vi[:] = 0.999 * vi + 0.001 * p.grad ** 2
            p.data -= lr * (mi / (1 - 0.9 ** step)) / (np.sqrt(vi / (1 - 0.999 ** step)) + 1e-8)
    aligned = np.mean((casc(f_ref, f_nbr) - f_ref)[inner] ** 2)
    assert aligned < 0.25 * unaligned, (aligned, unaligned)


def test_mcm_shape_errors(rng):
    m = MCM(4, 1, 3, rng=rng)
    with pytest.raises(ShapeError):
        m(np.zeros((4, 4, 8, 8), np.float32), (32, 32))
    with pytest.raises(ShapeError):
        CascadeAlign(4, 6)
    with pytest.raises(ShapeError):
        deformable_conv(np.zeros((1, 2, 4, 4)), np.zeros((1, 17, 4, 4)), np.zeros((2, 2, 3, 3)))
