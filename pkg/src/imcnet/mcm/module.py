"""Motion compensation: cascaded deformable alignment, temporal-spatial
compensation (TSC) and the segmentation head."""
import numpy as np

from imcnet.errors import ShapeError
from imcnet.mcm.deform import TAPS, DeformConv2d
from imcnet.tensor import ops
from imcnet.tensor.layers import Conv2d, Module, ModuleList, ReLU, ResidualBlock, Sequential


class AlignStage(Module):
    """Offset generator (reduce conv -> zero-initialised offset conv) plus one deformable conv."""

    def __init__(self, ch=64, rng=None, regular=False):
        super().__init__()
        self.reduce = Sequential(Conv2d(2 * ch, ch, 3, rng=rng), ReLU())
        self.offset = Conv2d(ch, 2 * TAPS, 3, rng=rng, zero_init=True)
        self.dcn = DeformConv2d(ch, ch, rng=rng, regular=regular)

    def generate_offsets(self, f_ref, f_prev):
        if f_ref.shape != f_prev.shape:
            raise ShapeError(f"offset generator: reference {f_ref.shape} vs aligned {f_prev.shape}")
        return self.offset(self.reduce(ops.concat_channels([f_ref, f_prev])))

    def forward(self, f_ref, f_prev):
        theta = self.generate_offsets(f_ref, f_prev)
        self.last_offsets = theta
        return self.dcn(f_prev, theta)

    def backward(self, grad):
        g_prev, g_theta = self.dcn.backward(grad)
        g_cat = self.reduce.backward(self.offset.backward(g_theta))
        ch = g_cat.shape[1] // 2
        return g_cat[:, :ch], g_prev + g_cat[:, ch:]


class CascadeAlign(Module):
    """``depth`` alignment stages; stage l aligns the output of stage l-1 to f_ref."""

    def __init__(self, ch=64, depth=4, rng=None, regular=False):
        super().__init__()
        if not 1 <= depth <= 5:
            raise ShapeError(f"cascade depth must be in 1..5, got {depth}")
        self.stages = ModuleList([AlignStage(ch, rng=rng, regular=regular) for _ in range(depth)])

    def forward(self, f_ref, f_nbr):
        aligned = f_nbr
        for stage in self.stages:
            aligned = stage(f_ref, aligned)
        return aligned

    def backward(self, grad):
        g_ref = None
        for stage in reversed(self.stages._items):
            gr, grad = stage.backward(grad)
            g_ref = gr if g_ref is None else g_ref + gr
        return g_ref, grad


class TSC(Module):
    """Temporal attention per frame, then pyramid spatial attention and fusion.

    The temporally weighted concatenation (T*C channels) is first reduced
    to C channels by a 1x1 conv ``r``; the spatial attention residual and
    the final product act on ``r``.
    """

    def __init__(self, ch=64, n_frames=3, rng=None):
        super().__init__()
        # small gain keeps channel-summed similarities away from sigmoid saturation
        self.phi = Conv2d(ch, ch, 1, rng=rng, gain=ch ** -0.25)
        self.psi = Conv2d(ch, ch, 1, rng=rng, gain=ch ** -0.25)
        self.reduce = Conv2d(n_frames * ch, ch, 1, rng=rng, gain=1.0)
        self.theta1 = Conv2d(ch, ch, 3, rng=rng, gain=1.0)
        self.theta2 = Conv2d(2 * ch, ch, 3, rng=rng, gain=1.0)
        self.delta = Sequential(Conv2d(ch, ch, 3, rng=rng), ReLU(), Conv2d(ch, ch, 3, rng=rng, gain=1.0))
        self.n_frames = n_frames

    def temporal_attention(self, frames, f_ref):
        """frames (B, T, C, H, W), f_ref (B, C, H, W) -> A_t (B, T, 1, H, W)."""
        b, t, c, h, w = frames.shape
        if f_ref.shape != (b, c, h, w):
            raise ShapeError(f"temporal attention: reference {f_ref.shape} vs frames {frames.shape}")
        phi = self.phi(frames.reshape(b * t, c, h, w)).reshape(b, t, c, h, w)
        psi = self.psi(f_ref)
        att = ops.sigmoid((phi * psi[:, None]).sum(axis=2, keepdims=True))
        return att, phi, psi

    def spatial_attention(self, r):
        """r (B, C, H, W) -> A_s (B, C, H, W)."""
        if r.shape[2] % 2 or r.shape[3] % 2:
            raise ShapeError(f"spatial attention needs even spatial dims, got {r.shape[2:]}")
        t1 = self.theta1(r)
        mp, arg = ops.max_pool2(t1)
        ap = ops.avg_pool2(t1)
        t2 = self.theta2(ops.concat_channels([mp, ap]))
        self._sa_cache = (t1.shape, arg, t2.shape)
        return ops.upsample_bilinear(t2) + r

    def _spatial_backward(self, g_as):
        t1_shape, arg, t2_shape = self._sa_cache
        g_t2 = ops.upsample_bilinear_backward(t2_shape, g_as)
        g_cat = self.theta2.backward(g_t2)
        ch = g_cat.shape[1] // 2
        g_t1 = ops.max_pool2_backward(t1_shape, arg, g_cat[:, :ch]) + ops.avg_pool2_backward(t1_shape, g_cat[:, ch:])
        return self.theta1.backward(g_t1) + g_as

    def forward(self, frames, f_ref):
        b, t, c, h, w = frames.shape
        if t != self.n_frames:
            raise ShapeError(f"TSC built for {self.n_frames} frames, got {t}")
        att, phi, psi = self.temporal_attention(frames, f_ref)
        f_prime = (att * frames).reshape(b, t * c, h, w)
        r = self.reduce(f_prime)
        a_s = self.spatial_attention(r)
        out = a_s * r + self.delta(a_s)
        self.last_temporal = att
        self._cache = (frames, att, phi, psi, r, a_s)
        return out

    def backward(self, grad):
        frames, att, phi, psi, r, a_s = self._cache
        self._cache = None
        b, t, c, h, w = frames.shape
        g_as = grad * r + self.delta.backward(grad)
        g_r = grad * a_s
        g_r = g_r + self._spatial_backward(g_as)
        g_fp = self.reduce.backward(g_r).reshape(b, t, c, h, w)
        g_frames = g_fp * att
        g_att = (g_fp * frames).sum(axis=2, keepdims=True)
        g_logit = ops.sigmoid_backward(att, g_att)
        g_phi = g_logit * psi[:, None]
        g_psi = (g_logit * phi).sum(axis=1)
        g_frames = g_frames + self.phi.backward(g_phi.reshape(b * t, c, h, w)).reshape(b, t, c, h, w)
        g_ref = self.psi.backward(g_psi)
        return g_frames, g_ref


class SegmentHead(Module):
    """Residual block -> 1x1 conv -> bilinear resize of logits -> sigmoid."""

    def __init__(self, ch=64, rng=None):
        super().__init__()
        self.block = ResidualBlock(ch, ch, rng=rng)
        self.classifier = Conv2d(ch, 1, 1, rng=rng, gain=1.0)

    def forward(self, f, out_size):
        logits = self.classifier(self.block(f))
        self._shape = logits.shape
        self._y = ops.sigmoid(ops.upsample_bilinear(logits, size=out_size))
        return self._y

    def backward(self, grad):
        g = ops.sigmoid_backward(self._y, grad)
        g = ops.upsample_bilinear_backward(self._shape, g)
        return self.block.backward(self.classifier.backward(g))


class MCM(Module):
    """Align each neighbour to the centre feature, fuse, and segment.

    One cascade (shared parameters) handles every neighbour; neighbours of
    all clips are batched into one call.
    """

    def __init__(self, ch=64, depth=4, n_frames=3, rng=None, regular=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.align = CascadeAlign(ch, depth, rng=rng, regular=regular)
        self.tsc = TSC(ch, n_frames, rng=rng)
        self.head = SegmentHead(ch, rng=rng)
        self.n_frames = n_frames

    def forward(self, p2, out_size):
        """p2 (B*T, C, H, W), clips frame-ordered with the centre at index T // 2."""
        t = self.n_frames
        bt, c, h, w = p2.shape
        if bt % t:
            raise ShapeError(f"batch {bt} is not a multiple of the clip length {t}")
        b = bt // t
        clip = p2.reshape(b, t, c, h, w)
        centre = t // 2
        f_ref = clip[:, centre]
        nbr_idx = [i for i in range(t) if i != centre]
        if nbr_idx:
            nbrs = clip[:, nbr_idx].reshape(b * len(nbr_idx), c, h, w)
            refs = np.repeat(f_ref, len(nbr_idx), axis=0)
            aligned = self.align(refs, nbrs).reshape(b, len(nbr_idx), c, h, w)
        frames = np.empty_like(clip)
        frames[:, centre] = f_ref
        if nbr_idx:
            frames[:, nbr_idx] = aligned
        fused = self.tsc(frames, f_ref)
        self._cache = (b, t, c, h, w, centre, nbr_idx)
        return self.head(fused, out_size)

    def backward(self, grad):
        b, t, c, h, w, centre, nbr_idx = self._cache
        self._cache = None
        g_frames, g_ref = self.tsc.backward(self.head.backward(grad))
        g_clip = np.zeros((b, t, c, h, w), dtype=grad.dtype)
        g_clip[:, centre] = g_ref + g_frames[:, centre]
        if nbr_idx:
            g_al = g_frames[:, nbr_idx].reshape(b * len(nbr_idx), c, h, w)
            g_refs, g_nbrs = self.align.backward(g_al)
            g_clip[:, centre] += g_refs.reshape(b, len(nbr_idx), c, h, w).sum(axis=1)
            g_clip[:, nbr_idx] = g_nbrs.reshape(b, len(nbr_idx), c, h, w)
        return g_clip.reshape(b * t, c, h, w)
