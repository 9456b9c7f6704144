"""Deformable 3x3 convolution (single offset group, no modulation).

    out(p0) = sum_n w(p_n) * f(p0 + p_n + dp_n)

with ``f`` read by bilinear interpolation and zero outside the map.
Offset channels are ordered ``(dx_0, dy_0, dx_1, dy_1, ...)`` with kernel
taps enumerated row-major over (-1, -1) ... (1, 1).
"""
import numpy as np

from imcnet.errors import ShapeError
from imcnet.tensor import ops
from imcnet.tensor.gradcheck import GradCase, register
from imcnet.tensor.layers import Module, Parameter, kaiming_uniform

KERNEL = 3
TAPS = KERNEL * KERNEL


def _tap_grid():
    ky, kx = np.meshgrid(np.arange(KERNEL) - 1, np.arange(KERNEL) - 1, indexing="ij")
    return ky.reshape(-1), kx.reshape(-1)


def _check(f, offsets, weight):
    if f.ndim != 4 or offsets.ndim != 4:
        raise ShapeError(f"deformable_conv expects 4-D feature and offsets, got {f.shape}, {offsets.shape}")
    n, c, h, w = f.shape
    if offsets.shape != (n, 2 * TAPS, h, w):
        raise ShapeError(f"offset field must be {(n, 2 * TAPS, h, w)}, got {offsets.shape}")
    if weight.shape[1:] != (c, KERNEL, KERNEL):
        raise ShapeError(f"deformable kernel must be (outC, {c}, 3, 3), got {weight.shape}")


def sampling_coords(offsets):
    """Absolute (x, y) sample coordinates, each (N, H, W, TAPS)."""
    ky, kx = _tap_grid()
    h, w = offsets.shape[2:]
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dx = offsets[:, 0::2].transpose(0, 2, 3, 1)
    dy = offsets[:, 1::2].transpose(0, 2, 3, 1)
    xs = (gx[:, :, None] + kx).astype(offsets.dtype) + dx
    ys = (gy[:, :, None] + ky).astype(offsets.dtype) + dy
    return xs, ys


def _weight_matrix(weight):
    # rows ordered (tap, in-channel) to match the sampled layout
    return weight.transpose(2, 3, 1, 0).reshape(-1, weight.shape[0])


def deformable_conv(f, offsets, weight, return_cache=False):
    """Forward pass. f (N, C, H, W), offsets (N, 18, H, W), weight (O, C, 3, 3)."""
    _check(f, offsets, weight)
    n, c, h, w = f.shape
    xs, ys = sampling_coords(offsets.astype(f.dtype, copy=False))
    taps = ops.bilinear_taps(xs, ys, h, w)
    ft = f.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    corners, sampled = taps.gather(ft)               # sampled: (N*H*W*TAPS, C)
    cols = sampled.reshape(n * h * w, TAPS * c)
    out = (cols @ _weight_matrix(weight)).reshape(n, h, w, -1).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if return_cache:
        return out, (taps, corners, cols)
    return out


def deformable_conv_backward(f, offsets, weight, grad_out, cache=None):
    """Return ``(grad_f, grad_offsets, grad_weight)``."""
    _check(f, offsets, weight)
    n, c, h, w = f.shape
    outc = weight.shape[0]
    if grad_out.shape != (n, outc, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output {(n, outc, h, w)}")
    if cache is None:
        _, cache = deformable_conv(f, offsets, weight, return_cache=True)
    taps, corners, cols = cache
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, outc)
    grad_w = (cols.T @ g).reshape(KERNEL, KERNEL, c, outc).transpose(3, 2, 0, 1)
    gs = (g @ _weight_matrix(weight).T).reshape(-1, c)
    grad_f = taps.scatter(gs).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    gdx, gdy = taps.coord_grads(corners, gs)
    grad_off = np.empty((n, 2 * TAPS, h, w), dtype=f.dtype)
    grad_off[:, 0::2] = gdx.reshape(n, h, w, TAPS).transpose(0, 3, 1, 2)
    grad_off[:, 1::2] = gdy.reshape(n, h, w, TAPS).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_f), grad_off, np.ascontiguousarray(grad_w)


class DeformConv2d(Module):
    """Deformable 3x3 layer without bias. ``regular=True`` ignores offsets
    and runs the plain zero-padded convolution with the same weights."""

    def __init__(self, in_ch, out_ch, rng=None, gain=1.0, regular=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, KERNEL, KERNEL), gain))
        self.regular = regular

    def forward(self, f, offsets):
        if self.regular:
            out, cols = ops.conv2d(f, ops.ConvParams(self.weight.data, None, 1, 1), return_cols=True)
        else:
            out, cols = deformable_conv(f, offsets, self.weight.data, return_cache=True)
        self._cache = (f, offsets, cols)
        return out

    def backward(self, grad_out):
        f, offsets, cache = self._cache
        self._cache = None
        if self.regular:
            gf, gw, _ = ops.conv2d_backward(f, ops.ConvParams(self.weight.data, None, 1, 1),
                                            grad_out, cols=cache)
            goff = np.zeros_like(offsets)
        else:
            gf, goff, gw = deformable_conv_backward(f, offsets, self.weight.data, grad_out, cache)
        self.weight.grad += gw
        return gf, goff


@register("deformable_conv")
def deformable_conv_case(rng):
    n, c, h, w = 2, 3, 5, 5
    f = rng.standard_normal((n, c, h, w))
    # fractional parts kept away from integers (bilinear kinks), some taps leave the map
    base = rng.integers(-2, 2, size=(n, 2 * TAPS, h, w)).astype(np.float64)
    offsets = base + rng.uniform(0.1, 0.9, size=base.shape)
    weight = rng.standard_normal((4, c, 3, 3))

    def fwd():
        return deformable_conv(f, offsets, weight)

    def bwd(g):
        return list(deformable_conv_backward(f, offsets, weight, g))

    return GradCase(fwd, bwd, [f, offsets, weight], ["feature", "offsets", "weight"],
                    eps=1e-4, max_checks=60)
