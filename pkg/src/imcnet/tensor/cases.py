"""Gradient-check cases for the primitive kernels (64-bit).

Inputs to non-smooth ops are drawn away from their kinks so that the
finite-difference step never straddles one.
"""
import numpy as np

from imcnet.tensor import ops
from imcnet.tensor.gradcheck import GradCase, register


def _away_from_zero(rng, shape, margin=0.1):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))


def _fractional(rng, shape, lo, hi):
    """Real coordinates in [lo, hi) whose fractional part lies in [0.1, 0.9]."""
    base = rng.integers(lo, hi, size=shape).astype(np.float64)
    return base + rng.uniform(0.1, 0.9, size=shape)


def _conv_case(rng, stride, padding, bias=True):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4) if bias else None
    arrays = [x, w] + ([b] if bias else [])

    def fwd():
        return ops.conv2d(x, ops.ConvParams(w, b, stride, padding))

    def bwd(g):
        gx, gw, gb = ops.conv2d_backward(x, ops.ConvParams(w, b, stride, padding), g)
        return [gx, gw] + ([gb] if bias else [])

    return GradCase(fwd, bwd, arrays, ["input", "weight", "bias"][:len(arrays)])


@register("conv2d")
def conv2d_case(rng):
    return _conv_case(rng, 1, 1)


@register("conv2d_stride2")
def conv2d_stride2_case(rng):
    return _conv_case(rng, 2, 1)


@register("conv2d_1x1")
def conv2d_1x1_case(rng):
    x = rng.standard_normal((2, 5, 3, 4))
    w = rng.standard_normal((3, 5, 1, 1))

    def fwd():
        return ops.conv2d(x, ops.ConvParams(w, None, 1, 0))

    def bwd(g):
        gx, gw, _ = ops.conv2d_backward(x, ops.ConvParams(w, None, 1, 0), g)
        return [gx, gw]

    return GradCase(fwd, bwd, [x, w], ["input", "weight"])


@register("bilinear_sample")
def bilinear_sample_case(rng):
    feat = rng.standard_normal((2, 3, 5, 6))
    # includes points partly outside the map (zero padding)
    xs = _fractional(rng, (2, 10), -1, 6)
    ys = _fractional(rng, (2, 10), -1, 5)
    state = {}

    def fwd():
        out, state["cache"] = ops.bilinear_sample_points(feat, xs, ys)
        return out

    def bwd(g):
        fwd()
        return list(ops.bilinear_sample_points_backward(feat, state["cache"], g))

    return GradCase(fwd, bwd, [feat, xs, ys], ["feature", "x", "y"], max_checks=40)


@register("softmax_columns")
def softmax_case(rng):
    s = rng.standard_normal((2, 5, 4)) * 2

    def fwd():
        return ops.softmax_columns(s)

    def bwd(g):
        return [ops.softmax_columns_backward(ops.softmax_columns(s), g)]

    return GradCase(fwd, bwd, [s], ["matrix"])


@register("sigmoid")
def sigmoid_case(rng):
    x = rng.standard_normal((3, 3)) * 2

    def fwd():
        return ops.sigmoid(x)

    return GradCase(fwd, lambda g: [ops.sigmoid_backward(ops.sigmoid(x), g)], [x], ["x"])


@register("relu")
def relu_case(rng):
    x = _away_from_zero(rng, (2, 3, 4, 4))
    return GradCase(lambda: ops.relu(x), lambda g: [ops.relu_backward(x, g)], [x], ["x"])


@register("matmul")
def matmul_case(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 5))
    return GradCase(lambda: ops.matmul(a, b), lambda g: list(ops.matmul_backward(a, b, g)),
                    [a, b], ["a", "b"])


@register("mul")
def mul_case(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 3, 4, 4))
    return GradCase(lambda: ops.mul(a, b), lambda g: list(ops.mul_backward(a, b, g)),
                    [a, b], ["a", "b"])


@register("add")
def add_case(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 3, 4, 4))
    return GradCase(lambda: ops.add(a, b), lambda g: list(ops.add_backward(g)), [a, b], ["a", "b"])


@register("channel_scale")
def channel_scale_case(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    s = rng.standard_normal((2, 3))
    return GradCase(lambda: ops.channel_scale(x, s),
                    lambda g: list(ops.channel_scale_backward(x, s, g)), [x, s], ["x", "scale"])


@register("spatial_gate")
def spatial_gate_case(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    m = rng.uniform(0, 1, (2, 1, 4, 4))
    return GradCase(lambda: ops.channel_scale(x, m),
                    lambda g: list(ops.channel_scale_backward(x, m, g)), [x, m], ["x", "mask"])


@register("concat_channels")
def concat_case(rng):
    a = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((2, 4, 3, 3))
    return GradCase(lambda: ops.concat_channels([a, b]),
                    lambda g: ops.concat_channels_backward([2, 4], g), [a, b], ["a", "b"])


@register("global_avg_pool")
def gap_case(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    return GradCase(lambda: ops.global_avg_pool(x),
                    lambda g: [ops.global_avg_pool_backward(x.shape, g)], [x], ["x"])


@register("max_pool2")
def max_pool_case(rng):
    # distinct values spaced well beyond the finite-difference step
    n, c, h, w = 2, 3, 4, 6
    x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.1 + rng.uniform(0, 0.01, (n, c, h, w))

    def bwd(g):
        _, arg = ops.max_pool2(x)
        return [ops.max_pool2_backward(x.shape, arg, g)]

    return GradCase(lambda: ops.max_pool2(x)[0], bwd, [x], ["x"], eps=1e-4)


@register("avg_pool2")
def avg_pool_case(rng):
    x = rng.standard_normal((2, 3, 4, 6))
    return GradCase(lambda: ops.avg_pool2(x), lambda g: [ops.avg_pool2_backward(x.shape, g)],
                    [x], ["x"])


@register("upsample_x2")
def upsample2_case(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    return GradCase(lambda: ops.upsample_bilinear(x),
                    lambda g: [ops.upsample_bilinear_backward(x.shape, g)], [x], ["x"])


@register("upsample_to_size")
def upsample_size_case(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    return GradCase(lambda: ops.upsample_bilinear(x, size=(7, 13)),
                    lambda g: [ops.upsample_bilinear_backward(x.shape, g)], [x], ["x"])
