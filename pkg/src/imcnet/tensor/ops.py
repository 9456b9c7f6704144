"""Dense NCHW kernels with hand-written backward passes.

Every forward function is pure. Backward functions take whatever the
forward needs to recompute (or a cache it returned) plus the upstream
gradient and return gradients for each differentiable argument.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import sparse

from imcnet.errors import ShapeError

# Bilinear resizing follows the half-pixel ("align_corners=False") convention:
# output pixel o maps to source coordinate (o + 0.5) * in / out - 0.5.
ALIGN_CORNERS = False


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be (outC, inC, k, k), got {self.weight.shape}")
        if self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"only square kernels are supported, got {self.weight.shape[2:]}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding {self.stride}/{self.padding}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match outC={self.weight.shape[0]}")


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2col(x, k, stride, padding):
    """Unfold ``x`` into per-sample columns of shape (N, C*k*k, Ho*Wo)."""
    n, c, h, w = x.shape
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
        x = xp
    ho = (x.shape[2] - k) // stride + 1
    wo = (x.shape[3] - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def col2im(cols, x_shape, k, stride, padding, ho, wo):
    """Adjoint of :func:`im2col`."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _check_conv(x, params):
    _check_4d(x)
    outc, inc, k, _ = params.weight.shape
    if x.shape[1] != inc:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {inc} "
                         f"(input {x.shape}, weight {params.weight.shape})")
    if x.shape[2] + 2 * params.padding < k or x.shape[3] + 2 * params.padding < k:
        raise ShapeError(f"conv2d: spatial dims {x.shape[2:]} smaller than kernel {k} after padding")


def conv2d(x, params, return_cols=False):
    _check_conv(x, params)
    w = params.weight
    outc, _, k, _ = w.shape
    cols, ho, wo = im2col(x, k, params.stride, params.padding)
    out = np.matmul(w.reshape(outc, -1), cols).reshape(x.shape[0], outc, ho, wo)
    if params.bias is not None:
        out += params.bias[None, :, None, None]
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, params, grad_out, cols=None):
    """Return ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is None without bias."""
    _check_conv(x, params)
    w = params.weight
    outc, _, k, _ = w.shape
    ho = conv_output_size(x.shape[2], k, params.stride, params.padding)
    wo = conv_output_size(x.shape[3], k, params.stride, params.padding)
    expected = (x.shape[0], outc, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d_backward: grad_out shape {grad_out.shape}, expected {expected}")
    if cols is None:
        cols, _, _ = im2col(x, k, params.stride, params.padding)
    g = grad_out.reshape(grad_out.shape[0], outc, -1)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = g.sum(axis=(0, 2)) if params.bias is not None else None
    grad_cols = np.matmul(w.reshape(outc, -1).T, g)
    grad_x = col2im(grad_cols, x.shape, k, params.stride, params.padding, ho, wo)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# bilinear point sampling (zero padding outside the map)


def bilinear_sample(feature, x, y, channel=0):
    """Sample one channel of a (C, H, W) map at real coordinates (x, y)."""
    fmap = feature[channel]
    h, w = fmap.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    lx, ly = x - x0, y - y0
    total = 0.0
    for yy, xx, wt in ((y0, x0, (1 - ly) * (1 - lx)), (y0, x0 + 1, (1 - ly) * lx),
                       (y0 + 1, x0, ly * (1 - lx)), (y0 + 1, x0 + 1, ly * lx)):
        if 0 <= yy < h and 0 <= xx < w:
            total += wt * fmap[yy, xx]
    return total


@dataclass
class BilinearTaps:
    """Four-corner bilinear sampling of flattened maps.

    ``idx`` (4, ...) are row indices into a (rows, C) matrix of map pixels;
    ``wv`` are interpolation weights (zero for corners outside the map) and
    ``wx``/``wy`` their derivatives w.r.t. the x/y sample coordinate.
    """
    idx: np.ndarray
    wv: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    n_rows: int

    def gather(self, table):
        """table (rows, C) -> (corner values (4, P, C), sampled (P, C))."""
        corners = table[self.idx.reshape(4, -1)]
        wv = self.wv.reshape(4, -1, 1)
        sampled = corners[0] * wv[0]
        for c in range(1, 4):
            sampled += corners[c] * wv[c]
        return corners, sampled

    def scatter(self, grad):
        """Adjoint of :meth:`gather`: grad (P, C) -> (rows, C)."""
        p = grad.shape[0]
        mat = sparse.csr_matrix(
            (self.wv.reshape(4, -1).T.reshape(-1),
             self.idx.reshape(4, -1).T.reshape(-1),
             np.arange(0, 4 * p + 1, 4)),
            shape=(p, self.n_rows))
        return np.asarray(mat.T @ grad)

    def coord_grads(self, corners, grad):
        """Gradients w.r.t. the x and y coordinate of each of the P points."""
        dots = np.einsum("kpc,pc->kp", corners, grad)
        gx = (self.wx.reshape(4, -1) * dots).sum(axis=0)
        gy = (self.wy.reshape(4, -1) * dots).sum(axis=0)
        return gx, gy


def bilinear_taps(xs, ys, height, width):
    """Corner indices/weights for coordinates of shape (N, ...).

    Points of batch item ``n`` read rows ``n*H*W ... (n+1)*H*W - 1``.
    """
    n = xs.shape[0]
    dtype = xs.dtype
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    lx = xs - x0
    ly = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    one = dtype.type(1)
    corners = (
        (y0, x0, (one - ly) * (one - lx), -(one - ly), -(one - lx)),
        (y0, x0 + 1, (one - ly) * lx, (one - ly), -lx),
        (y0 + 1, x0, ly * (one - lx), -ly, (one - lx)),
        (y0 + 1, x0 + 1, ly * lx, ly, lx),
    )
    base = (np.arange(n, dtype=np.int64) * (height * width)).reshape((n,) + (1,) * (xs.ndim - 1))
    shape = (4,) + xs.shape
    idx = np.empty(shape, dtype=np.int64)
    wv = np.empty(shape, dtype=dtype)
    wx = np.empty(shape, dtype=dtype)
    wy = np.empty(shape, dtype=dtype)
    for c, (yy, xx, v, ddx, ddy) in enumerate(corners):
        valid = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
        idx[c] = base + np.clip(yy, 0, height - 1) * width + np.clip(xx, 0, width - 1)
        wv[c] = np.where(valid, v, 0)
        wx[c] = np.where(valid, ddx, 0)
        wy[c] = np.where(valid, ddy, 0)
    return BilinearTaps(idx, wv, wx, wy, n * height * width)


def bilinear_sample_points(feature, xs, ys):
    """Vectorised sampling. feature (N, C, H, W), xs/ys (N, P) -> (N, C, P)."""
    _check_4d(feature, "feature")
    if xs.shape != ys.shape or xs.ndim != 2 or xs.shape[0] != feature.shape[0]:
        raise ShapeError(f"coordinate arrays {xs.shape}/{ys.shape} do not match feature {feature.shape}")
    n, c, h, w = feature.shape
    taps = bilinear_taps(xs, ys, h, w)
    table = feature.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    corners, vals = taps.gather(table)
    return vals.reshape(n, -1, c).transpose(0, 2, 1), (taps, corners)


def bilinear_sample_points_backward(feature, cache, grad_out):
    """Gradients of :func:`bilinear_sample_points` w.r.t. feature, xs and ys."""
    taps, corners = cache
    n, c, h, w = feature.shape
    g = grad_out.transpose(0, 2, 1).reshape(-1, c)
    grad_f = taps.scatter(g).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    gx, gy = taps.coord_grads(corners, g)
    return np.ascontiguousarray(grad_f), gx.reshape(n, -1), gy.reshape(n, -1)


# --------------------------------------------------------------------------
# softmax over the leading (row) index of each column


def softmax_columns(s):
    """Normalise each column of ``s`` (or of each matrix in a batch) to sum 1."""
    if s.ndim < 2:
        raise ShapeError(f"softmax_columns expects a matrix, got shape {s.shape}")
    e = np.exp(s - s.max(axis=-2, keepdims=True))
    return e / e.sum(axis=-2, keepdims=True)


def softmax_columns_backward(y, grad_out):
    return y * (grad_out - (grad_out * y).sum(axis=-2, keepdims=True))


# --------------------------------------------------------------------------
# elementwise and reductions


def sigmoid(x):
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(y, grad_out):
    return grad_out * y * (1 - y)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(a, b, grad_out):
    return grad_out @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad_out


def mul(a, b):
    _same_shape(a, b, "mul")
    return a * b


def mul_backward(a, b, grad_out):
    return grad_out * b, grad_out * a


def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


def channel_scale(x, scale):
    """Multiply each channel of x (N, C, H, W) by scale (N, C) or x by a (N, 1, H, W) map."""
    _check_4d(x)
    if scale.ndim == 2:
        if scale.shape != x.shape[:2]:
            raise ShapeError(f"channel_scale: scale {scale.shape} vs input {x.shape}")
        return x * scale[:, :, None, None]
    if scale.ndim == 4 and scale.shape[1] == 1 and scale.shape[0] == x.shape[0] \
            and scale.shape[2:] == x.shape[2:]:
        return x * scale
    raise ShapeError(f"channel_scale: cannot broadcast {scale.shape} over {x.shape}")


def channel_scale_backward(x, scale, grad_out):
    if scale.ndim == 2:
        return grad_out * scale[:, :, None, None], (grad_out * x).sum(axis=(2, 3))
    return grad_out * scale, (grad_out * x).sum(axis=1, keepdims=True)


def concat_channels(xs):
    for t in xs:
        _check_4d(t)
    ref = xs[0]
    for t in xs[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref.shape} and {t.shape}")
    return np.concatenate(xs, axis=1)


def concat_channels_backward(sizes, grad_out):
    splits = np.cumsum(sizes)[:-1]
    return np.split(grad_out, splits, axis=1)


def global_avg_pool(x):
    _check_4d(x)
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_out):
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).copy()


def _check_even(x, what):
    _check_4d(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{what}: spatial dims must be even, got {x.shape[2:]}")


def max_pool2(x):
    _check_even(x, "max_pool2")
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool2_backward(x_shape, arg, grad_out):
    n, c, h, w = x_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, arg[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def avg_pool2(x):
    _check_even(x, "avg_pool2")
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(x_shape, grad_out):
    g = np.repeat(np.repeat(grad_out, 2, axis=2), 2, axis=3)
    return g * 0.25


# --------------------------------------------------------------------------
# bilinear resizing


def resize_matrix(out_size, in_size, dtype=np.float64):
    """Row-stochastic (out_size, in_size) matrix for 1-D linear resizing (read-only, cached)."""
    return _resize_matrix(int(out_size), int(in_size), np.dtype(dtype))


@lru_cache(maxsize=256)
def _resize_matrix(out_size, in_size, dtype):
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1 - lam)
    np.add.at(m, (rows, i1), lam)
    m.setflags(write=False)
    return m


def upsample_bilinear(x, size=None, scale=2):
    """Resize (N, C, H, W) to ``size`` (H', W'), or by an integer ``scale``."""
    _check_4d(x)
    h, w = x.shape[2:]
    oh, ow = size if size is not None else (h * scale, w * scale)
    mh = resize_matrix(oh, h, x.dtype)
    mw = resize_matrix(ow, w, x.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(mh, x), mw.T))


def upsample_bilinear_backward(x_shape, grad_out):
    h, w = x_shape[2:]
    oh, ow = grad_out.shape[2:]
    mh = resize_matrix(oh, h, grad_out.dtype)
    mw = resize_matrix(ow, w, grad_out.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(mh.T, grad_out), mw))
