"""Hybrid segmentation loss (BCE + SSIM + soft IoU) and deep supervision.

Each loss accepts a single (H, W) map or a batch (N, 1, H, W) / (N, H, W);
batched inputs return the mean of per-image losses. With
``return_grad=True`` the gradient w.r.t. ``pred`` is returned as well.
Values are accumulated in float64.
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List

import numpy as np

from imcnet.errors import ShapeError
from imcnet.tensor import ops
from imcnet.tensor.gradcheck import GradCase, register

BCE_CLAMP = 1e-7
IOU_EPS = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_batch(pred, gt, what):
    if pred.shape != gt.shape:
        raise ShapeError(f"{what}: prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.ndim == 2:
        shape = (1,) + pred.shape
    elif pred.ndim == 3:
        shape = pred.shape
    elif pred.ndim == 4 and pred.shape[1] == 1:
        shape = (pred.shape[0],) + pred.shape[2:]
    else:
        raise ShapeError(f"{what}: expected single-channel maps, got {pred.shape}")
    return (pred.reshape(shape).astype(np.float64), gt.reshape(shape).astype(np.float64))


def _finish(vals, grad, pred, return_grad):
    loss = float(vals.mean())
    if not return_grad:
        return loss
    return loss, (grad / vals.size).reshape(pred.shape).astype(pred.dtype)


def bce_per_image(p, g):
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    npix = p.shape[1] * p.shape[2]
    vals = -(g * np.log(pc) + (1 - g) * np.log(1 - pc)).sum(axis=(1, 2)) / npix
    inside = (p > BCE_CLAMP) & (p < 1 - BCE_CLAMP)
    grad = -(g / pc - (1 - g) / (1 - pc)) / npix * inside
    return vals, grad


def iou_per_image(p, g):
    inter = (p * g).sum(axis=(1, 2))
    union = p.sum(axis=(1, 2)) + g.sum(axis=(1, 2)) - inter
    vals = 1 - (inter + IOU_EPS) / (union + IOU_EPS)
    u = (union + IOU_EPS)[:, None, None]
    i = (inter + IOU_EPS)[:, None, None]
    grad = -(g * u - i * (1 - g)) / u ** 2
    return vals, grad


@lru_cache(maxsize=32)
def gaussian_blur_matrix(n):
    """(n, n) matrix of the 11-tap Gaussian filter with reflection padding."""
    if n < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs maps of at least {SSIM_WINDOW} pixels per side, got {n}")
    half = SSIM_WINDOW // 2
    taps = np.exp(-(np.arange(-half, half + 1) ** 2) / (2 * SSIM_SIGMA ** 2))
    taps /= taps.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for j, wt in zip(range(i - half, i + half + 1), taps):
            src = -j if j < 0 else (2 * (n - 1) - j if j > n - 1 else j)
            m[i, src] += wt
    m.setflags(write=False)
    return m


def ssim_map(x, y):
    """Windowed SSIM of batches (N, H, W); returns the map and its intermediates."""
    bh = gaussian_blur_matrix(x.shape[1])
    bw = gaussian_blur_matrix(x.shape[2])

    def blur(a):
        return bh @ a @ bw.T

    mu_x, mu_y = blur(x), blur(y)
    e_xx, e_yy, e_xy = blur(x * x), blur(y * y), blur(x * y)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (e_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = (e_xx - mu_x ** 2) + (e_yy - mu_y ** 2) + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    return s, (bh, bw, mu_x, mu_y, a1, a2, b1, b2)


def ssim_per_image(p, g):
    s, (bh, bw, mu_x, mu_y, a1, a2, b1, b2) = ssim_map(p, g)
    npix = p.shape[1] * p.shape[2]
    vals = 1 - s.mean(axis=(1, 2))
    ds = -np.ones_like(s) / npix
    d_mu = ds * s * (2 * mu_y / a1 - 2 * mu_y / a2 - 2 * mu_x / b1 + 2 * mu_x / b2)
    d_exx = ds * (-s / b2)
    d_exy = ds * (2 * s / a2)

    def blur_t(a):
        return bh.T @ a @ bw

    grad = blur_t(d_mu) + 2 * p * blur_t(d_exx) + g * blur_t(d_exy)
    return vals, grad


def bce_loss(pred, gt, return_grad=False):
    p, g = _as_batch(pred, gt, "bce_loss")
    return _finish(*bce_per_image(p, g), pred, return_grad)


def ssim_loss(pred, gt, return_grad=False):
    p, g = _as_batch(pred, gt, "ssim_loss")
    return _finish(*ssim_per_image(p, g), pred, return_grad)


def iou_loss(pred, gt, return_grad=False):
    p, g = _as_batch(pred, gt, "iou_loss")
    return _finish(*iou_per_image(p, g), pred, return_grad)


def hybrid_per_image(p, g):
    """Per-image (bce, ssim, iou) values and the gradient of their sum."""
    vb, gb = bce_per_image(p, g)
    vs, gs = ssim_per_image(p, g)
    vi, gi = iou_per_image(p, g)
    return (vb, vs, vi), gb + gs + gi


def segmentation_loss(pred, gt, return_grad=False):
    p, g = _as_batch(pred, gt, "segmentation_loss")
    (vb, vs, vi), grad = hybrid_per_image(p, g)
    return _finish(vb + vs + vi, grad, pred, return_grad)


@dataclass
class LossBreakdown:
    bce: float
    ssim: float
    iou: float
    total: float
    final: float = 0.0
    side_totals: List[Dict[int, float]] = field(default_factory=list)
    n_terms: int = 1

    def as_dict(self):
        return {"total": self.total, "final": self.final, "bce": self.bce,
                "ssim": self.ssim, "iou": self.iou}


def total_loss(final_pred, final_gt, side_preds, side_gts):
    """Deeply supervised loss for a batch of B clips of T frames.

    final_pred/final_gt: (B, 1, H, W); side_preds: level -> (B*T, 1, h_l, w_l);
    side_gts: (B*T, 1, H, W). Side maps are bilinearly resized to H x W.
    The batch loss is the mean over clips of

        L(final) + sum_i sum_l L(side_i^l)

    Returns ``(LossBreakdown, grad_final, {level: grad_side})``.
    """
    if not side_preds:
        raise ShapeError("total_loss: no side outputs given")
    b = final_pred.shape[0]
    bt = side_gts.shape[0]
    if bt % b:
        raise ShapeError(f"side ground truth count {bt} is not a multiple of the batch {b}")
    t = bt // b
    out_size = final_gt.shape[2:]
    (fb, fs, fi), g_final = hybrid_per_image(*_as_batch(final_pred, final_gt, "final loss"))
    final_vals = fb + fs + fi
    bce, ssim, iou = fb.sum(), fs.sum(), fi.sum()
    side_totals = [dict() for _ in range(bt)]
    g_side = {}
    for lvl in sorted(side_preds):
        sp = side_preds[lvl]
        if sp.shape[0] != bt:
            raise ShapeError(f"level {lvl}: {sp.shape[0]} side maps for {bt} frames")
        up = ops.upsample_bilinear(sp.astype(np.float64), size=out_size)
        (vb, vs, vi), g = hybrid_per_image(*_as_batch(up, side_gts, f"side loss level {lvl}"))
        bce, ssim, iou = bce + vb.sum(), ssim + vs.sum(), iou + vi.sum()
        for i, v in enumerate(vb + vs + vi):
            side_totals[i][lvl] = float(v)
        g_side[lvl] = (ops.upsample_bilinear_backward(sp.shape, g[:, None]) / b).astype(sp.dtype)
    total = float((final_vals.sum() + sum(sum(d.values()) for d in side_totals)) / b)
    br = LossBreakdown(bce=float(bce / b), ssim=float(ssim / b), iou=float(iou / b), total=total,
                       final=float(final_vals.mean()), side_totals=side_totals,
                       n_terms=1 + t * len(side_preds))
    g_final = (g_final[:, None] / b).astype(final_pred.dtype)
    return br, g_final, g_side


def _loss_case(fn, rng):
    p = rng.uniform(0.05, 0.95, size=(2, 1, 12, 13))
    g = (rng.uniform(size=p.shape) > 0.5).astype(np.float64)

    def fwd():
        return np.array(fn(p, g))

    def bwd(r):
        return [fn(p, g, return_grad=True)[1] * float(r)]

    # log curvature near 0/1 makes a 1e-3 step too coarse for a 1e-5 bound
    return GradCase(fwd, bwd, [p], ["pred"], eps=1e-5)


@register("bce_loss")
def _bce_case(rng):
    return _loss_case(bce_loss, rng)


@register("ssim_loss")
def _ssim_case(rng):
    return _loss_case(ssim_loss, rng)


@register("iou_loss")
def _iou_case(rng):
    return _loss_case(iou_loss, rng)


@register("total_loss")
def _total_case(rng):
    b, t, h, w = 1, 3, 16, 16
    final = rng.uniform(0.05, 0.95, size=(b, 1, h, w))
    gt = (rng.uniform(size=(b * t, 1, h, w)) > 0.5).astype(np.float64)
    sides = {lvl: rng.uniform(0.05, 0.95, size=(b * t, 1, h // s, w // s))
             for lvl, s in ((2, 2), (3, 4), (4, 8), (5, 16))}
    arrays = [final] + [sides[k] for k in sorted(sides)]

    def fwd():
        return np.array(total_loss(final, gt[1:2], sides, gt)[0].total)

    def bwd(r):
        _, gf, gs = total_loss(final, gt[1:2], sides, gt)
        return [gf * float(r)] + [gs[k] * float(r) for k in sorted(gs)]

    return GradCase(fwd, bwd, arrays, ["final"] + [f"side{k}" for k in sorted(sides)],
                    eps=1e-5, max_checks=40)
