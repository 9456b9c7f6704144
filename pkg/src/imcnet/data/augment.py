"""Clip-level geometric augmentation: one flip/scale/rotation for all frames."""
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from imcnet.data.clips import ClipSample

MAX_ROTATION_DEG = 15.0
SCALE_RANGE = (0.9, 1.1)
MASK_THRESHOLD = 0.5


@dataclass(frozen=True)
class AffineParams:
    flip: bool = False
    scale: float = 1.0
    angle_deg: float = 0.0

    @classmethod
    def random(cls, rng):
        return cls(bool(rng.integers(2)), float(rng.uniform(*SCALE_RANGE)),
                   float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)))


def _source_coords(params, h, w):
    """Source (row, col) for every output pixel: inverse of flip -> scale/rotate about the centre."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    y, x = rows - cy, cols - cx
    a = math.radians(params.angle_deg)
    c, s = math.cos(a), math.sin(a)
    # undo the rotation and scale
    xs = (c * x + s * y) / params.scale
    ys = (-s * x + c * y) / params.scale
    if params.flip:
        xs = -xs
    return np.stack([ys + cy, xs + cx])


def warp_image(img, params):
    """Bilinear warp of an (H, W) or (H, W, C) array; edges replicate."""
    coords = _source_coords(params, *img.shape[:2])
    if img.ndim == 2:
        return ndimage.map_coordinates(img.astype(np.float64), coords, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., k].astype(np.float64), coords, order=1,
                                             mode="nearest") for k in range(img.shape[2])], axis=-1)


def warp_mask(mask, params):
    """Warp then threshold at 0.5; pixels from outside the mask count as background."""
    coords = _source_coords(params, *mask.shape)
    out = ndimage.map_coordinates(mask.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
    return (out >= MASK_THRESHOLD).astype(np.uint8)


def augment_clip(clip, rng=None, params=None):
    """Apply one random (or the given) transform to every frame and mask of ``clip``."""
    if params is None:
        params = AffineParams.random(rng if rng is not None else np.random.default_rng())
    frames = [np.clip(np.round(warp_image(f, params)), 0, 255).astype(np.uint8) for f in clip.frames]
    masks = [warp_mask(m, params) for m in clip.masks]
    return ClipSample(frames, masks, clip.center, clip.step, clip.source, clip.indices)
