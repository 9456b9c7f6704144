"""Clip sampling around a centre frame and conversion to network batches."""
from dataclasses import dataclass
from typing import List

import numpy as np

from imcnet.errors import DatasetError


@dataclass
class ClipSample:
    frames: List[np.ndarray]      # 2N+1 frames (H, W, 3) uint8, temporally ordered
    masks: List[np.ndarray]       # 2N+1 binary masks (H, W) uint8
    center: int                   # index t of the centre frame in the source
    step: int                     # frame interval dt
    source: str = ""
    indices: tuple = ()

    def __post_init__(self):
        if len(self.frames) != len(self.masks) or len(self.frames) % 2 == 0:
            raise DatasetError(f"a clip needs 2N+1 frames and masks, got {len(self.frames)}/{len(self.masks)}")

    @property
    def n(self):
        return len(self.frames) // 2


def clip_indices(length, t, n=1, dt=4):
    """Indices t-n*dt ... t+n*dt, clamped to [0, length-1]."""
    if length < 1:
        raise DatasetError("cannot sample a clip from an empty sequence")
    if not 0 <= t < length:
        raise DatasetError(f"centre index {t} outside a sequence of {length} frames")
    return tuple(min(max(t + k * dt, 0), length - 1) for k in range(-n, n + 1))


def sample_clip(sequence, t, n=1, dt=4):
    """``sequence`` exposes ``len()``, ``frame(i)``, ``mask(i)`` and ``name``."""
    idx = clip_indices(len(sequence), t, n, dt)
    return ClipSample([sequence.frame(i) for i in idx], [sequence.mask(i) for i in idx],
                      t, dt, getattr(sequence, "name", ""), idx)


def static_clip(image, mask, n=1, source=""):
    """A single image replicated into a 2N+1-frame clip."""
    k = 2 * n + 1
    return ClipSample([image] * k, [mask] * k, 0, 0, source, (0,) * k)


def clips_to_arrays(clips):
    """Stack clips into ``x`` (B, T, 3, H, W) float32 in [0, 1] and ``y`` (B, T, 1, H, W) float32."""
    if not clips:
        raise DatasetError("empty batch")
    shapes = {c.frames[0].shape for c in clips}
    if len(shapes) != 1:
        raise DatasetError(f"clips in one batch must share a frame size, got {sorted(shapes)}")
    x = np.stack([np.stack(c.frames) for c in clips]).astype(np.float32) / 255.0
    y = np.stack([np.stack(c.masks) for c in clips]).astype(np.float32)
    return np.ascontiguousarray(x.transpose(0, 1, 4, 2, 3)), y[:, :, None]
