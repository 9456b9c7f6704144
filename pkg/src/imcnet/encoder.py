"""Shared-weight convolutional pyramid producing features at strides 4/8/16/32."""
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from imcnet.errors import ShapeError
from imcnet.tensor.layers import Conv2d, Module, ModuleList, ReLU, Sequential

LEVELS = (2, 3, 4, 5)
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


@dataclass
class EncoderConfig:
    channels: Tuple[int, ...] = (16, 32, 48, 64)
    input_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ShapeError(f"encoder needs 4 level channel counts, got {self.channels}")
        if list(self.channels) != sorted(self.channels):
            raise ShapeError(f"encoder channels must be non-decreasing, got {self.channels}")
        check_divisible(self.input_size)


@dataclass
class FramePyramid:
    """Per-frame feature stack; ``levels[l]`` is (N, C_l, H / 2**l, W / 2**l)."""
    levels: Dict[int, np.ndarray] = field(default_factory=dict)
    frame_index: int = 0

    def __getitem__(self, level):
        return self.levels[level]


def check_divisible(size):
    h, w = size
    if h % 32 or w % 32:
        raise ShapeError(f"input height and width must be divisible by 32, got {h}x{w}")


class Encoder(Module):
    """Stem conv (stride 2) then four [conv s2 -> relu -> conv -> relu] stages."""

    def __init__(self, channels=(16, 32, 48, 64), rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = tuple(channels)
        self.stem = Sequential(Conv2d(3, channels[0], 3, stride=2, rng=rng), ReLU())
        stages = []
        in_ch = channels[0]
        for out_ch in channels:
            stages.append(Sequential(
                Conv2d(in_ch, out_ch, 3, stride=2, rng=rng), ReLU(),
                Conv2d(out_ch, out_ch, 3, rng=rng), ReLU(),
            ))
            in_ch = out_ch
        self.stages = ModuleList(stages)

    def forward(self, frames):
        """frames (N, 3, H, W) in [0, 1] -> FramePyramid over the batch."""
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"encoder expects (N, 3, H, W) frames, got {frames.shape}")
        check_divisible(frames.shape[2:])
        x = self.stem(frames)
        pyr = FramePyramid()
        for level, stage in zip(LEVELS, self.stages):
            x = stage(x)
            pyr.levels[level] = x
        return pyr

    def backward(self, grads):
        """grads: mapping level -> gradient (missing levels count as zero)."""
        g = None
        for level, stage in zip(reversed(LEVELS), reversed(self.stages._items)):
            gl = grads.get(level)
            if gl is not None:
                g = gl if g is None else g + gl
            g = stage.backward(g)
        return self.stem.backward(g)


def receptive_fields(n_stages=4):
    """Receptive field size (pixels) at each pyramid level, from layer bookkeeping."""
    rf, jump = 1, 1
    layers = [(3, 2)] + [(3, 2), (3, 1)] * n_stages
    out = {}
    for i, (k, s) in enumerate(layers):
        rf += (k - 1) * jump
        jump *= s
        if i >= 2 and i % 2 == 0:
            out[LEVELS[(i - 2) // 2]] = rf
    return out

