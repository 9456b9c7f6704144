"""The full network: encoder -> ACM -> APM -> MCM, with an explicit backward."""
from dataclasses import dataclass
from typing import Dict

import numpy as np

from imcnet.acm import ACM
from imcnet.apm import APM
from imcnet.errors import ShapeError
from imcnet.encoder import Encoder, check_divisible
from imcnet.mcm import MCM
from imcnet.tensor.layers import Module

# parameter groups with separate learning rates
GROUPS = {"encoder": ("encoder",), "decoder": ("acm", "apm"), "mcm": ("mcm",)}


@dataclass
class ModelOutput:
    mask: np.ndarray                 # (B, 1, H, W)
    side: Dict[int, np.ndarray]      # level -> (B*T, 1, h_l, w_l)


class IMCNet(Module):
    def __init__(self, n=1, key_channels=64, channels=64, cascade_depth=4,
                 encoder_channels=(16, 32, 48, 64), seed=0, regular=False):
        super().__init__()
        if encoder_channels[-1] != channels:
            raise ShapeError(f"level-5 encoder channels {encoder_channels[-1]} must equal C={channels}")
        if n < 1:
            raise ShapeError(f"N must be >= 1, got {n}")
        rng = np.random.default_rng(seed)
        self.n = n
        self.n_frames = 2 * n + 1
        self.encoder = Encoder(encoder_channels, rng=rng)
        self.acm = ACM(encoder_channels[-1], key_channels, rng=rng)
        self.apm = APM(encoder_channels, channels, rng=rng)
        self.mcm = MCM(channels, cascade_depth, self.n_frames, rng=rng, regular=regular)

    def param_groups(self):
        groups = {}
        for gname, prefixes in GROUPS.items():
            groups[gname] = [p for name, p in self.named_parameters()
                             if name.split(".", 1)[0] in prefixes]
        return groups

    def forward(self, clips):
        """clips (B, T, 3, H, W) with T = 2N+1, centre frame at index N."""
        if clips.ndim != 5 or clips.shape[1] != self.n_frames or clips.shape[2] != 3:
            raise ShapeError(f"expected clips (B, {self.n_frames}, 3, H, W), got {clips.shape}")
        check_divisible(clips.shape[3:])
        b, t = clips.shape[:2]
        frames = clips.reshape((b * t,) + clips.shape[2:])
        pyr = self.encoder(frames)
        z = self.acm(pyr[5], t)
        state = self.apm(pyr.levels, z)
        mask = self.mcm(state.P2, clips.shape[3:])
        return ModelOutput(mask, dict(state.masks))

    def backward(self, grad_mask, grad_side):
        g_p2 = self.mcm.backward(grad_mask)
        g_levels, g_z = self.apm.backward(g_p2, grad_side)
        g_levels[5] = g_levels[5] + self.acm.backward(g_z)
        return self.encoder.backward(g_levels)


class Adam:
    """Adam with per-group learning rates (no weight decay)."""

    def __init__(self, groups, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(lrs[name], params) for name, params in groups.items()]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for lr, params in self.groups:
            for p in params:
                m, v = self.state.setdefault(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad * p.grad
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
