"""Top-down attention propagation decoder with side-mask deep supervision.

Level 5 starts from ``P5 = (V5 * Z) * GAP(Z)``; every lower level gates its
skip feature with the upsampled mask of the level above before merging:

    V~_l = up(M_{l+1}) * V_l
    P_l  = xi1_l(up(P_{l+1}) + tau_l(V~_l))
    M_l  = sigmoid(xi2_l(P_l))
"""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from imcnet.errors import ShapeError
from imcnet.tensor import ops
from imcnet.tensor.layers import Conv2d, Module, ReLU, ResidualBlock, Sequential, Sigmoid


@dataclass
class DecoderState:
    P: Dict[int, np.ndarray] = field(default_factory=dict)
    masks: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def P2(self):
        return self.P[2]


class MaskHead(Module):
    """Two convolutions down to one channel, then a sigmoid."""

    def __init__(self, ch=64, mid=32, rng=None):
        super().__init__()
        self.body = Sequential(Conv2d(ch, mid, 3, rng=rng), ReLU(), Conv2d(mid, 1, 1, rng=rng, gain=1.0))
        self.act = Sigmoid()

    def forward(self, x):
        return self.act(self.body(x))

    def backward(self, grad):
        return self.body.backward(self.act.backward(grad))


def apm_head(v5, z, mask_head):
    """Return (P5, M5, cache)."""
    if v5.shape != z.shape:
        raise ShapeError(f"apm_head: V5 {v5.shape} and Z {z.shape} must match")
    gap = ops.global_avg_pool(z)
    p5 = ops.channel_scale(v5 * z, gap)
    return p5, mask_head(p5), gap


class APM(Module):
    def __init__(self, level_channels=(16, 32, 48, 64), width=64, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.level_channels = dict(zip((2, 3, 4, 5), level_channels))
        if self.level_channels[5] != width:
            raise ShapeError(f"level-5 channels ({self.level_channels[5]}) must equal decoder width {width}")
        self.head5 = MaskHead(width, rng=rng)
        for lvl in (4, 3, 2):
            setattr(self, f"tau{lvl}", Sequential(
                Conv2d(self.level_channels[lvl], width, 3, rng=rng), ReLU(), ResidualBlock(width, width, rng=rng)))
            setattr(self, f"xi1_{lvl}", ResidualBlock(width, width, rng=rng))
            setattr(self, f"head{lvl}", MaskHead(width, rng=rng))

    def _mods(self, lvl):
        return getattr(self, f"tau{lvl}"), getattr(self, f"xi1_{lvl}"), getattr(self, f"head{lvl}")

    def step(self, lvl, v, p_next, m_next, gate=None):
        """One propagation step; ``gate`` overrides the upsampled guide map."""
        tau, xi1, head = self._mods(lvl)
        up_m = ops.upsample_bilinear(m_next) if gate is None else gate
        if up_m.shape[2:] != v.shape[2:]:
            raise ShapeError(f"level {lvl}: upsampled guide {up_m.shape[2:]} vs skip feature {v.shape[2:]}")
        v_tilde = ops.channel_scale(v, up_m)
        p = xi1(ops.upsample_bilinear(p_next) + tau(v_tilde))
        return p, head(p), (v, up_m, p_next.shape, m_next.shape)

    def forward(self, pyramid, z, gates=None):
        """pyramid: mapping level -> (N, C_l, h_l, w_l); z: (N, 64, h5, w5)."""
        gates = gates or {}
        state = DecoderState()
        p5, m5, gap = apm_head(pyramid[5], z, self.head5)
        state.P[5], state.masks[5] = p5, m5
        caches = {5: (pyramid[5], z, gap)}
        for lvl in (4, 3, 2):
            p, m, caches[lvl] = self.step(lvl, pyramid[lvl], state.P[lvl + 1], state.masks[lvl + 1],
                                          gates.get(lvl))
            state.P[lvl], state.masks[lvl] = p, m
        self._cache = caches
        return state

    def backward(self, grad_p2, grad_masks):
        """Return (grad per pyramid level, grad_z). ``grad_masks`` maps level -> grad."""
        caches = self._cache
        self._cache = None
        g_m = {lvl: grad_masks.get(lvl) for lvl in (2, 3, 4, 5)}
        g_p = {2: grad_p2}
        g_v = {}
        for lvl in (2, 3, 4):
            tau, xi1, head = self._mods(lvl)
            v, up_m, p_next_shape, m_next_shape = caches[lvl]
            gp = g_p.get(lvl)
            if g_m[lvl] is not None:
                gh = head.backward(g_m[lvl])
                gp = gh if gp is None else gp + gh
            gsum = xi1.backward(gp)
            g_p[lvl + 1] = ops.upsample_bilinear_backward(p_next_shape, gsum)
            gvt = tau.backward(gsum)
            g_v[lvl] = gvt * up_m
            g_up = (gvt * v).sum(axis=1, keepdims=True)
            gm_next = ops.upsample_bilinear_backward(m_next_shape, g_up)
            g_m[lvl + 1] = gm_next if g_m[lvl + 1] is None else g_m[lvl + 1] + gm_next
        v5, z, gap = caches[5]
        gp5 = g_p[5] + self.head5.backward(g_m[5])
        g_prod, g_gap = ops.channel_scale_backward(v5 * z, gap, gp5)
        g_v[5] = g_prod * z
        g_z = g_prod * v5 + ops.global_avg_pool_backward(z.shape, g_gap)
        return g_v, g_z
