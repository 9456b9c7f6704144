"""Affinity computing: factorised cross-frame co-attention on stride-32 features.

Keys of all 2N+1 frames of a clip are flattened spatially and concatenated
along the position axis. The affinity ``S = (P^T K)^T (Q^T K)`` is
normalised over its row index for every column, and the attention summary
of frame ``i`` is ``V_all @ S_r[:, block_i]``.
"""
from dataclasses import dataclass
from typing import List

import numpy as np

from imcnet.errors import ShapeError
from imcnet.tensor import ops
from imcnet.tensor.layers import Conv2d, Module, ReLU, Sequential


@dataclass
class AffinityMatrix:
    S: np.ndarray
    S_r: np.ndarray
    blocks: List[slice]


def frames_to_positions(x, n_frames):
    """(B*T, C, h, w) -> (B, C, T*h*w) with frame-major position order."""
    bt, c, h, w = x.shape
    if bt % n_frames:
        raise ShapeError(f"batch {bt} is not a multiple of the clip length {n_frames}")
    b = bt // n_frames
    return x.reshape(b, n_frames, c, h * w).transpose(0, 2, 1, 3).reshape(b, c, n_frames * h * w)


def positions_to_frames(a, n_frames, h, w):
    b, c, _ = a.shape
    return np.ascontiguousarray(
        a.reshape(b, c, n_frames, h * w).transpose(0, 2, 1, 3).reshape(b * n_frames, c, h, w))


def compute_affinity(keys, p_weight, q_weight):
    """Affinity of one clip.

    keys: list of (1, C_k, h, w) key maps; p_weight/q_weight: (C_k, C_k)
    matrices P and Q, applied as ``P^T K`` and ``Q^T K``.
    """
    shapes = {k.shape for k in keys}
    if len(shapes) != 1:
        raise ShapeError(f"key maps must share one shape, got {sorted(shapes)}")
    k_all = frames_to_positions(np.concatenate(keys, axis=0), len(keys))[0]
    if p_weight.shape != (k_all.shape[0],) * 2 or q_weight.shape != p_weight.shape:
        raise ShapeError(f"projection matrices must be {(k_all.shape[0],) * 2}")
    s = (p_weight.T @ k_all).T @ (q_weight.T @ k_all)
    m = keys[0].shape[2] * keys[0].shape[3]
    blocks = [slice(i * m, (i + 1) * m) for i in range(len(keys))]
    return AffinityMatrix(s, ops.softmax_columns(s), blocks)


def attend_values(values, aff):
    """Z_i = V_all . S_r[:, block_i] for each frame, as (1, C_v, h, w) maps."""
    if len(values) != len(aff.blocks):
        raise ShapeError(f"{len(values)} value maps for {len(aff.blocks)} affinity blocks")
    v_all = frames_to_positions(np.concatenate(values, axis=0), len(values))[0]
    if v_all.shape[1] != aff.S_r.shape[0]:
        raise ShapeError(f"value positions {v_all.shape[1]} do not match affinity size {aff.S_r.shape[0]}")
    h, w = values[0].shape[2:]
    return [(v_all @ aff.S_r[:, blk]).reshape(1, -1, h, w) for blk in aff.blocks]


class ACM(Module):
    """Key encoder plus the P/Q projections (1x1 convs without bias)."""

    def __init__(self, value_ch=64, key_ch=64, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.key_encoder = Sequential(
            Conv2d(value_ch, key_ch, 3, rng=rng), ReLU(),
            Conv2d(key_ch, key_ch, 3, rng=rng, gain=1.0),
        )
        # 1/sqrt(C_k) gain keeps initial affinities O(1) so the softmax is not saturated
        self.proj_p = Conv2d(key_ch, key_ch, 1, bias=False, rng=rng, gain=key_ch ** -0.25)
        self.proj_q = Conv2d(key_ch, key_ch, 1, bias=False, rng=rng, gain=key_ch ** -0.25)

    def encode_keys(self, v5):
        return self.key_encoder(v5)

    @property
    def P(self):
        """P as a (C_k, C_k) matrix; the conv computes P^T K."""
        return self.proj_p.weight.data[:, :, 0, 0].T

    @property
    def Q(self):
        return self.proj_q.weight.data[:, :, 0, 0].T

    def forward(self, v5, n_frames):
        """v5 (B*T, C_v, h, w) for B clips of T frames -> Z of the same shape."""
        keys = self.key_encoder(v5)
        pk = frames_to_positions(self.proj_p(keys), n_frames)
        qk = frames_to_positions(self.proj_q(keys), n_frames)
        s = np.matmul(pk.transpose(0, 2, 1), qk)
        s_r = ops.softmax_columns(s)
        v_all = frames_to_positions(v5, n_frames)
        z_all = np.matmul(v_all, s_r)
        h, w = v5.shape[2:]
        self._cache = (n_frames, h, w, pk, qk, s_r, v_all)
        self.last_affinity = (s, s_r)
        return positions_to_frames(z_all, n_frames, h, w)

    def backward(self, grad_z):
        n_frames, h, w, pk, qk, s_r, v_all = self._cache
        self._cache = None
        gz = frames_to_positions(grad_z, n_frames)
        gv = np.matmul(gz, s_r.transpose(0, 2, 1))
        gsr = np.matmul(v_all.transpose(0, 2, 1), gz)
        gs = ops.softmax_columns_backward(s_r, gsr)
        gpk = np.matmul(qk, gs.transpose(0, 2, 1))
        gqk = np.matmul(pk, gs)
        gkeys = self.proj_p.backward(positions_to_frames(gpk, n_frames, h, w))
        gkeys = gkeys + self.proj_q.backward(positions_to_frames(gqk, n_frames, h, w))
        gv5 = self.key_encoder.backward(gkeys)
        return gv5 + positions_to_frames(gv, n_frames, h, w)
