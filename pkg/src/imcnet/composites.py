"""Gradient-check cases for composite modules (64-bit, tiny widths).

Every parameter is re-drawn at random, including the zero-initialised
offset convolutions, so the deformable path samples at fractional
positions. Steps that straddle a ReLU, max-pool or bilinear kink are
handled by the kink-tolerant comparison in the gradient checker.
"""
import numpy as np

from imcnet.acm import ACM
from imcnet.apm import APM
from imcnet.encoder import Encoder
from imcnet.mcm.module import MCM, TSC, AlignStage, CascadeAlign, SegmentHead
from imcnet.model import IMCNet
from imcnet.tensor.gradcheck import GradCase, register

EPS = 1e-6


def _randomise(module, rng):
    """float64 copy of every parameter, re-drawn with He-normal scale (biases 0.1)."""
    module.astype(np.float64)
    for _, p in module.named_parameters():
        std = (2.0 / np.prod(p.shape[1:])) ** 0.5 if p.data.ndim > 1 else 0.1
        p.data[...] = rng.standard_normal(p.shape) * std
    return module


def _module_case(module, inputs, input_names, forward, backward, rng,
                 n_params=None, max_checks=24, named=None):
    """Wrap a module as a GradCase over its inputs and (a subset of) its parameters."""
    named = list(module.named_parameters()) if named is None else named
    if n_params is not None and n_params < len(named):
        keep = sorted(rng.choice(len(named), size=n_params, replace=False))
        named = [named[i] for i in keep]

    def bwd(r):
        module.zero_grad()
        forward()
        grads = backward(r)
        return list(grads) + [p.grad.copy() for _, p in named]

    return GradCase(forward, bwd, list(inputs) + [p.data for _, p in named],
                    list(input_names) + [n for n, _ in named], eps=EPS, max_checks=max_checks,
                    kink_tolerant=True)


def _flat(*arrays):
    return np.concatenate([a.reshape(-1) for a in arrays])


def _split(r, shapes):
    out, start = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(r[start:start + size].reshape(s))
        start += size
    return out


@register("key_encoder")
def key_encoder_case(rng):
    acm = _randomise(ACM(5, 4, rng=rng), rng)
    v5 = rng.standard_normal((3, 5, 3, 3))
    return _module_case(acm.key_encoder, [v5], ["v5"], lambda: acm.encode_keys(v5),
                        lambda r: [acm.key_encoder.backward(r)], rng)


@register("acm")
def acm_case(rng):
    acm = _randomise(ACM(5, 4, rng=rng), rng)
    v5 = rng.standard_normal((6, 5, 2, 3))
    return _module_case(acm, [v5], ["v5"], lambda: acm(v5, 3), lambda r: [acm.backward(r)], rng)


@register("apm")
def apm_case(rng):
    apm = _randomise(APM((3, 4, 5, 6), 6, rng=rng), rng)
    pyr = {lvl: rng.standard_normal((2, c, 2 ** (6 - lvl), 2 ** (6 - lvl)))
           for lvl, c in zip((2, 3, 4, 5), (3, 4, 5, 6))}
    z = rng.standard_normal(pyr[5].shape)
    shapes = {}

    def fwd():
        st = apm(pyr, z)
        shapes["p2"] = st.P2.shape
        shapes["m"] = [st.masks[lvl].shape for lvl in (2, 3, 4, 5)]
        return _flat(st.P2, *(st.masks[lvl] for lvl in (2, 3, 4, 5)))

    def bwd(r):
        parts = _split(r, [shapes["p2"]] + shapes["m"])
        g_v, g_z = apm.backward(parts[0], dict(zip((2, 3, 4, 5), parts[1:])))
        return [g_v[lvl] for lvl in (2, 3, 4, 5)] + [g_z]

    return _module_case(apm, [pyr[lvl] for lvl in (2, 3, 4, 5)] + [z],
                        ["V2", "V3", "V4", "V5", "Z"], fwd, bwd, rng, n_params=12, max_checks=16)


@register("offset_generator")
def offset_generator_case(rng):
    stage = _randomise(AlignStage(4, rng=rng), rng)
    f_ref = rng.standard_normal((2, 4, 5, 5))
    f_prev = rng.standard_normal((2, 4, 5, 5))

    def bwd(r):
        g = stage.reduce.backward(stage.offset.backward(r))
        return [g[:, :4], g[:, 4:]]

    return _module_case(stage, [f_ref, f_prev], ["f_ref", "f_prev"],
                        lambda: stage.generate_offsets(f_ref, f_prev), bwd, rng)


@register("cascade_align")
def cascade_align_case(rng):
    cascade = _randomise(CascadeAlign(4, depth=2, rng=rng), rng)
    f_ref = rng.standard_normal((2, 4, 5, 5))
    f_nbr = rng.standard_normal((2, 4, 5, 5))
    return _module_case(cascade, [f_ref, f_nbr], ["f_ref", "f_nbr"],
                        lambda: cascade(f_ref, f_nbr), lambda r: list(cascade.backward(r)), rng)


@register("tsc")
def tsc_case(rng):
    tsc = _randomise(TSC(4, 3, rng=rng), rng)
    frames = rng.standard_normal((2, 3, 4, 4, 6))
    f_ref = frames[:, 1].copy()
    return _module_case(tsc, [frames, f_ref], ["frames", "f_ref"],
                        lambda: tsc(frames, f_ref), lambda r: list(tsc.backward(r)), rng)


@register("segment_head")
def segment_head_case(rng):
    head = _randomise(SegmentHead(4, rng=rng), rng)
    f = rng.standard_normal((2, 4, 4, 4))
    return _module_case(head, [f], ["f"], lambda: head(f, (8, 8)), lambda r: [head.backward(r)], rng)


@register("mcm")
def mcm_case(rng):
    mcm = _randomise(MCM(4, depth=2, n_frames=3, rng=rng), rng)
    p2 = rng.standard_normal((3, 4, 4, 4))
    return _module_case(mcm, [p2], ["P2"], lambda: mcm(p2, (8, 8)), lambda r: [mcm.backward(r)],
                        rng, n_params=10)


@register("encoder")
def encoder_case(rng):
    enc = _randomise(Encoder((2, 3, 3, 4), rng=rng), rng)
    x = rng.uniform(size=(1, 3, 32, 32))
    shapes = {}

    def fwd():
        pyr = enc(x)
        shapes["l"] = [pyr[lvl].shape for lvl in (2, 3, 4, 5)]
        return _flat(*(pyr[lvl] for lvl in (2, 3, 4, 5)))

    def bwd(r):
        return [enc.backward(dict(zip((2, 3, 4, 5), _split(r, shapes["l"]))))]

    return _module_case(enc, [x], ["frames"], fwd, bwd, rng, n_params=6)


@register("imcnet")
def imcnet_case(rng):
    # 64x64 gives the ACM several positions per frame; with one position its
    # gradients are ~1e-10 and drown in rounding noise
    net = IMCNet(n=1, key_channels=4, channels=8, cascade_depth=1,
                 encoder_channels=(4, 6, 8, 8), seed=int(rng.integers(1 << 31)))
    _randomise(net, rng)
    clips = rng.uniform(size=(1, 3, 3, 64, 64))
    shapes = {}

    def fwd():
        out = net(clips)
        shapes["mask"] = out.mask.shape
        shapes["side"] = [out.side[lvl].shape for lvl in (2, 3, 4, 5)]
        return _flat(out.mask, *(out.side[lvl] for lvl in (2, 3, 4, 5)))

    def bwd(r):
        parts = _split(r, [shapes["mask"]] + shapes["side"])
        return [net.backward(parts[0], dict(zip((2, 3, 4, 5), parts[1:]))).reshape(clips.shape)]

    # one parameter per top-level module, among those whose gradient is within
    # 1e-2 of the largest: smaller ones drown in float64 rounding noise at
    # this depth and are covered by the per-module cases
    net.zero_grad()
    fwd()
    bwd(rng.standard_normal(int(sum(np.prod(s) for s in [shapes["mask"]] + shapes["side"]))))
    scale = {n: float(np.abs(p.grad).max()) for n, p in net.named_parameters()}
    top = max(scale.values())
    named = []
    for group in ("encoder", "acm", "apm", "mcm"):
        ok = [(n, p) for n, p in net.named_parameters()
              if n.startswith(group + ".") and scale[n] >= 1e-2 * top]
        if ok:
            named.append(ok[int(rng.integers(len(ok)))])
    return _module_case(net, [clips], ["clips"], fwd, bwd, rng, max_checks=8, named=named)
