"""Shared test machinery: reduced architectures, gradient-check closures,
and the conditioning filter that keeps finite differences meaningful.

Finite differences certify a gradient only at well-conditioned points:
away from ReLU kinks and pooling argmax ties (where the loss is not
differentiable) and away from degenerate batch-norm statistics (where
sensitivities explode). Each frozen seed below was selected by scanning
candidate seeds for those conditions; the filter itself is re-asserted at
test time. A signed linear probe is added to the checked loss so every
parameter's gradient is bounded away from zero; relative error at a
near-zero gradient would measure only floating-point noise.
"""

import numpy as np

from pix2affect import models
from pix2affect.layers import softmax_cross_entropy
from pix2affect.tensors import Rng

PROBE_WEIGHT = 0.05
BIAS_SHIFT = 0.2
KINK_MARGIN = 2e-4
BN_STD_FLOOR = 0.08
STEP_32BIT = 3e-6
STEP_64BIT = 1e-6
TOL_32BIT = 1e-3
TOL_64BIT = 1e-6

# Seeds satisfying the conditioning filter, found by scanning upward from 0.
GRADCHECK_SEEDS = {
    "frame2d": [7, 154, 213, 331, 568, 1051, 1282, 1601, 1906, 1923,
                1926, 2151, 2388, 2744, 2841, 2957, 3469, 3538, 3754, 3781],
    "seq2d": [69, 199, 542, 545, 549, 755, 831, 1094, 1374, 1389,
              1557, 1710, 1846, 1855, 1944, 1960, 1963, 2089, 2410, 2422],
    "seq3d": [310, 375, 705, 1006, 1065, 1655, 1962, 2134, 2439, 2788,
              2967, 3186, 3733, 3781, 4056, 4269, 4591, 5024, 5137, 5160],
}


def reduced_stack(kind: str) -> models.ModelSpec:
    """Miniature of each architecture: same layer sequence, 12x16 input."""
    LS = models.LayerSpec
    if kind in ("frame2d", "seq2d"):
        ch = 1 if kind == "frame2d" else 4
        stack = [
            LS("conv2d", filters=2, kernel=(3, 3)), LS("relu"), LS("maxpool2d", pool=(2, 2)),
            LS("conv2d", filters=3, kernel=(3, 3)), LS("relu"), LS("maxpool2d", pool=(2, 2)),
            LS("flatten"), LS("batchnorm"), LS("dense", units=6), LS("relu"),
            LS("dense", units=2),
        ]
        return models.ModelSpec(kind, stack, (ch, 12, 16))
    stack = [
        LS("conv3d", filters=2, kernel=(2, 3, 3)), LS("relu"), LS("maxpool3d", pool=(1, 2, 2)),
        LS("conv3d", filters=3, kernel=(2, 3, 3)), LS("relu"), LS("maxpool3d", pool=(2, 2, 2)),
        LS("flatten"), LS("batchnorm"), LS("dense", units=6), LS("relu"),
        LS("dense", units=2),
    ]
    return models.ModelSpec(kind, stack, (1, 4, 12, 16))


def make_gradcheck_point(kind: str, seed: int):
    """(spec, params, x): shifted biases, two batch rows on distinct ranges."""
    rng = Rng(seed * 1000 + 17)
    spec = reduced_stack(kind)
    params = models.init_params(spec, rng)
    for layer, d in zip(spec.layers, params.layers):
        if layer.kind in ("conv2d", "conv3d", "dense"):
            d["b"] = d["b"] + BIAS_SHIFT
    lo = rng.uniform((1,) + spec.input_shape, 0.0, 0.45)
    hi = rng.uniform((1,) + spec.input_shape, 0.55, 1.0)
    return spec, params, np.concatenate([lo, hi], axis=0)


def ce_loss_fn(spec, params0, x, labels):
    """Flat parameter vector -> (cross-entropy loss, flat gradient)."""
    def f(vec):
        params = models.vector_to_params(spec, params0, vec)
        xx = x.astype(vec.dtype)
        logits, cache = models.forward(spec, params, xx, train=True, want_cache=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        grads, _ = models.backward(spec, params, cache, dlogits)
        return loss, models.grads_to_vector(spec, grads)
    return f


def probed_loss_fn(f, signs):
    """Add PROBE_WEIGHT * signs . vec so no gradient coordinate is near zero."""
    def g(vec):
        loss, grad = f(vec)
        return (loss + PROBE_WEIGHT * float((signs * vec).sum()),
                grad + PROBE_WEIGHT * signs.astype(vec.dtype))
    return g


def _pool_windows(layer, inp):
    if layer.kind == "maxpool2d":
        ph, pw = layer.pool
        b, c, h, w = inp.shape
        oh, ow = h // ph, w // pw
        return (inp[:, :, :oh * ph, :ow * pw]
                .reshape(b, c, oh, ph, ow, pw).transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, oh, ow, ph * pw))
    pt, ph, pw = layer.pool
    b, c, t, h, w = inp.shape
    ot, oh, ow = t // pt, h // ph, w // pw
    return (inp[:, :, :ot * pt, :oh * ph, :ow * pw]
            .reshape(b, c, ot, pt, oh, ph, ow, pw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
            .reshape(b, c, ot, oh, ow, pt * ph * pw))


def conditioning(spec, params, x):
    """(kink margin, min batch-norm feature std) at this test point."""
    margin, bn_std = np.inf, np.inf
    _, cache = models.forward(spec, params, x, train=True, want_cache=True)
    for layer, inp in zip(spec.layers, cache.inputs):
        if layer.kind == "relu":
            margin = min(margin, float(np.abs(inp).min()))
        elif layer.kind == "batchnorm":
            bn_std = min(bn_std, float(inp.std(axis=0).min()))
        elif layer.kind in ("maxpool2d", "maxpool3d"):
            win = _pool_windows(layer, inp)
            if win.shape[-1] > 1:
                sw = np.sort(win, axis=-1)
                margin = min(margin, float((sw[..., -1] - sw[..., -2]).min()))
    return margin, bn_std


def well_conditioned(spec, params, x) -> bool:
    margin, bn_std = conditioning(spec, params, x)
    return margin >= KINK_MARGIN and bn_std >= BN_STD_FLOOR


# ---------------------------------------------------------------------------
# Brute-force oracles (independent of the library's vectorized paths)
# ---------------------------------------------------------------------------

def conv2d_oracle(x, w, b):
    """Plain-loop valid cross-correlation; x [C,H,W], w [K,C,kh,kw]."""
    k, c, kh, kw = w.shape
    _, h, wi = x.shape
    out = np.zeros((k, h - kh + 1, wi - kw + 1), dtype=np.float64)
    for kk in range(k):
        for y in range(out.shape[1]):
            for xx in range(out.shape[2]):
                out[kk, y, xx] = (x[:, y:y + kh, xx:xx + kw] * w[kk]).sum() + b[kk]
    return out


def conv3d_oracle(x, w, b):
    """Plain-loop valid 3D cross-correlation; x [C,T,H,W], w [K,C,kt,kh,kw]."""
    k, c, kt, kh, kw = w.shape
    _, t, h, wi = x.shape
    out = np.zeros((k, t - kt + 1, h - kh + 1, wi - kw + 1), dtype=np.float64)
    for kk in range(k):
        for tt in range(out.shape[1]):
            for y in range(out.shape[2]):
                for xx in range(out.shape[3]):
                    out[kk, tt, y, xx] = (x[:, tt:tt + kt, y:y + kh, xx:xx + kw] * w[kk]).sum() + b[kk]
    return out


def resize_bilinear_oracle(frame, out_h, out_w):
    """Scalar-loop corner-aligned bilinear resample."""
    h, w = frame.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            y = i * (h - 1) / (out_h - 1)
            x = j * (w - 1) / (out_w - 1)
            y0, x0 = min(int(y), h - 2), min(int(x), w - 2)
            fy, fx = y - y0, x - x0
            out[i, j] = (frame[y0, x0] * (1 - fy) * (1 - fx)
                         + frame[y0, x0 + 1] * (1 - fy) * fx
                         + frame[y0 + 1, x0] * fy * (1 - fx)
                         + frame[y0 + 1, x0 + 1] * fy * fx)
    return out


def label_oracle(times, raw_values, frame_count, epsilon,
                 window_frames=8, frame_rate=30.0):
    """Recompute window labels from raw samples with plain loops.

    Returns a list of (label, window_value): label 0 Low, 1 High,
    2 Uncertain. Mirrors the documented pipeline semantics: min-max
    normalization, hold-last frame alignment (first sample before the
    start), one vote per governing sample, mean-split with the open
    uncertainty zone, ties at epsilon=0 labeled Low.
    """
    lo, hi = min(raw_values), max(raw_values)
    norm = [(v - lo) / (hi - lo) for v in raw_values]
    mean = sum(norm) / len(norm)
    out = []
    for wstart in range(0, frame_count - window_frames + 1, window_frames):
        governing = []
        for f in range(wstart, wstart + window_frames):
            t = f / frame_rate
            idx = 0
            for i, ti in enumerate(times):
                if ti <= t:
                    idx = i
                else:
                    break
            if idx not in governing:
                governing.append(idx)
        value = sum(norm[i] for i in governing) / len(governing)
        if epsilon > 0:
            if value >= mean + epsilon:
                lab = 1
            elif value <= mean - epsilon:
                lab = 0
            else:
                lab = 2
        else:
            lab = 1 if value > mean else 0
        out.append((lab, value))
    return out
