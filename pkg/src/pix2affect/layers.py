"""Forward and backward passes for every layer the models use.

All functions are pure and dtype-preserving (float32 in normal use, float64
under the gradient checker). Convolutions are stride-1 cross-correlations
with no padding ("valid"); pooling is non-overlapping with floor division,
trailing remainders discarded. Inputs may carry a leading batch axis; the
per-sample forms documented in each signature are accepted as batch size 1.

Convolutions dispatch between two numerically equivalent routes: a direct
patch-matrix sgemm (bit-exact on identity kernels, used for small work) and
an FFT route (circular correlation cropped to the valid region, ~5x faster
at frame scale). Both sides of the pair are cross-checked in the test suite.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

from .errors import ConfigError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Use the FFT convolution route when output elements x kernel taps exceeds
# this; below it the direct sgemm route is faster and exact.
FFT_MIN_WORK = 200_000


def _batched(x: np.ndarray, sample_rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == sample_rank:
        return x[None], False
    if x.ndim == sample_rank + 1:
        return x, True
    raise ShapeError(f"expected rank {sample_rank} or {sample_rank + 1} input, got shape {x.shape}")


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


# ---------------------------------------------------------------------------
# Convolutions.
#
# Direct route: one sgemm over a patch matrix laid out [C*taps, B*out] so
# each row fills from a strided copy with long contiguous runs.
#
# FFT route: valid cross-correlation equals the leading (oh, ow) block of the
# circular correlation at FFT size (H, W), so out = irfft2(Fx . conj(Fw)).
# The same spectra serve the backward pass: dw is the leading (kh, kw) block
# of irfft2(Fx . conj(Fdy)), and dx (a *full* convolution of dy with w, which
# at size H, W wraps nowhere) is irfft2(Fdy . Fw) exactly.
# ---------------------------------------------------------------------------

def _cols2d(xb: np.ndarray, kh: int, kw: int) -> np.ndarray:
    bs, c, h, w = xb.shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.empty((c * kh * kw, bs, oh, ow), dtype=xb.dtype)
    i = 0
    for ci in range(c):
        for dy in range(kh):
            for dx in range(kw):
                np.copyto(cols[i], xb[:, ci, dy:dy + oh, dx:dx + ow])
                i += 1
    return cols.reshape(c * kh * kw, bs * oh * ow)


def _use_fft(bs: int, c: int, oh: int, ow: int, kh: int, kw: int) -> bool:
    return bs * c * oh * ow * kh * kw >= FFT_MIN_WORK * 40


def _spectra(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    return scipy.fft.rfft2(arr, s=(h, w), axes=(-2, -1))


def _stacked_product(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Per-frequency matmul: [.., M, S] x [.., S, N] contracted bin by bin.

    fa, fb enter as [A, B, H, Wf]; returns [A', N', H, Wf] where the leading
    two axes follow matmul of fa[.., s] @ fb[.., s] at each spectral bin s.
    """
    prod = np.matmul(fa.transpose(2, 3, 0, 1), fb.transpose(2, 3, 0, 1))
    return prod.transpose(2, 3, 0, 1)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, ctx_out: list | None = None) -> np.ndarray:
    """Valid 2D cross-correlation.

    x: [C,H,W] or [B,C,H,W]; w: [K,C,kh,kw]; b: [K].
    Output: [K,H-kh+1,W-kw+1] (batched if the input was). When ``ctx_out``
    is a list, an opaque context is appended to it for reuse in backward.
    """
    xb, had_batch = _batched(x, 3)
    k, c, kh, kw = w.shape
    bs, ci, h, wi = xb.shape
    if ci != c:
        raise ShapeError(f"input has {ci} channels but kernel expects {c}")
    if kh > h or kw > wi:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{wi}")
    oh, ow = h - kh + 1, wi - kw + 1
    if _use_fft(bs, c, oh, ow, kh, kw):
        fx = _spectra(xb, h, wi)
        fw_conj = np.conj(_spectra(w, h, wi))
        full = scipy.fft.irfft2(_stacked_product(fx, fw_conj.transpose(1, 0, 2, 3)),
                                s=(h, wi), axes=(-2, -1))
        out = np.ascontiguousarray(full[:, :, :oh, :ow])
        ctx = ("fft", fx)
    else:
        cols = _cols2d(xb, kh, kw)
        out = np.ascontiguousarray(
            (w.reshape(k, -1) @ cols).reshape(k, bs, oh, ow).transpose(1, 0, 2, 3))
        ctx = ("direct", cols)
    if ctx_out is not None:
        ctx_out.append(ctx)
    out += b.reshape(1, k, 1, 1)
    return out if had_batch else out[0]


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    ctx: tuple | None = None, need_dx: bool = True):
    """Gradients of conv2d_forward. Returns (dx, dw, db).

    ``need_dx=False`` skips the input gradient (first-layer optimization);
    dx is then None. ``ctx`` reuses work saved by forward.
    """
    xb, had_batch = _batched(x, 3)
    dyb, _ = _batched(dy, 3)
    k, c, kh, kw = w.shape
    bs, _, oh, ow = dyb.shape
    h, wi = xb.shape[2], xb.shape[3]
    if _use_fft(bs, c, oh, ow, kh, kw):
        fx = ctx[1] if ctx is not None and ctx[0] == "fft" else _spectra(xb, h, wi)
        fdy = _spectra(dyb, h, wi)
        db = dyb.sum(axis=(0, 2, 3))
        dw_full = scipy.fft.irfft2(
            _stacked_product(fx.transpose(1, 0, 2, 3), np.conj(fdy)).transpose(1, 0, 2, 3),
            s=(h, wi), axes=(-2, -1))
        dw = np.ascontiguousarray(dw_full[:, :, :kh, :kw])
        if not need_dx:
            return None, dw, db
        fw = _spectra(w, h, wi)
        dx = scipy.fft.irfft2(_stacked_product(fdy, fw), s=(h, wi), axes=(-2, -1))
        return (dx if had_batch else dx[0]), dw, db
    cols = ctx[1] if ctx is not None and ctx[0] == "direct" else _cols2d(xb, kh, kw)
    dy_mat = np.ascontiguousarray(dyb.transpose(1, 0, 2, 3)).reshape(k, -1)
    db = dy_mat.sum(axis=1)
    dw = (dy_mat @ cols.T).reshape(k, c, kh, kw)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(k, -1).T @ dy_mat).reshape(c, kh, kw, bs, oh, ow)
    dx = np.zeros_like(xb)
    for dyo in range(kh):
        for dxo in range(kw):
            dx[:, :, dyo:dyo + oh, dxo:dxo + ow] += dcols[:, dyo, dxo].transpose(1, 0, 2, 3)
    return (dx if had_batch else dx[0]), dw, db


# A 3D convolution with temporal extent kt is a 2D convolution over inputs
# unfolded along time: window t of frames [t, t+kt) enters as kt*C channels.

def _unfold_time(xb: np.ndarray, kt: int) -> np.ndarray:
    bs, c, t, h, w = xb.shape
    ot = t - kt + 1
    u = np.empty((bs, ot, c, kt, h, w), dtype=xb.dtype)
    for dt in range(kt):
        np.copyto(u[:, :, :, dt], xb[:, :, dt:dt + ot].transpose(0, 2, 1, 3, 4))
    return u.reshape(bs * ot, c * kt, h, w)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, ctx_out: list | None = None) -> np.ndarray:
    """Valid 3D cross-correlation over (time, height, width).

    x: [C,T,H,W] or [B,C,T,H,W]; w: [K,C,kt,kh,kw]; b: [K].
    """
    xb, had_batch = _batched(x, 4)
    k, c, kt, kh, kw = w.shape
    bs, ci, t, h, wi = xb.shape
    if ci != c:
        raise ShapeError(f"input has {ci} channels but kernel expects {c}")
    if kt > t or kh > h or kw > wi:
        raise ShapeError(f"kernel {kt}x{kh}x{kw} larger than input {t}x{h}x{wi}")
    ot = t - kt + 1
    xu = _unfold_time(xb, kt)
    inner_ctx: list = []
    out2 = conv2d_forward(xu, w.reshape(k, c * kt, kh, kw), b, ctx_out=inner_ctx)
    oh, ow = out2.shape[2], out2.shape[3]
    out = np.ascontiguousarray(
        out2.reshape(bs, ot, k, oh, ow).transpose(0, 2, 1, 3, 4))
    if ctx_out is not None:
        ctx_out.append(("u3", xu, inner_ctx[0]))
    return out if had_batch else out[0]


def conv3d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    ctx: tuple | None = None, need_dx: bool = True):
    """Gradients of conv3d_forward. Returns (dx, dw, db)."""
    xb, had_batch = _batched(x, 4)
    dyb, _ = _batched(dy, 4)
    k, c, kt, kh, kw = w.shape
    bs, _, t, h, wi = xb.shape
    _, _, ot, oh, ow = dyb.shape
    if ctx is not None and ctx[0] == "u3":
        xu, inner_ctx = ctx[1], ctx[2]
    else:
        xu, inner_ctx = _unfold_time(xb, kt), None
    dy2 = np.ascontiguousarray(dyb.transpose(0, 2, 1, 3, 4)).reshape(bs * ot, k, oh, ow)
    dx2, dw2, db = conv2d_backward(dy2, xu, w.reshape(k, c * kt, kh, kw),
                                   ctx=inner_ctx, need_dx=need_dx)
    dw = dw2.reshape(k, c, kt, kh, kw)
    if not need_dx:
        return None, dw, db
    dx2r = dx2.reshape(bs, ot, c, kt, h, wi)
    dx = np.zeros_like(xb)
    for dt in range(kt):
        dx[:, :, dt:dt + ot] += dx2r[:, :, :, dt].transpose(0, 2, 1, 3, 4)
    return (dx if had_batch else dx[0]), dw, db


# ---------------------------------------------------------------------------
# Max pooling (non-overlapping, stride = pool extent, remainder discarded).
# Window-flat argmax indices take the first maximum, matching np.argmax; the
# sliced 2x2 fast path reproduces that tie-break exactly.
# ---------------------------------------------------------------------------

_POOL2X2_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _maxpool2x2_forward(xb: np.ndarray):
    bs, c, h, w = xb.shape
    oh, ow = h // 2, w // 2
    a = xb[:, :, 0:oh * 2:2, 0:ow * 2:2]
    b = xb[:, :, 0:oh * 2:2, 1:ow * 2:2]
    cc = xb[:, :, 1:oh * 2:2, 0:ow * 2:2]
    d = xb[:, :, 1:oh * 2:2, 1:ow * 2:2]
    m1 = np.maximum(a, b)
    m2 = np.maximum(cc, d)
    take2 = m2 > m1
    out = np.where(take2, m2, m1)
    idx = np.where(take2, (d > cc) + 2, (b > a).astype(np.int64))
    return out, idx


def _maxpool2x2_backward(dyb: np.ndarray, idxb: np.ndarray, in_shape: tuple) -> np.ndarray:
    bs, c, h, w = in_shape
    oh, ow = h // 2, w // 2
    dx = np.zeros(in_shape, dtype=dyb.dtype)
    for j, (ro, co) in enumerate(_POOL2X2_OFFSETS):
        dx[:, :, ro:oh * 2:2, co:ow * 2:2] = dyb * (idxb == j)
    return dx


def maxpool2d_forward(x: np.ndarray, pool: tuple[int, int]):
    """Returns (pooled, argmax) with argmax flat within each ph*pw window."""
    xb, had_batch = _batched(x, 3)
    ph, pw = pool
    bs, c, h, w = xb.shape
    if ph < 1 or pw < 1:
        raise ShapeError(f"pool extents must be >= 1, got {pool}")
    if ph > h or pw > w:
        raise ShapeError(f"pool {ph}x{pw} exceeds input {h}x{w}")
    if (ph, pw) == (2, 2):
        out, idx = _maxpool2x2_forward(xb)
    else:
        oh, ow = h // ph, w // pw
        win = xb[:, :, : oh * ph, : ow * pw]
        win = win.reshape(bs, c, oh, ph, ow, pw).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(bs, c, oh, ow, ph * pw)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if not had_batch:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(dy: np.ndarray, idx: np.ndarray, in_shape: tuple, pool: tuple[int, int]) -> np.ndarray:
    """Routes each window's upstream gradient to its recorded argmax position."""
    dyb, had_batch = _batched(dy, 3)
    idxb, _ = _batched(idx, 3)
    ph, pw = pool
    if len(in_shape) == 3:
        in_shape = (1,) + tuple(in_shape)
    bs, c, h, w = in_shape
    if (ph, pw) == (2, 2):
        dx = _maxpool2x2_backward(dyb, idxb, in_shape)
        return dx if had_batch else dx[0]
    oh, ow = h // ph, w // pw
    flat = np.zeros((bs, c, oh, ow, ph * pw), dtype=dyb.dtype)
    np.put_along_axis(flat, idxb[..., None], dyb[..., None], axis=-1)
    flat = flat.reshape(bs, c, oh, ow, ph, pw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((bs, c, h, w), dtype=dyb.dtype)
    dx[:, :, : oh * ph, : ow * pw] = flat.reshape(bs, c, oh * ph, ow * pw)
    return dx if had_batch else dx[0]


def maxpool3d_forward(x: np.ndarray, pool: tuple[int, int, int]):
    """3D pooling over (time, height, width). Returns (pooled, argmax)."""
    xb, had_batch = _batched(x, 4)
    pt, ph, pw = pool
    bs, c, t, h, w = xb.shape
    if pt < 1 or ph < 1 or pw < 1:
        raise ShapeError(f"pool extents must be >= 1, got {pool}")
    if pt > t or ph > h or pw > w:
        raise ShapeError(f"pool {pt}x{ph}x{pw} exceeds input {t}x{h}x{w}")
    ot, oh, ow = t // pt, h // ph, w // pw
    if (pt, ph, pw) == (1, 2, 2):
        # Temporal extent 1 is plain 2x2 pooling with time folded into channels.
        out, idx = _maxpool2x2_forward(xb.reshape(bs, c * t, h, w))
        out = out.reshape(bs, c, t, oh, ow)
        idx = idx.reshape(bs, c, t, oh, ow)
    else:
        win = xb[:, :, : ot * pt, : oh * ph, : ow * pw]
        win = win.reshape(bs, c, ot, pt, oh, ph, ow, pw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        win = win.reshape(bs, c, ot, oh, ow, pt * ph * pw)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if not had_batch:
        return out[0], idx[0]
    return out, idx


def maxpool3d_backward(dy: np.ndarray, idx: np.ndarray, in_shape: tuple, pool: tuple[int, int, int]) -> np.ndarray:
    dyb, had_batch = _batched(dy, 4)
    idxb, _ = _batched(idx, 4)
    pt, ph, pw = pool
    if len(in_shape) == 4:
        in_shape = (1,) + tuple(in_shape)
    bs, c, t, h, w = in_shape
    ot, oh, ow = t // pt, h // ph, w // pw
    if (pt, ph, pw) == (1, 2, 2):
        dx = _maxpool2x2_backward(dyb.reshape(bs, c * t, oh, ow),
                                  idxb.reshape(bs, c * t, oh, ow),
                                  (bs, c * t, h, w))
        dx = dx.reshape(bs, c, t, h, w)
        return dx if had_batch else dx[0]
    flat = np.zeros((bs, c, ot, oh, ow, pt * ph * pw), dtype=dyb.dtype)
    np.put_along_axis(flat, idxb[..., None], dyb[..., None], axis=-1)
    flat = flat.reshape(bs, c, ot, oh, ow, pt, ph, pw).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros((bs, c, t, h, w), dtype=dyb.dtype)
    dx[:, :, : ot * pt, : oh * ph, : ow * pw] = flat.reshape(bs, c, ot * pt, oh * ph, ow * pw)
    return dx if had_batch else dx[0]


# ---------------------------------------------------------------------------
# Batch normalization over flattened features [B, F]
# ---------------------------------------------------------------------------

def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Per-feature standardization then scale/shift.

    Train mode uses batch statistics (biased variance) and returns updated
    running statistics; inference mode standardizes by the running statistics
    and leaves them unchanged. Returns (out, cache, running_mean,
    running_var); the cache records which mode produced it.
    """
    if x.ndim != 2:
        raise ShapeError(f"batchnorm expects [B,F] input, got shape {x.shape}")
    if train:
        if x.shape[0] < 2:
            raise ShapeError(f"train-mode batchnorm needs batch size >= 2, got {x.shape[0]}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        out = gamma * xhat + beta
        new_mean = (momentum * running_mean + (1.0 - momentum) * mu).astype(running_mean.dtype)
        new_var = (momentum * running_var + (1.0 - momentum) * var).astype(running_var.dtype)
        return out, ("train", xhat, inv_std, gamma), new_mean, new_var
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean) * inv_std
    out = gamma * xhat + beta
    return out, ("infer", xhat, inv_std, gamma), running_mean, running_var


def batchnorm_backward(dy: np.ndarray, cache):
    """Gradients of batchnorm. Returns (dx, dgamma, dbeta).

    In inference mode the running statistics are constants, so dx is simply
    dy * gamma * inv_std; in train mode the batch statistics depend on x.
    """
    mode, xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    bs = dy.shape[0]
    dx = (inv_std / bs) * (bs * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Dense and the classification head
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map per batch row: x [B,N] @ w [N,M] + b [M]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shapes do not chain: x {x.shape}, w {w.shape}")
    return x @ w + b


def dense_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log softmax probability of the true class.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / B.
    """
    logits2, _ = _batched(logits, 1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bs, nc = logits2.shape
    if labels.shape[0] != bs:
        raise ShapeError(f"{bs} logit rows but {labels.shape[0]} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= nc:
        raise ConfigError(f"labels must lie in [0, {nc}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    shifted = logits2 - logits2.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expz.sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(bs), labels].mean())
    dlogits = probs.copy()
    dlogits[np.arange(bs), labels] -= 1.0
    dlogits /= bs
    return loss, dlogits.reshape(logits.shape)
