"""Dense float32 tensors, seeded randomness, binary tensor blobs, and a
finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects in row-major order with dtype
float32 (``FLOAT``). Randomness flows through :class:`Rng`, a thin wrapper
around numpy's PCG64 generator; the algorithm identity (PCG64, period 2^128)
and the child-seed derivation (seed XOR FNV-1a hash of a key) are part of the
on-disk format contract so datasets and checkpoints reproduce bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import NumericError, ConfigError, ShapeError

FLOAT = np.float32

# Denominator floor for relative gradient errors; avoids blow-ups at zero.
REL_ERROR_FLOOR = 1e-8

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of ``text``; stable across runs and platforms."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    for d in shape:
        if d < 1:
            raise ShapeError(f"dimension sizes must be >= 1, got {shape}")
    return shape


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Fresh float32 tensor of ``shape`` with every element equal to ``fill``."""
    return np.full(_check_shape(shape), fill, dtype=FLOAT)


def reshape(t: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Reshape preserving flat row-major element order.

    The product of the new dimensions must equal the old element count.
    """
    shape = _check_shape(shape)
    if int(np.prod(shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.size} elements into {shape}")
    return t.reshape(shape)


class Rng:
    """Deterministic random stream (PCG64) identified by a 64-bit seed.

    A single Rng is stateful and single-owner: consuming it twice yields
    different draws, re-seeding reproduces them. Parallel code derives
    independent children via :meth:`child` rather than sharing one stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key: str | int) -> "Rng":
        """Independent stream seeded with ``seed XOR fnv1a64(str(key))``."""
        return Rng(self.seed ^ fnv1a64(str(key)))

    def uniform(self, shape: Sequence[int], lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """I.i.d. float32 samples in the half-open interval [lo, hi)."""
        if not lo < hi:
            raise ConfigError(f"uniform range requires lo < hi, got [{lo}, {hi})")
        shape = _check_shape(shape)
        out = (lo + (hi - lo) * self._gen.random(shape)).astype(FLOAT)
        # float32 rounding can land exactly on hi; clamp to the value below.
        top = np.nextafter(FLOAT(hi), FLOAT(lo))
        return np.minimum(out, top)

    def normal(self, shape: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return (mean + std * self._gen.standard_normal(_check_shape(shape))).astype(FLOAT)

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def tensor_rand_uniform(rng: Rng, shape: Sequence[int], lo: float, hi: float) -> np.ndarray:
    """Float32 tensor of i.i.d. uniform samples in [lo, hi) drawn from ``rng``."""
    return rng.uniform(shape, lo, hi)


# ---------------------------------------------------------------------------
# Binary tensor blobs (embedded inside dataset and checkpoint files)
# ---------------------------------------------------------------------------
# Layout: u32 little-endian rank, rank x u32 LE dims, prod(dims) x f32 LE
# values in row-major order.

def write_tensor(fh: BinaryIO, t: np.ndarray) -> None:
    t = np.ascontiguousarray(t, dtype=FLOAT)
    fh.write(np.uint32(t.ndim).tobytes())
    fh.write(np.asarray(t.shape, dtype="<u4").tobytes())
    fh.write(t.astype("<f4", copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    raw = fh.read(4)
    if len(raw) < 4:
        raise ShapeError("truncated tensor blob: missing rank")
    rank = int(np.frombuffer(raw, dtype="<u4")[0])
    if rank < 1:
        raise ShapeError(f"tensor blob rank must be >= 1, got {rank}")
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise ShapeError("truncated tensor blob: missing dims")
    dims = tuple(int(d) for d in np.frombuffer(dims_raw, dtype="<u4"))
    count = int(np.prod(dims))
    payload = fh.read(4 * count)
    if len(payload) < 4 * count:
        raise ShapeError("truncated tensor blob: missing values")
    return np.frombuffer(payload, dtype="<f4").astype(FLOAT).reshape(dims)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Comparison of an analytic gradient against central differences.

    ``per_parameter_errors`` holds (parameter index, analytic, numeric)
    triples. Relative error is |a - n| / max(|a|, |n|, REL_ERROR_FLOOR).
    """

    max_relative_error: float
    per_parameter_errors: list[tuple[int, float, float]]

    def worst_coordinate(self) -> int:
        errs = [
            abs(a - n) / max(abs(a), abs(n), REL_ERROR_FLOOR)
            for _, a, n in self.per_parameter_errors
        ]
        return self.per_parameter_errors[int(np.argmax(errs))][0]


def finite_difference_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    step: float = 1e-3,
) -> GradCheckReport:
    """Check the analytic gradient of ``f`` at ``params`` by central differences.

    ``f`` maps a flat parameter vector to ``(value, gradient)`` and must be
    dtype-polymorphic. The analytic gradient under test is taken at the dtype
    of ``params`` (float32 for stored models). The numeric side always
    evaluates ``f`` on float64 copies: float32 function values are quantized
    to ~6e-8, so float32 differences at step 1e-3 carry ~3e-5 of absolute
    noise and cannot certify gradients to 1e-3 relative. Pass float64
    ``params`` to run the analytic side in 64-bit as well (tighter tolerance).
    """
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    _, analytic = f(params)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    base = params.astype(np.float64).ravel()
    numeric = np.empty_like(base)
    for i in range(base.size):
        probe = base.copy()
        probe[i] = base[i] + step
        up, _ = f(probe)
        probe[i] = base[i] - step
        down, _ = f(probe)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(
                f"non-finite function value while perturbing coordinate {i}",
                coordinate=i,
            )
        numeric[i] = (up - down) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERROR_FLOOR)
    rel = np.abs(analytic - numeric) / denom
    triples = [(i, float(analytic[i]), float(numeric[i])) for i in range(base.size)]
    return GradCheckReport(float(rel.max()), triples)
