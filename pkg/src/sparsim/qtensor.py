"""Fixed-point integer tensors, quantization, and the exact dense-matmul oracle.

Everything downstream (masked execution, merged-tile execution, reuse deltas)
is checked against ``mmul_dense``, so this module favours strictness over
convenience: construction validates bit ranges, the accumulator is checked at
32 bits, and all values are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VALID_BITS = (12, 16, 32)

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

# Row-block size for the checked accumulation in mmul_dense; bounds the
# (rows x D x cols) partial-sum workspace.
_ACCUM_BLOCK_ROWS = 32


class BitRangeError(ValueError):
    """A stored integer does not fit its declared signed bit width."""


class AccumulatorOverflowError(OverflowError):
    """A 32-bit running dot-product sum overflowed during accumulation."""


def _signed_limits(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QTensor:
    """Integer tensor with a power-of-two scale: value = data * 2**(-scale).

    ``bits`` is the operand width (12 for matmul operands, 16/32 for
    special-function operands); ``scale`` is shared by all elements
    (per-tensor quantization). ``data`` is row-major int64 and read-only.
    """

    data: np.ndarray
    bits: int
    scale: int

    def __post_init__(self) -> None:
        if self.bits not in VALID_BITS:
            raise ValueError(f"bits must be one of {VALID_BITS}, got {self.bits}")
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.int64))
        lo, hi = _signed_limits(self.bits)
        bad = (arr < lo) | (arr > hi)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise BitRangeError(
                f"element {idx} = {int(arr[idx])} outside signed {self.bits}-bit "
                f"range [{lo}, {hi}]"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def to_real(self) -> np.ndarray:
        return dequantize(self)


@dataclass(frozen=True)
class Bitmask:
    """Boolean output-importance mask: 1 = element must be computed."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.bits.sum())

    def density(self) -> float:
        return self.nnz / self.bits.size

    def sparsity(self) -> float:
        # Complement of density, so density() + sparsity() == 1.0 exactly.
        return 1.0 - self.density()


def round_half_away_from_zero(values: np.ndarray) -> np.ndarray:
    """Deterministic rounding used everywhere (numpy's round is half-even)."""
    v = np.asarray(values, dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def quantize(values: np.ndarray, bits: int, scale: int) -> QTensor:
    """Quantize real values to ``bits`` signed integers at 2**(-scale) steps.

    Raises BitRangeError naming the first offending index if any rounded
    value falls outside the signed range.
    """
    if bits not in VALID_BITS:
        raise ValueError(f"bits must be one of {VALID_BITS}, got {bits}")
    v = np.asarray(values, dtype=np.float64)
    stored = round_half_away_from_zero(v * float(2.0**scale))
    lo, hi = _signed_limits(bits)
    bad = (stored < lo) | (stored > hi)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise BitRangeError(
            f"value {v[idx]} at index {idx} quantizes to {int(stored[idx])}, "
            f"outside signed {bits}-bit range [{lo}, {hi}]"
        )
    return QTensor(stored, bits, scale)


def dequantize(t: QTensor) -> np.ndarray:
    return t.data.astype(np.float64) * float(2.0 ** (-t.scale))


def mmul_dense(a: QTensor, w: QTensor) -> QTensor:
    """Exact integer matmul with a checked 32-bit accumulator.

    Result scale is a.scale + w.scale. Overflow of any *running* partial sum
    (accumulation in inner-dimension order) raises AccumulatorOverflowError:
    in a simulator that signals a mis-sized scale and should fail loudly.
    """
    am, wm = a.data, w.data
    if am.ndim != 2 or wm.ndim != 2:
        raise ValueError("mmul_dense expects 2-D operands")
    if am.shape[1] != wm.shape[0]:
        raise ValueError(f"inner dimensions disagree: {am.shape} x {wm.shape}")
    r, d = am.shape
    c = wm.shape[1]
    out = np.empty((r, c), dtype=np.int64)
    for r0 in range(0, r, _ACCUM_BLOCK_ROWS):
        r1 = min(r, r0 + _ACCUM_BLOCK_ROWS)
        prod = am[r0:r1, :, None] * wm[None, :, :]  # (rb, d, c)
        psum = np.cumsum(prod, axis=1) if d else np.zeros((r1 - r0, 0, c), np.int64)
        if d:
            hi = psum.max()
            lo = psum.min()
            if hi > INT32_MAX or lo < INT32_MIN:
                bad = (psum > INT32_MAX) | (psum < INT32_MIN)
                i, k, j = (int(x) for x in np.argwhere(bad)[0])
                raise AccumulatorOverflowError(
                    f"32-bit accumulator overflow at output ({r0 + i}, {j}) "
                    f"after {k + 1} of {d} terms: partial sum {int(psum[i, k, j])}"
                )
            out[r0:r1] = psum[:, -1, :]
        else:
            out[r0:r1] = 0
    return QTensor(out, 32, a.scale + w.scale)


def add_into_32(a: QTensor, b: QTensor) -> QTensor:
    """Checked elementwise add of equal-scale tensors into a 32-bit tensor."""
    if a.scale != b.scale:
        raise ValueError(f"scale mismatch: {a.scale} vs {b.scale}")
    s = a.data + b.data
    if s.max(initial=0) > INT32_MAX or s.min(initial=0) < INT32_MIN:
        bad = (s > INT32_MAX) | (s < INT32_MIN)
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise AccumulatorOverflowError(
            f"32-bit overflow at index {idx} during add: {int(s[idx])}"
        )
    return QTensor(s, 32, a.scale)


def mask_stats(m: Bitmask) -> dict:
    """Exact counts for a mask: density, sparsity, and per-axis nonzeros."""
    per_col = m.bits.sum(axis=0).astype(np.int64)
    per_row = m.bits.sum(axis=1).astype(np.int64)
    return {
        "density": m.density(),
        "sparsity": m.sparsity(),
        "per_column_nnz": per_col,
        "per_row_nnz": per_row,
    }
