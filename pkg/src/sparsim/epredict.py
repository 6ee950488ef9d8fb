"""Log-domain attention-score prediction and skip-mask derivation.

A value is approximated by its top one or two set bits (one- / two-step
leading-one detection). A product of two such approximations reduces to
shifts: each exponent pair contributes a one-hot partial product, and the
partial products are combined with bitwise OR, which equals their sum
whenever all exponent sums are distinct. Cross-element accumulation along
the inner dimension stays exact signed addition; OR never crosses element
boundaries (collapsing it across the dot product would turn the sum into a
max-like operation).

The predicted score feeds top-k / dominance masking that decides which
exact attention computations can be skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qtensor import Bitmask, QTensor


@dataclass(frozen=True)
class LogOperand:
    """Sign plus one or two bit positions approximating an integer.

    ``sign`` is -1/0/+1 (0 acts as the zero flag: no exponents). Exponent
    positions are strictly decreasing and the implied value never exceeds
    the magnitude of the original operand.
    """

    sign: int
    exps: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.sign not in (-1, 0, 1):
            raise ValueError(f"sign must be -1, 0, or +1, got {self.sign}")
        if (self.sign == 0) != (len(self.exps) == 0):
            raise ValueError("zero flag and empty exponent set must coincide")
        if len(self.exps) > 2:
            raise ValueError("at most two detected bits")
        if len(self.exps) == 2 and self.exps[0] <= self.exps[1]:
            raise ValueError("exponents must be strictly decreasing")

    @property
    def magnitude(self) -> int:
        return sum(1 << e for e in self.exps)

    @property
    def value(self) -> int:
        return self.sign * self.magnitude


@dataclass(frozen=True)
class PredictConfig:
    """Masking knobs: top-k count, dominance threshold, second-bit detection."""

    k: int
    theta_dom: int
    two_step: bool = True

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.theta_dom < 0:
            raise ValueError("theta_dom must be >= 0")


def lod(x: int) -> int:
    """Position of the leading one: p with 2**p <= x < 2**(p+1). Requires x > 0."""
    if x <= 0:
        raise ValueError(f"lod requires x > 0, got {x}")
    return int(x).bit_length() - 1


def lod_operand(x: int) -> LogOperand:
    """Single-step approximation: the leading-one bit only."""
    x = int(x)
    if x == 0:
        return LogOperand(0, ())
    sign = 1 if x > 0 else -1
    return LogOperand(sign, (lod(abs(x)),))


def ts_lod(x: int) -> LogOperand:
    """Two-step approximation: leading-one bit, then the next set bit if any."""
    x = int(x)
    if x == 0:
        return LogOperand(0, ())
    sign = 1 if x > 0 else -1
    m = abs(x)
    e1 = lod(m)
    rem = m - (1 << e1)
    if rem == 0:
        return LogOperand(sign, (e1,))
    return LogOperand(sign, (e1, lod(rem)))


def log_mul(a: LogOperand, b: LogOperand) -> int:
    """Approximate product: OR of one-hot 2**(ea+eb) partial products.

    Exact product of the two approximations iff all exponent sums are
    pairwise distinct; colliding sums are absorbed by the OR and
    underestimate the sum.
    """
    if a.sign == 0 or b.sign == 0:
        return 0
    mag = 0
    for ea in a.exps:
        for eb in b.exps:
            mag |= 1 << (ea + eb)
    return a.sign * b.sign * mag


def _decompose(m: np.ndarray, two_step: bool):
    """Vectorized sign / top-two-exponent split of an integer array."""
    m = np.asarray(m, dtype=np.int64)
    sign = np.sign(m).astype(np.int64)
    mag = np.abs(m)
    nz = mag > 0
    # frexp is exact for magnitudes < 2**53; operands here are <= 32-bit.
    e1 = np.zeros(m.shape, dtype=np.int64)
    e1[nz] = np.frexp(mag[nz].astype(np.float64))[1] - 1
    if not two_step:
        return sign, e1, np.zeros_like(e1), np.zeros(m.shape, dtype=bool)
    rem = mag - np.where(nz, np.int64(1) << e1, 0)
    has2 = rem > 0
    e2 = np.zeros(m.shape, dtype=np.int64)
    e2[has2] = np.frexp(rem[has2].astype(np.float64))[1] - 1
    return sign, e1, e2, has2


def approx_mmul(a: QTensor, b: QTensor, cfg: PredictConfig) -> np.ndarray:
    """Predicted score matrix: log-domain products, exact signed accumulation."""
    am, bm = a.data, b.data
    if am.shape[1] != bm.shape[0]:
        raise ValueError(f"inner dimensions disagree: {am.shape} x {bm.shape}")
    sa, a1, a2, ha = _decompose(am, cfg.two_step)
    sb, b1, b2, hb = _decompose(bm, cfg.two_step)

    # Broadcast over the shared inner index k: (R, D, 1) against (1, D, C).
    def col(x):
        return x[:, :, None]

    def row(x):
        return x[None, :, :]

    one = np.int64(1)
    mag = (one << (col(a1) + row(b1))).astype(np.int64)
    mag = np.where(col(ha), mag | (one << (col(a2) + row(b1))), mag)
    mag = np.where(row(hb), mag | (one << (col(a1) + row(b2))), mag)
    mag = np.where(
        col(ha) & row(hb), mag | (one << (col(a2) + row(b2))), mag
    )
    signed = col(sa) * row(sb) * mag
    return signed.sum(axis=1, dtype=np.int64)


@dataclass(frozen=True)
class AttnMask:
    """Keep/skip decisions for one attention-score matrix.

    ``keep`` marks score elements that must be computed exactly. Rows fully
    decided by dominance keep exactly their argmax and join ``skip_q_rows``
    (their query projection is unnecessary); columns never kept join
    ``skip_kv_cols`` (their key/value projections are unnecessary).
    """

    keep: Bitmask
    onehot_rows: frozenset[int]
    skip_q_rows: frozenset[int]
    skip_kv_cols: frozenset[int]
    k: int
    theta_dom: int

    def exec_mask(self) -> Bitmask:
        """Mask for the exact score matmul: dominance-decided rows need no
        computation at all, so they are cleared here."""
        bits = self.keep.bits.copy()
        for r in self.onehot_rows:
            bits[r, :] = False
        return Bitmask(bits)


def predict_attention_mask(score: np.ndarray, cfg: PredictConfig) -> AttnMask:
    """Top-k / dominance masking of a predicted score matrix.

    Per row: if max - second_max > theta_dom the row is decided by its
    argmax alone; otherwise keep the top min(k, nonzero count) values
    (ties broken by lower column index). Zeros are never kept: a predicted
    zero is skippable by definition.
    """
    s = np.asarray(score, dtype=np.int64)
    rows, cols = s.shape
    if cfg.k > cols:
        raise ValueError(f"k={cfg.k} exceeds column count {cols}")
    keep = np.zeros((rows, cols), dtype=bool)
    onehot: list[int] = []
    for r in range(rows):
        row = s[r]
        # Order by descending value, then ascending column for determinism.
        order = np.lexsort((np.arange(cols), -row))
        top = int(order[0])
        if cols >= 2:
            vals = np.sort(row)[::-1]
            dominant = int(vals[0]) - int(vals[1]) > cfg.theta_dom
        else:
            dominant = False
        if dominant:
            keep[r, top] = True
            onehot.append(r)
            continue
        nonzero = order[row[order] != 0]
        for c in nonzero[: min(cfg.k, len(nonzero))]:
            keep[r, int(c)] = True
    mask = Bitmask(keep)
    empty_cols = frozenset(int(c) for c in np.flatnonzero(~keep.any(axis=0)))
    onehot_f = frozenset(onehot)
    return AttnMask(
        keep=mask,
        onehot_rows=onehot_f,
        skip_q_rows=onehot_f,
        skip_kv_cols=empty_cols,
        k=cfg.k,
        theta_dom=cfg.theta_dom,
    )


def projection_skip_ratio(mask: AttnMask) -> dict:
    """Fractions of query rows and key/value columns whose projections skip."""
    return {
        "q_skip_frac": len(mask.skip_q_rows) / mask.keep.rows,
        "kv_skip_frac": len(mask.skip_kv_cols) / mask.keep.cols,
    }
