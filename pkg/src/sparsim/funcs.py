"""Quantized special functions: GELU/GEGLU, softmax, layernorm, residual.

Two evaluation modes exist for the nonlinearities:

* ``reference``: float64 math, the high-precision oracle.
* ``table``: piecewise-linear interpolation between 16-bit fixed-point
  breakpoints, the hardware-style path. Max abs error vs reference is
  bounded by 2**-6 in real units (table pitch 1/8 over [-8, 8], endpoints
  stored at 2**-10 steps).

Both modes quantize their output, so either can drive the integer pipeline
deterministically.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .qtensor import QTensor, round_half_away_from_zero

GELU_TABLE_LO = -8.0
GELU_TABLE_HI = 8.0
GELU_TABLE_STEP = 0.125
GELU_TABLE_VALUE_SCALE = 10  # endpoint values stored as ints at 2**-10


def gelu_reference(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_breakpoints() -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(GELU_TABLE_LO, GELU_TABLE_HI + GELU_TABLE_STEP / 2, GELU_TABLE_STEP)
    ys = round_half_away_from_zero(gelu_reference(xs) * 2.0**GELU_TABLE_VALUE_SCALE)
    return xs, ys


_GELU_XS, _GELU_YS = _gelu_breakpoints()


def gelu_table(x: np.ndarray) -> np.ndarray:
    """Piecewise-linear GELU from quantized breakpoints; clamps saturate
    (below the table the function is ~0, above it ~identity)."""
    x = np.asarray(x, dtype=np.float64)
    seg = np.floor((x - GELU_TABLE_LO) / GELU_TABLE_STEP).astype(np.int64)
    seg = np.clip(seg, 0, len(_GELU_XS) - 2)
    x0 = _GELU_XS[seg]
    y0 = _GELU_YS[seg].astype(np.float64) * 2.0**-GELU_TABLE_VALUE_SCALE
    y1 = _GELU_YS[seg + 1].astype(np.float64) * 2.0**-GELU_TABLE_VALUE_SCALE
    interp = y0 + (y1 - y0) * (x - x0) / GELU_TABLE_STEP
    return np.where(x < GELU_TABLE_LO, 0.0, np.where(x > GELU_TABLE_HI, x, interp))


def saturate_quantize(values: np.ndarray, bits: int, scale: int) -> QTensor:
    """Hardware-style requantization: round then clamp to the bit range.

    Distinct from qtensor.quantize, which raises on overflow; functional
    units saturate instead of failing.
    """
    stored = round_half_away_from_zero(np.asarray(values, np.float64) * 2.0**scale)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return QTensor(np.clip(stored, lo, hi), bits, scale)


def requantize(t: QTensor, bits: int, scale: int) -> QTensor:
    """Shift an integer tensor to a new scale/width, saturating."""
    if scale >= t.scale:
        stored = t.data * (1 << (scale - t.scale))
    else:
        shift = t.scale - scale
        stored = round_half_away_from_zero(t.data.astype(np.float64) / (1 << shift))
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return QTensor(np.clip(stored, lo, hi), bits, scale)


def apply_gelu(preact: QTensor, out_bits: int, out_scale: int, mode: str) -> QTensor:
    x = preact.to_real()
    if mode == "reference":
        y = gelu_reference(x)
    elif mode == "table":
        y = gelu_table(x)
    else:
        raise ValueError(f"unknown nonlinearity mode {mode!r}")
    return saturate_quantize(y, out_bits, out_scale)


def apply_geglu(preact: QTensor, out_bits: int, out_scale: int, mode: str) -> QTensor:
    """Gate x value product over a split hidden dimension (halves the width)."""
    if preact.shape[1] % 2 != 0:
        raise ValueError("geglu needs an even hidden width")
    half = preact.shape[1] // 2
    x = preact.to_real()
    gate, value = x[:, :half], x[:, half:]
    g = gelu_reference(gate) if mode == "reference" else gelu_table(gate)
    return saturate_quantize(g * value, out_bits, out_scale)


def softmax_rows(
    scores: QTensor,
    out_bits: int = 16,
    out_scale: int = 14,
    keep: np.ndarray | None = None,
    temperature: float = 1.0,
) -> QTensor:
    """Row softmax with optional keep mask; masked-out entries get zero weight.

    Rows with no kept entries come out all-zero. With out_scale >= 14 the
    quantized rows sum to 1 within 2**-8 for up to 64 columns.
    """
    x = scores.to_real() / temperature
    if keep is not None:
        x = np.where(keep, x, -np.inf)
    m = np.max(x, axis=1, keepdims=True)
    # Rows that are entirely masked produce -inf maxima; map them to zero.
    safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - safe)
    e = np.where(np.isfinite(x), e, 0.0)
    denom = e.sum(axis=1, keepdims=True)
    probs = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return saturate_quantize(probs, out_bits, out_scale)


def layernorm_rows(
    x: QTensor,
    gamma: np.ndarray,
    beta: np.ndarray,
    out_bits: int,
    out_scale: int,
) -> QTensor:
    """Per-row normalization; zero-variance rows are defined as zeros before
    the affine step."""
    v = x.to_real()
    mu = v.mean(axis=1, keepdims=True)
    var = v.var(axis=1, keepdims=True)
    normed = np.divide(v - mu, np.sqrt(var), out=np.zeros_like(v), where=var > 0)
    return saturate_quantize(normed * gamma + beta, out_bits, out_scale)


def residual_add(a: QTensor, b: QTensor, out_bits: int, out_scale: int) -> QTensor:
    return saturate_quantize(a.to_real() + b.to_real(), out_bits, out_scale)
