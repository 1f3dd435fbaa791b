"""Similarity measures for content addressing.

The conventional MANN scores memory slots with a dot product, which is
unbounded and saturates easily in narrow fixed-point formats.  The Hamming
similarity compares sign-magnitude bit patterns instead, so its range is known
up front:

    S_H(U, V) = sum_i s(u_i) s(v_i) sum_k w_k XNOR(u_ik, v_ik),   w_k = 2**(k + alpha - n)

Because ``sum_k 2**k XNOR(a_k, b_k)`` is just the integer ``~(a ^ b)`` masked to
the magnitude bits, the per-element term needs only an XOR, a sign product and
one addition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .fxp import (
    FixedScalar,
    FixedTensor,
    FormatMismatchError,
    OverflowCounter,
    QFormat,
    fx_contract,
    quantize_array,
)

__all__ = [
    "HammingWeights",
    "SimilarityRecord",
    "SaturationError",
    "cosine_similarity",
    "dot_similarity",
    "dot_error_decomposition",
    "hamming_similarity",
    "hamming_backward",
    "hamming_raw",
    "hamming_grad_raw",
    "softmax_error_bound",
    "SoftmaxBound",
]


class SaturationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class HammingWeights:
    alpha: int
    n: int

    @property
    def unit_exp(self) -> int:
        """Exponent of the least significant weight, ``alpha - n``."""
        return self.alpha - self.n

    @property
    def w(self) -> np.ndarray:
        return np.ldexp(1.0, np.arange(self.n - 1) + self.alpha - self.n)

    @property
    def total(self) -> float:
        return math.ldexp((1 << (self.n - 1)) - 1, self.unit_exp)

    def bound(self, dim: int) -> float:
        return dim * self.total


class SimilarityRecord:
    """Collects similarity scores and saturation events for one run/step."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self.overflow_events = 0

    def add(self, values, overflow_events: int = 0) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size:
            self._chunks.append(v)
        self.overflow_events += int(overflow_events)

    @property
    def values(self) -> np.ndarray:
        if not self._chunks:
            return np.zeros(0)
        if len(self._chunks) > 1:
            self._chunks = [np.concatenate(self._chunks)]
        return self._chunks[0]

    def __len__(self) -> int:
        return sum(c.size for c in self._chunks)

    def histogram(self, iwl: int, bins: int = 101):
        from .diag import histogram

        return histogram(self.values, iwl, bins)


# ---------------------------------------------------------------------------
# dot product


def cosine_similarity(u, v) -> float:
    """Float-only reference; quantized addressing uses the dot product."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def dot_similarity(
    u,
    v,
    mode: Optional[QFormat] = None,
    *,
    record: Optional[SimilarityRecord] = None,
    counter: Optional[OverflowCounter] = None,
    energy=None,
) -> float:
    """Dot product in float (``mode=None``) or in the fixed-point format ``mode``.

    In fixed mode both operands are quantized, then each product is rounded
    into the format and accumulated in order with saturation.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if mode is None:
        z = math.fsum(u * v)
        if energy is not None:
            energy.count("float", "mult", 32, u.size)
            energy.count("float", "add", 32, max(u.size - 1, 0))
        if record is not None:
            record.add([z])
        return z
    fmt = mode
    ur, ou = quantize_array(u, fmt)
    vr, ov = quantize_array(v, fmt)
    acc, n_sat, wide = fx_contract(ur, fmt.frac, vr, fmt.frac, fmt, u.size)
    n_over = ou + ov + n_sat
    if counter is not None:
        counter.add(n_over)
    if energy is not None:
        energy.count("fixed", "mult", fmt.n, u.size)
        energy.count("fixed", "add", fmt.n, u.size)
    if record is not None:
        record.add([math.ldexp(int(wide), -fmt.frac)], n_over)
    return math.ldexp(int(acc), -fmt.frac)


def dot_error_decomposition(u, v, fmt: QFormat):
    """Split the quantized dot product into ``Z``, first-order error and residual.

    With ``eps = quantized - exact`` per element, the quantized product
    expands exactly as ``Z + sum(u*eps_v + v*eps_u) + sum(eps_u*eps_v)``.
    Everything is evaluated in exact rationals, so the returned residual
    equals ``sum(eps_u * eps_v)`` up to the final float conversion.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    ur, ou = quantize_array(u, fmt)
    vr, ov = quantize_array(v, fmt)
    if ou or ov:
        raise SaturationError("input quantization saturated")
    scale = 1 << fmt.frac
    lim = Fraction(fmt.max_raw, scale)
    z = zhat = first = Fraction(0)
    for a, b, ra, rb in zip(u.tolist(), v.tolist(), ur.tolist(), vr.tolist()):
        fa, fb = Fraction(a), Fraction(b)
        qa, qb = Fraction(ra, scale), Fraction(rb, scale)
        z += fa * fb
        zhat += qa * qb
        if abs(qa * qb) > lim or abs(zhat) > lim:
            raise SaturationError("accumulation left the representable range")
        first += fa * (qb - fb) + fb * (qa - fa)
    return float(z), float(first), float(zhat - z - first)


# ---------------------------------------------------------------------------
# Hamming similarity


def hamming_raw(u_raw, v_raw, n: int, axis: int = -1):
    """Integer S_H in units of ``2**(alpha - n)``, summed over ``axis``."""
    mask = (1 << (n - 1)) - 1
    u_raw = np.asarray(u_raw, dtype=np.int64)
    v_raw = np.asarray(v_raw, dtype=np.int64)
    agree = ~(np.abs(u_raw) ^ np.abs(v_raw)) & mask
    sign = np.where((u_raw < 0) != (v_raw < 0), -1, 1)
    return np.sum(sign * agree, axis=axis)


def hamming_grad_raw(u_raw, v_raw):
    """Approximate gradient of S_H w.r.t. ``u``, in units of ``2**alpha``.

    Elementwise ``s_u (s_u - s_v) - s_v (popcount|u| - popcount|v|)``; the
    second term is the bit-difference sum over magnitude bits.
    """
    u_raw = np.asarray(u_raw, dtype=np.int64)
    v_raw = np.asarray(v_raw, dtype=np.int64)
    su = np.where(u_raw < 0, -1, 1)
    sv = np.where(v_raw < 0, -1, 1)
    bit_diff = np.bitwise_count(np.abs(u_raw)).astype(np.int64) - np.bitwise_count(
        np.abs(v_raw)
    ).astype(np.int64)
    return su * (su - sv) - sv * bit_diff


def _check_pair(U: FixedTensor, V: FixedTensor, w: HammingWeights):
    if U.shape != V.shape:
        raise ValueError(f"length mismatch: {U.shape} vs {V.shape}")
    if U.fmt != V.fmt:
        raise FormatMismatchError(f"{U.fmt} vs {V.fmt}")
    if U.fmt.n != w.n:
        raise FormatMismatchError(f"bit width {U.fmt.n} does not match weights (n={w.n})")


def hamming_similarity(
    U: FixedTensor, V: FixedTensor, w: HammingWeights, *, energy=None
) -> float:
    _check_pair(U, V, w)
    total = int(hamming_raw(U.raw, V.raw, w.n, axis=None)) if U.raw.size else 0
    if energy is not None:
        energy.count("fixed", "add", w.n, U.raw.size)
    return math.ldexp(total, w.unit_exp)


def hamming_backward(U: FixedTensor, V: FixedTensor, w: HammingWeights) -> np.ndarray:
    """Gradient w.r.t. ``U``; call with the arguments swapped for ``V``."""
    _check_pair(U, V, w)
    return np.ldexp(hamming_grad_raw(U.raw, V.raw).astype(np.float64), w.alpha)


# ---------------------------------------------------------------------------
# softmax perturbation


class SoftmaxBound(NamedTuple):
    ratios: np.ndarray
    eps_spread: float
    eps_max: float
    holds_spread: bool
    holds_max: bool


def _softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


def softmax_error_bound(z, eps, rtol: float = 1e-12) -> SoftmaxBound:
    """Compare softmax(z + eps) against softmax(z).

    The amplification ``y_hat_i / y_i`` is bounded by ``exp(max_ik(eps_i - eps_k))``.
    The looser reading with ``eps_max = max_i |eps_i|`` is reported too; it
    can fail because the spread may reach twice that value.
    """
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ratios = _softmax(z + eps) / _softmax(z)
    spread = float(eps.max() - eps.min()) if eps.size else 0.0
    emax = float(np.abs(eps).max()) if eps.size else 0.0
    slack = 1.0 + rtol
    return SoftmaxBound(
        ratios,
        spread,
        emax,
        bool(np.all(ratios <= math.exp(spread) * slack)),
        bool(np.all(ratios <= math.exp(emax) * slack)),
    )
