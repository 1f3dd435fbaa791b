"""Software-simulated Q-format fixed-point arithmetic.

Values are stored as exact scaled integers in sign-magnitude semantics: a raw
integer ``m`` in format ``Qiwl.frac`` represents ``m * 2**-frac`` with
``|m| <= 2**(n-1) - 1`` where ``n = 1 + iwl + frac``.  Out-of-range results
saturate to the range edge and are counted as overflows.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "QFormat",
    "FixedScalar",
    "FixedTensor",
    "OverflowCounter",
    "FormatMismatchError",
    "quantize",
    "dequantize",
    "error_bound",
    "fx_add",
    "fx_mul",
    "quantize_array",
    "round_shift",
    "rescale_raw",
    "saturate_raw",
    "fx_contract",
    "mq_formats",
]

_QFMT_RE = re.compile(r"^\s*q(\d+)\.(\d+)\s*$", re.IGNORECASE)


class FormatMismatchError(ValueError):
    """Operands carry different Q-formats and no rescale was requested."""


@dataclass(frozen=True, order=True)
class QFormat:
    iwl: int
    frac: int

    def __post_init__(self):
        if self.iwl < 0 or self.frac < 0:
            raise ValueError(f"negative field width in Q{self.iwl}.{self.frac}")
        if self.n < 2:
            raise ValueError("a Q-format needs a sign bit and at least one magnitude bit")

    @property
    def n(self) -> int:
        return 1 + self.iwl + self.frac

    @property
    def max_raw(self) -> int:
        return (1 << (self.n - 1)) - 1

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.frac

    @property
    def max_value(self) -> float:
        return self.max_raw * 2.0 ** -self.frac

    @classmethod
    def parse(cls, text: str) -> "QFormat":
        m = _QFMT_RE.match(text)
        if m is None:
            raise ValueError(f"not a Q-format: {text!r} (expected e.g. 'Q5.2')")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self) -> str:
        return f"Q{self.iwl}.{self.frac}"


class OverflowCounter:
    """Saturation tally owned by one computation context (not thread-safe)."""

    def __init__(self, count: int = 0):
        self.count = count

    def add(self, k: int = 1) -> None:
        self.count += int(k)

    def __repr__(self) -> str:
        return f"OverflowCounter({self.count})"


@dataclass(frozen=True)
class FixedScalar:
    raw: int
    fmt: QFormat

    def __post_init__(self):
        if abs(self.raw) > self.fmt.max_raw:
            raise ValueError(f"raw value {self.raw} out of range for {self.fmt}")

    @classmethod
    def from_bits(cls, sign: int, magnitude_bits: Sequence[int], fmt: QFormat) -> "FixedScalar":
        """Build from a sign and ``n-1`` magnitude bits, least significant first."""
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if len(magnitude_bits) != fmt.n - 1:
            raise ValueError(f"expected {fmt.n - 1} magnitude bits, got {len(magnitude_bits)}")
        mag = sum(int(b) << k for k, b in enumerate(magnitude_bits))
        return cls(sign * mag, fmt)

    @property
    def sign(self) -> int:
        # sign(0) = +1
        return -1 if self.raw < 0 else 1

    @property
    def magnitude_bits(self) -> tuple:
        mag = abs(self.raw)
        return tuple((mag >> k) & 1 for k in range(self.fmt.n - 1))

    @property
    def exact(self) -> Fraction:
        return Fraction(self.raw, 1 << self.fmt.frac)

    @property
    def value(self) -> float:
        return self.raw * 2.0 ** -self.fmt.frac

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        return f"FixedScalar({self.value!r}, {self.fmt})"


def _round_scaled(y, mode: str, rng: Optional[np.random.Generator]):
    if mode == "nearest":
        return np.rint(y)  # ties to even
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs a seeded numpy Generator")
        return np.floor(y + rng.random(np.shape(y)))
    raise ValueError(f"unknown rounding mode {mode!r}")


def quantize(
    x: float,
    fmt: QFormat,
    mode: str = "nearest",
    *,
    counter: Optional[OverflowCounter] = None,
    rng: Optional[np.random.Generator] = None,
) -> FixedScalar:
    """Round ``x`` onto the grid of ``fmt``, saturating at the range edge."""
    x = float(x)
    if math.isnan(x):
        raise ValueError("cannot quantize NaN")
    if math.isinf(x):
        r = fmt.max_raw
    else:
        r = int(_round_scaled(math.ldexp(x, fmt.frac), mode, rng))
    if abs(r) > fmt.max_raw or math.isinf(x):
        if counter is not None:
            counter.add()
        r = fmt.max_raw if x > 0 else -fmt.max_raw
    return FixedScalar(r, fmt)


def dequantize(a: FixedScalar) -> float:
    return a.value


def error_bound(x: float, fmt: QFormat) -> float:
    """Quantization error bound: ``2**-frac`` in range, distance to ``2**iwl`` on overflow."""
    edge = 2.0 ** fmt.iwl
    if abs(x) < edge:
        return 2.0 ** -fmt.frac
    return abs(edge - abs(x))


def _count_energy(energy, op: str, fmt: QFormat, k: int = 1, component: Optional[str] = None):
    if energy is not None and k:
        energy.count("fixed", op, fmt.n, k, component=component)


def _align(a: FixedScalar, b: FixedScalar, rescale: bool, counter):
    if a.fmt == b.fmt:
        return b
    if not rescale:
        raise FormatMismatchError(f"{a.fmt} vs {b.fmt}; pass rescale=True to convert")
    raw, ovf = rescale_raw(np.int64(b.raw), b.fmt.frac, a.fmt)
    if counter is not None:
        counter.add(ovf)
    return FixedScalar(int(raw), a.fmt)


def fx_add(
    a: FixedScalar,
    b: FixedScalar,
    *,
    rescale: bool = False,
    counter: Optional[OverflowCounter] = None,
    energy=None,
) -> FixedScalar:
    b = _align(a, b, rescale, counter)
    fmt = a.fmt
    s = a.raw + b.raw
    if abs(s) > fmt.max_raw:
        if counter is not None:
            counter.add()
        s = fmt.max_raw if s > 0 else -fmt.max_raw
    _count_energy(energy, "add", fmt)
    return FixedScalar(s, fmt)


def fx_mul(
    a: FixedScalar,
    b: FixedScalar,
    *,
    rescale: bool = False,
    counter: Optional[OverflowCounter] = None,
    energy=None,
) -> FixedScalar:
    b = _align(a, b, rescale, counter)
    fmt = a.fmt
    # exact product carries 2*frac fraction bits
    p = int(round_shift(np.int64(a.raw * b.raw), fmt.frac))
    if abs(p) > fmt.max_raw:
        if counter is not None:
            counter.add()
        p = fmt.max_raw if p > 0 else -fmt.max_raw
    _count_energy(energy, "mult", fmt)
    return FixedScalar(p, fmt)


# ---------------------------------------------------------------------------
# vectorized kernels on raw int64 arrays


def round_shift(raw, shift: int):
    """Divide integers by ``2**shift`` rounding half to even (multiply if negative)."""
    raw = np.asarray(raw, dtype=np.int64)
    if shift <= 0:
        return raw << -shift
    q = raw >> shift  # floor
    rem = raw - (q << shift)
    half = np.int64(1) << (shift - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up


def saturate_raw(raw, fmt: QFormat):
    """Clamp to the representable range; returns ``(clamped, n_saturated)``."""
    raw = np.asarray(raw, dtype=np.int64)
    over = np.abs(raw) > fmt.max_raw
    n_over = int(np.count_nonzero(over))
    if n_over:
        raw = np.clip(raw, -fmt.max_raw, fmt.max_raw)
    return np.asarray(raw, dtype=np.int64), n_over


def rescale_raw(raw, from_frac: int, fmt: QFormat):
    return saturate_raw(round_shift(raw, from_frac - fmt.frac), fmt)


def quantize_array(
    x,
    fmt: QFormat,
    mode: str = "nearest",
    rng: Optional[np.random.Generator] = None,
):
    """Quantize a float array; returns ``(raw int64 array, n_saturated)``."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("cannot quantize NaN")
    lim = float(fmt.max_raw + 1)
    y = np.clip(np.ldexp(x, fmt.frac), -lim, lim)
    r = _round_scaled(y, mode, rng).astype(np.int64)
    return saturate_raw(r, fmt)


def fx_contract(
    a,
    a_frac: int,
    b,
    b_frac: int,
    out_fmt: QFormat,
    n_terms: int,
    init=None,
    init_frac: Optional[int] = None,
):
    """Sequential saturating multiply-accumulate along the last axis.

    ``a`` and ``b`` are raw integer arrays broadcastable against each other
    whose last axis has length ``n_terms``.  Each product is rounded into
    ``out_fmt`` and added to the running sum with saturation, in index order.
    ``init`` optionally seeds the accumulator.

    Returns ``(acc, n_saturated, wide)`` where ``wide`` is the sum of the
    rounded products without any clamping (what an unbounded accumulator
    would hold) and ``n_saturated`` counts clamping events (products and
    partial sums) over all steps.
    """
    shift = a_frac + b_frac - out_fmt.frac
    shape = np.broadcast_shapes(np.shape(a)[:-1], np.shape(b)[:-1])
    if init is None:
        acc = np.zeros(shape, dtype=np.int64)
        n_sat = 0
    else:
        acc, n_sat = rescale_raw(np.broadcast_to(init, shape), init_frac, out_fmt)
        acc = acc.copy()
    wide = acc.copy()
    for t in range(n_terms):
        p = round_shift(a[..., t] * b[..., t], shift)
        wide = wide + p
        # the product is itself a saturating fixed-point result
        p, n_p = saturate_raw(p, out_fmt)
        acc, n_a = saturate_raw(acc + p, out_fmt)
        n_sat += n_p + n_a
    return acc, n_sat, wide


@dataclass
class FixedTensor:
    """Rank-1/2 array of fixed-point values sharing one format."""

    raw: np.ndarray
    fmt: QFormat
    overflow_count: int = 0

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.int64)
        if self.raw.ndim not in (1, 2):
            raise ValueError("FixedTensor is rank 1 or 2")
        if (np.abs(self.raw) > self.fmt.max_raw).any():
            raise ValueError(f"raw values out of range for {self.fmt}")

    @classmethod
    def from_float(cls, x, fmt: QFormat, mode: str = "nearest", rng=None) -> "FixedTensor":
        raw, n_over = quantize_array(x, fmt, mode, rng)
        return cls(raw, fmt, n_over)

    @property
    def shape(self):
        return self.raw.shape

    def __len__(self):
        return len(self.raw)

    def __getitem__(self, idx) -> FixedScalar:
        return FixedScalar(int(self.raw[idx]), self.fmt)

    def to_float(self) -> np.ndarray:
        return np.ldexp(self.raw.astype(np.float64), -self.fmt.frac)

    @property
    def signs(self) -> np.ndarray:
        return np.where(self.raw < 0, -1, 1).astype(np.int64)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.raw)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": str(self.fmt),
                "shape": list(self.shape),
                "overflow_count": self.overflow_count,
                "data": self.raw.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FixedTensor":
        d = json.loads(text)
        raw = np.asarray(d["data"], dtype=np.int64).reshape(d["shape"])
        return cls(raw, QFormat.parse(d["format"]), int(d.get("overflow_count", 0)))


_MQ_CYCLE = (0, 1, -1)


def mq_formats(base: QFormat, hop: int) -> QFormat:
    """Per-step format for memory-controller quantization control.

    Cycles the fraction width by 0, +1, -1 (integer width moving the other
    way) so the total bit width never changes.  A step that would leave
    ``iwl < 0`` or ``frac < 1`` falls back to ``base``.
    """
    if base.n < 3:
        raise ValueError(f"{base} is too narrow to perturb")
    d = _MQ_CYCLE[hop % 3]
    iwl, frac = base.iwl - d, base.frac + d
    if iwl < 0 or frac < 1:
        return base
    return QFormat(iwl, frac)
