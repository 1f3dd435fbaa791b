"""Content-based addressing: softmax over per-slot similarities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fxp import FixedTensor, OverflowCounter, QFormat, quantize_array
from .similarity import HammingWeights, SimilarityRecord, hamming_raw
from .fxp import fx_contract

__all__ = ["ReadWeights", "softmax", "softmax_backward", "content_address"]


@dataclass
class ReadWeights:
    w: np.ndarray
    fmt: Optional[QFormat] = None

    def check(self) -> None:
        if (self.w < 0).any():
            raise ValueError("negative read weight")
        L = self.w.shape[-1]
        tol = 1e-6 if self.fmt is None else L * self.fmt.resolution
        if np.abs(self.w.sum(axis=-1) - 1.0).max() > tol:
            raise ValueError("read weights do not sum to one")


def softmax(s, mask=None, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; entries where ``mask`` is False get weight 0."""
    s = np.asarray(s, dtype=np.float64)
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m = np.max(s, axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, dp, axis: int = -1):
    return p * (dp - np.sum(p * dp, axis=axis, keepdims=True))


def content_address(
    M,
    k,
    sim: str = "dot",
    fmt: Optional[QFormat] = None,
    *,
    alpha: int = -3,
    record: Optional[SimilarityRecord] = None,
    counter: Optional[OverflowCounter] = None,
) -> ReadWeights:
    """Read weights for memory rows ``M`` (L x dim) against key ``k`` (dim,).

    With ``fmt`` set, both operands are quantized and scored in fixed point;
    the softmax itself runs in float and its output is re-quantized to ``fmt``.
    """
    M = np.asarray(M, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] == 0:
        raise ValueError("memory must be a non-empty L x dim matrix")
    if k.shape != (M.shape[1],):
        raise ValueError(f"key dimension {k.shape} does not match memory rows {M.shape[1]}")
    if fmt is None:
        if sim != "dot":
            raise ValueError("Hamming similarity needs a fixed-point format")
        s = M @ k
        if record is not None:
            record.add(s)
        return ReadWeights(softmax(s))
    Mr, o1 = quantize_array(M, fmt)
    kr, o2 = quantize_array(k, fmt)
    if sim == "dot":
        acc, n_sat, wide = fx_contract(Mr, fmt.frac, kr[None, :], fmt.frac, fmt, M.shape[1])
        pre = np.ldexp(wide.astype(np.float64), -fmt.frac)
    elif sim == "hamming":
        hw = HammingWeights(alpha, fmt.n)
        units = hamming_raw(Mr, kr[None, :], fmt.n)
        pre = np.ldexp(units.astype(np.float64), hw.unit_exp)
        acc, n_sat = quantize_array(pre, fmt)
    else:
        raise ValueError(f"unknown similarity {sim!r}")
    if counter is not None:
        counter.add(o1 + o2 + n_sat)
    if record is not None:
        record.add(pre, n_sat)
    s = np.ldexp(acc.astype(np.float64), -fmt.frac)
    w, _ = quantize_array(softmax(s), fmt)
    return ReadWeights(np.ldexp(w.astype(np.float64), -fmt.frac), fmt)
