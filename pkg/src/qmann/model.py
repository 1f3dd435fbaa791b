"""Memory-augmented network with R-hop content-based reads.

    M_a = W_a V,  M_r = W_r V                      (memory write)
    k_1 = W_q q
    w_i = softmax(S(M_a, k_i)),  r_i = M_r w_i     (hop i = 1..R)
    k_{i+1} = W_key k_i + r_i
    o = softmax(W_o k_{R+1})

The model runs in float, in fixed point (parameters, memories and
activations quantized; softmax and the output layer stay float), or with
binary {-1, +1} keys and reads on top of fixed-point parameters/memories.
Float master weights are kept for training; every forward quantizes them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .addressing import softmax, softmax_backward
from .fxp import QFormat, fx_contract, mq_formats, quantize_array, rescale_raw, saturate_raw
from .similarity import HammingWeights, SimilarityRecord, hamming_grad_raw, hamming_raw

__all__ = [
    "QuantConfig",
    "MannParams",
    "MemoryState",
    "HopTrace",
    "MannModel",
    "PARAM_NAMES",
    "CHECKPOINT_VERSION",
    "binarize_act",
    "binarize_act_backward",
]

PARAM_NAMES = ("W_a", "W_r", "W_q", "W_key", "W_o")
CHECKPOINT_VERSION = 1
OVERFLOW_COMPONENTS = ("param", "memory", "key", "read", "similarity", "address")


@dataclass(frozen=True)
class QuantConfig:
    """Number formats of one run; all three formats ``None`` means float."""

    param_fmt: Optional[QFormat] = None
    act_fmt: Optional[QFormat] = None
    mem_fmt: Optional[QFormat] = None
    similarity: str = "dot"
    binary_act: bool = False
    mq: bool = False
    alpha: int = -3

    def __post_init__(self):
        fmts = (self.param_fmt, self.act_fmt, self.mem_fmt)
        if any(f is None for f in fmts) and any(f is not None for f in fmts):
            raise ValueError("set all of param/act/mem formats, or none for float")
        if self.similarity not in ("dot", "hamming"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if not self.fixed and (self.similarity == "hamming" or self.binary_act or self.mq):
            raise ValueError("Hamming similarity, binary activations and MQ need fixed-point formats")

    @classmethod
    def uniform(cls, fmt: Optional[QFormat], **kw) -> "QuantConfig":
        return cls(fmt, fmt, fmt, **kw)

    @property
    def fixed(self) -> bool:
        return self.param_fmt is not None

    def to_json(self) -> dict:
        f = lambda q: None if q is None else str(q)
        return {
            "param_fmt": f(self.param_fmt),
            "act_fmt": f(self.act_fmt),
            "mem_fmt": f(self.mem_fmt),
            "similarity": self.similarity,
            "binary_act": self.binary_act,
            "mq": self.mq,
            "alpha": self.alpha,
        }

    @classmethod
    def from_json(cls, d: dict) -> "QuantConfig":
        f = lambda s: None if s is None else QFormat.parse(s)
        return cls(f(d["param_fmt"]), f(d["act_fmt"]), f(d["mem_fmt"]), d["similarity"],
                   d["binary_act"], d["mq"], d["alpha"])


@dataclass
class MannParams:
    W_a: np.ndarray
    W_r: np.ndarray
    W_q: np.ndarray
    W_key: np.ndarray
    W_o: np.ndarray

    @classmethod
    def init(cls, I: int, E: int, rng: np.random.Generator, std: float = 0.1) -> "MannParams":
        g = lambda *s: rng.normal(0.0, std, size=s)
        return cls(W_a=g(E, I), W_r=g(E, I), W_q=g(E, I), W_key=g(E, E), W_o=g(I, E))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "MannParams":
        return MannParams(**{k: v.copy() for k, v in self.as_dict().items()})


@dataclass
class MemoryState:
    M_a: np.ndarray  # E x L
    M_r: np.ndarray


@dataclass
class HopTrace:
    keys: list
    weights: list
    reads: list
    outputs: list  # softmax(W_o k_i) per hop, diagnostics only
    final_key: np.ndarray


class _Cache:
    """Forward intermediates needed by the backward pass (all float views)."""

    def __init__(self):
        self.k_pre, self.k, self.mk = [], [], []
        self.s, self.ms, self.p, self.pq = [], [], [], []
        self.r_pre, self.r, self.mr = [], [], []
        self.gu, self.gv = [], []
        self.overflow = {c: 0 for c in OVERFLOW_COMPONENTS}


def binarize_act(x) -> np.ndarray:
    """sign(x) into {-1, +1} with sign(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def binarize_act_backward(x, g) -> np.ndarray:
    """Straight-through: pass ``g`` where ``|x| <= 1``, zero elsewhere."""
    return np.where(np.abs(np.asarray(x)) <= 1.0, g, 0.0)


def _deq(raw, frac):
    return np.ldexp(np.asarray(raw, dtype=np.float64), -frac)


def _word_lists(X):
    """Indices of the nonzero entries along axis -2 of a 0/1 array, padded.

    X has shape (..., I, L') ; returns idx (..., L', T) and valid mask.
    """
    Xt = np.moveaxis(X, -2, -1) != 0  # (..., L', I)
    T = max(int(Xt.sum(axis=-1).max(initial=0)), 1)
    # stable argsort puts present words first, in increasing index order
    order = np.argsort(~Xt, axis=-1, kind="stable")[..., :T]
    valid = np.take_along_axis(Xt, order, axis=-1)
    return order, valid


class MannModel:
    def __init__(self, I: int, E: int = 60, L: int = 50, R: int = 3, quant: Optional[QuantConfig] = None,
                 seed: int = 0, init_std: float = 0.1):
        self.I, self.E, self.L, self.R = I, E, L, R
        self.quant = quant or QuantConfig()
        self.params = MannParams.init(I, E, np.random.default_rng(seed), init_std)

    # ------------------------------------------------------------------
    # public per-story API

    def write_memory(self, V) -> MemoryState:
        V = np.asarray(V)
        if V.shape[0] != self.I or V.shape[1] > self.L:
            raise ValueError(f"sentence matrix {V.shape} does not fit I={self.I}, L={self.L}")
        c = _Cache()
        self._write(c, V[None], np.ones((1, V.shape[1]), bool), self._effective())
        return MemoryState(c.Ma[0], c.Mr[0])

    def read_hops(self, state: MemoryState, q) -> HopTrace:
        c = _Cache()
        eff = self._effective()
        L = state.M_a.shape[1]
        c.Ma, c.Mr = state.M_a[None], state.M_r[None]
        if self.quant.fixed:
            mf = self.quant.mem_fmt
            c.Ma_raw = quantize_array(state.M_a[None], mf)[0]
            c.Mr_raw = quantize_array(state.M_r[None], mf)[0]
        c.mask = np.ones((1, L), bool)
        self._read(c, np.asarray(q)[None], eff)
        Wo = self.params.W_o
        outs = [softmax(Wo @ k[0]) for k in c.k]
        return HopTrace([k[0] for k in c.k[: self.R]], [p[0] for p in c.pq], [r[0] for r in c.r],
                        outs[1:], c.k[self.R][0])

    def output(self, trace: HopTrace) -> np.ndarray:
        return softmax(self.params.W_o @ trace.final_key)

    # ------------------------------------------------------------------
    # batched forward / backward

    def forward(self, V, q, mask, *, record: Optional[SimilarityRecord] = None, energy=None) -> _Cache:
        c = _Cache()
        eff = self._effective(c)
        c.eff = eff
        c.energy = energy
        self._write(c, V, mask, eff)
        self._read(c, q, eff, record)
        self._output(c)
        return c

    def predict(self, V, q, mask) -> np.ndarray:
        return np.argmax(self.forward(V, q, mask).logits, axis=-1)

    def loss_and_grads(self, V, q, mask, a, *, record=None):
        c = self.forward(V, q, mask, record=record)
        B = len(a)
        logp = c.logits - c.logits.max(-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
        loss = -float(np.mean(logp[np.arange(B), a]))
        return loss, self._backward(c, a), c

    # ------------------------------------------------------------------
    # internals

    def _effective(self, c: Optional[_Cache] = None) -> dict:
        """Weights as seen by the forward pass, plus straight-through masks."""
        P = self.params
        Q = self.quant
        eff = {}
        if not Q.fixed:
            for k in ("W_a", "W_r", "W_q"):
                eff[k] = [(getattr(P, k), None, 0, None)]
            eff["W_key"] = [(P.W_key, None, 0, None)] * self.R
            eff["slot_variant"] = None
            return eff

        def q(W, fmt):
            raw, n = quantize_array(W, fmt)
            if c is not None:
                c.overflow["param"] += n
            ste = np.abs(W) <= fmt.max_value
            return (_deq(raw, fmt.frac), raw, fmt.frac, ste)

        pf = Q.param_fmt
        nvar = 3 if Q.mq else 1
        for k in ("W_a", "W_r"):
            eff[k] = [q(getattr(P, k), mq_formats(pf, v) if Q.mq else pf) for v in range(nvar)]
        eff["W_q"] = [q(P.W_q, pf)]
        eff["W_key"] = [q(P.W_key, mq_formats(pf, h) if Q.mq else pf) for h in range(self.R)]
        eff["slot_variant"] = (np.arange(self.L) % 3) if Q.mq else None
        return eff

    def _act_fmt(self, step: int) -> QFormat:
        Q = self.quant
        return mq_formats(Q.act_fmt, step) if Q.mq else Q.act_fmt

    def _count(self, c, kind, op, n, comp):
        em = getattr(c, "energy", None)
        if em is not None and n:
            bits = 32 if kind == "float" else self.quant.param_fmt.n
            em.count(kind, op, bits, int(n), component=comp)

    # memory write -------------------------------------------------------

    def _write(self, c, V, mask, eff):
        V = np.asarray(V)
        c.V, c.mask = V, np.asarray(mask, bool)
        kind = "fixed" if self.quant.fixed else "float"
        nnz = int(np.count_nonzero(V))
        for name, attr in (("W_a", "Ma"), ("W_r", "Mr")):
            self._count(c, kind, "add", self.E * nnz, "memory")
            if not self.quant.fixed:
                setattr(c, attr, np.einsum("ei,bil->bel", eff[name][0][0], V))
                setattr(c, "m" + attr, None)
                continue
            raw, wide = self._fx_linear_bow(eff[name], V, self.quant.mem_fmt, c, "memory", eff["slot_variant"])
            mf = self.quant.mem_fmt
            setattr(c, attr + "_raw", raw)
            setattr(c, attr, _deq(raw, mf.frac))
            setattr(c, "m" + attr, np.abs(wide) <= mf.max_raw)

    def _fx_linear_bow(self, variants, X, out_fmt, c, comp, slot_variant=None):
        """Saturating ``W @ X`` for a 0/1 matrix X (B, I, L'), summing present words in order."""
        idx, valid = _word_lists(X)  # (B, L', T)
        B, Lp, T = idx.shape
        if slot_variant is None:
            _, raw, frac, _ = variants[0]
            g = raw[:, idx]  # (E, B, L', T)
        else:
            frac = max(v[2] for v in variants)
            g = np.zeros((self.E, B, Lp, T), dtype=np.int64)
            for vi, (_, raw, f, _) in enumerate(variants):
                cols = np.nonzero(slot_variant[:Lp] == vi)[0]
                if cols.size:
                    g[:, :, cols, :] = raw[:, idx[:, cols, :]] << (frac - f)
        g = np.moveaxis(g, 0, 1) * valid[:, None, :, :]  # (B, E, L', T)
        acc, n_sat, wide = fx_contract(g, frac, np.ones((1, 1, 1, T), np.int64), 0, out_fmt, T)
        c.overflow[comp] += n_sat
        return acc, wide

    # reads -------------------------------------------------------------

    def _read(self, c, q, eff, record=None):
        Q = self.quant
        q = np.asarray(q)
        c.q = q
        B = q.shape[0]
        fixed = Q.fixed
        kind = "fixed" if fixed else "float"
        mask = c.mask
        nvalid = int(mask.sum())
        # k_1 = W_q q
        self._count(c, kind, "add", self.E * int(np.count_nonzero(q)), "controller")
        if fixed:
            f0 = self._act_fmt(0)
            raw, wide = self._fx_linear_bow(eff["W_q"], q[:, :, None], f0, c, "key")
            k_raw, k_frac = raw[:, :, 0], f0.frac
            c.mk.append(np.abs(wide[:, :, 0]) <= f0.max_raw)
            k_raw, k_frac = self._maybe_binarize(c, k_raw, k_frac, c.k_pre, c.k)
        else:
            k = eff["W_q"][0][0] @ q.T
            k = k.T.copy()
            c.k_pre.append(k)
            c.k.append(k)
            c.mk.append(None)

        for h in range(self.R):
            # similarity
            if fixed:
                s_raw, s_mask, pre = self._fx_similarity(c, k_raw, k_frac, mask)
                sf = Q.act_fmt
                s = _deq(s_raw, sf.frac)
                c.ms.append(s_mask)
            else:
                s = np.einsum("bel,be->bl", c.Ma, c.k[-1])
                pre = s
                c.ms.append(None)
                c.gu.append(None)
                c.gv.append(None)
                self._count(c, "float", "mult", self.E * nvalid, "addressing")
                self._count(c, "float", "add", self.E * nvalid, "addressing")
            if record is not None:
                record.add(pre[mask])
            c.s.append(s)
            p = softmax(s, mask)
            self._count(c, "float", "exp", nvalid, "addressing")
            self._count(c, "float", "add", nvalid, "addressing")
            self._count(c, "float", "mult", nvalid, "addressing")
            c.p.append(p)
            # read
            if fixed:
                af = Q.act_fmt
                p_raw, n = quantize_array(p, af)
                c.overflow["address"] += n
                c.pq.append(_deq(p_raw, af.frac))
                rf = self._act_fmt(h)
                acc, n_sat, wide = fx_contract(c.Mr_raw, Q.mem_fmt.frac, p_raw[:, None, :], af.frac, rf,
                                               p_raw.shape[1])
                c.overflow["read"] += n_sat
                c.mr.append(np.abs(wide) <= rf.max_raw)
                self._count(c, "fixed", "mult", self.E * nvalid, "read")
                self._count(c, "fixed", "add", self.E * nvalid, "read")
                r_raw, r_frac = self._maybe_binarize(c, acc, rf.frac, c.r_pre, c.r)
                # k_{h+1} = W_key k_h + r_h
                kf = self._act_fmt(h + 1)
                _, Wk_raw, Wk_frac, _ = eff["W_key"][h]
                acc, n_sat, wide = fx_contract(Wk_raw[None], Wk_frac, k_raw[:, None, :], k_frac, kf, self.E)
                r_in, n_r = rescale_raw(r_raw, r_frac, kf)
                acc = acc + r_in
                wide = wide + r_in
                acc, n_add = saturate_raw(acc, kf)
                c.overflow["key"] += n_sat + n_r + n_add
                c.mk.append(np.abs(wide) <= kf.max_raw)
                # binary keys turn each multiply-accumulate into a signed add
                if not Q.binary_act:
                    self._count(c, "fixed", "mult", self.E * self.E * B, "controller")
                self._count(c, "fixed", "add", self.E * self.E * B, "controller")
                self._count(c, "fixed", "add", self.E * B, "controller")
                k_raw, k_frac = self._maybe_binarize(c, acc, kf.frac, c.k_pre, c.k)
            else:
                c.pq.append(p)
                r = np.einsum("bel,bl->be", c.Mr, p)
                c.r_pre.append(r)
                c.r.append(r)
                c.mr.append(None)
                self._count(c, "float", "mult", self.E * nvalid, "read")
                self._count(c, "float", "add", self.E * nvalid, "read")
                k = c.k[-1] @ eff["W_key"][h][0].T + r
                c.k_pre.append(k)
                c.k.append(k)
                c.mk.append(None)
                self._count(c, "float", "mult", self.E * self.E * B, "controller")
                self._count(c, "float", "add", self.E * self.E * B + self.E * B, "controller")

    def _maybe_binarize(self, c, raw, frac, pre_list, out_list):
        pre = _deq(raw, frac)
        pre_list.append(pre)
        if self.quant.binary_act:
            b = binarize_act(pre)
            out_list.append(b)
            return b.astype(np.int64), 0
        out_list.append(pre)
        return raw, frac

    def _fx_similarity(self, c, k_raw, k_frac, mask):
        Q = self.quant
        sf, mf = Q.act_fmt, Q.mem_fmt
        Ma_t = np.swapaxes(c.Ma_raw, 1, 2)  # (B, L, E)
        nvalid = int(mask.sum())
        if Q.similarity == "dot":
            acc, n_sat, wide = fx_contract(Ma_t, mf.frac, k_raw[:, None, :], k_frac, sf, self.E)
            if not Q.binary_act:
                self._count(c, "fixed", "mult", self.E * nvalid, "addressing")
            self._count(c, "fixed", "add", self.E * nvalid, "addressing")
            c.overflow["similarity"] += n_sat
            c.gu.append(None)
            c.gv.append(None)
            return acc, np.abs(wide) <= sf.max_raw, _deq(wide, sf.frac)
        hw = HammingWeights(Q.alpha, mf.n)
        km, n_k = rescale_raw(k_raw, k_frac, mf)
        c.overflow["key"] += n_k
        units = hamming_raw(Ma_t, km[:, None, :], mf.n)  # (B, L)
        acc, n_sat = rescale_raw(units, -hw.unit_exp, sf)
        c.overflow["similarity"] += n_sat
        self._count(c, "fixed", "add", self.E * nvalid, "addressing")
        c.gu.append(np.ldexp(hamming_grad_raw(Ma_t, km[:, None, :]).astype(np.float64), Q.alpha))
        c.gv.append(np.ldexp(hamming_grad_raw(km[:, None, :], Ma_t).astype(np.float64), Q.alpha))
        return acc, np.ones(acc.shape, bool), np.ldexp(units.astype(np.float64), hw.unit_exp)

    def _output(self, c):
        kR = c.k[self.R]
        c.logits = kR @ self.params.W_o.T
        c.o = softmax(c.logits)
        B = kR.shape[0]
        self._count(c, "float", "mult", self.I * self.E * B, "output")
        self._count(c, "float", "add", self.I * self.E * B, "output")

    def _backward(self, c, a) -> dict:
        Q = self.quant
        P = self.params
        B = len(a)
        binary = Q.binary_act
        dlog = c.o.copy()
        dlog[np.arange(B), a] -= 1.0
        dlog /= B
        g = {k: np.zeros_like(v) for k, v in P.as_dict().items()}
        g["W_o"] = dlog.T @ c.k[self.R]
        dk = dlog @ P.W_o
        dMa = np.zeros_like(c.Ma)
        dMr = np.zeros_like(c.Mr)
        eff = c.eff
        for h in reversed(range(self.R)):
            j = h + 1
            if binary:
                dk = binarize_act_backward(c.k_pre[j], dk)
            if c.mk[j] is not None:
                dk = dk * c.mk[j]
            Wk, _, _, ste = eff["W_key"][h]
            gk = dk.T @ c.k[h]
            g["W_key"] += gk if ste is None else gk * ste
            dr = dk
            dk_prev = dk @ Wk
            if binary:
                dr = binarize_act_backward(c.r_pre[h], dr)
            if c.mr[h] is not None:
                dr = dr * c.mr[h]
            dMr += dr[:, :, None] * c.pq[h][:, None, :]
            dp = np.einsum("bel,be->bl", c.Mr, dr)
            ds = np.where(c.mask, softmax_backward(c.p[h], dp), 0.0)
            if c.ms[h] is not None:
                ds = ds * c.ms[h]
            if c.gu[h] is None:
                dMa += ds[:, None, :] * c.k[h][:, :, None]
                dk_prev = dk_prev + np.einsum("bel,bl->be", c.Ma, ds)
            else:
                dMa += np.einsum("bl,ble->bel", ds, c.gu[h])
                dk_prev = dk_prev + np.einsum("bl,ble->be", ds, c.gv[h])
            dk = dk_prev
        if binary:
            dk = binarize_act_backward(c.k_pre[0], dk)
        if c.mk[0] is not None:
            dk = dk * c.mk[0]
        _, _, _, ste = eff["W_q"][0]
        gq = dk.T @ c.q
        g["W_q"] = gq if ste is None else gq * ste
        for name, dM, m in (("W_a", dMa, c.mMa), ("W_r", dMr, c.mMr)):
            if m is not None:
                dM = dM * m
            variants = eff[name]
            if eff["slot_variant"] is None:
                gw = np.einsum("bel,bil->ei", dM, c.V)
                ste = variants[0][3]
                g[name] = gw if ste is None else gw * ste
            else:
                Lp = c.V.shape[2]
                sv = eff["slot_variant"][:Lp]
                for vi, (_, _, _, ste) in enumerate(variants):
                    cols = sv == vi
                    if cols.any():
                        g[name] += np.einsum("bel,bil->ei", dM[:, :, cols], c.V[:, :, cols]) * ste
        return g

    # ------------------------------------------------------------------
    # checkpoints

    def to_checkpoint(self, extra: Optional[dict] = None) -> dict:
        """JSON-ready state.

        Float master weights are stored as shortest round-trip decimals, so a
        reload reproduces every forward pass bit for bit. Fixed-point runs
        also carry the quantized weights as scaled integers under their
        Q-format header.
        """
        ck = {
            "version": CHECKPOINT_VERSION,
            "shape": {"I": self.I, "E": self.E, "L": self.L, "R": self.R},
            "quant": self.quant.to_json(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.as_dict().items()},
        }
        if self.quant.fixed:
            pf = self.quant.param_fmt
            ck["quantized"] = {
                k: {"format": str(pf), "shape": list(v.shape), "data": quantize_array(v, pf)[0].ravel().tolist()}
                for k, v in self.params.as_dict().items()
            }
        if extra:
            ck["extra"] = extra
        return ck

    @classmethod
    def from_checkpoint(cls, ck: dict) -> "MannModel":
        v = ck.get("version")
        if v != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {v!r}")
        sh = ck["shape"]
        m = cls(sh["I"], sh["E"], sh["L"], sh["R"], QuantConfig.from_json(ck["quant"]))
        arrs = {k: np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for k, p in ck["params"].items()}
        m.params = MannParams(**{k: arrs[k] for k in PARAM_NAMES})
        for k, q in ck.get("quantized", {}).items():
            fmt = QFormat.parse(q["format"])
            raw = np.asarray(q["data"], dtype=np.int64).reshape(q["shape"])
            if not np.array_equal(raw, quantize_array(arrs[k], fmt)[0]):
                raise ValueError(f"quantized payload of {k} disagrees with its master weights")
        return m

    def save(self, path: str, extra: Optional[dict] = None) -> None:
        with open(path, "w") as f:
            json.dump(self.to_checkpoint(extra), f)

    @classmethod
    def load(cls, path: str) -> "MannModel":
        with open(path) as f:
            return cls.from_checkpoint(json.load(f))
