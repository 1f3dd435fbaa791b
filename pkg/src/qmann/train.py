"""Quantization-aware SGD training with early stopping and MQ."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .data import Dataset, encode_batch
from .diag import histogram, inter_decile_width
from .fxp import QFormat, mq_formats
from .model import OVERFLOW_COMPONENTS, MannModel, QuantConfig, binarize_act, binarize_act_backward
from .similarity import SimilarityRecord

__all__ = [
    "ESConfig",
    "TrainConfig",
    "RunMetrics",
    "TrainingDiverged",
    "StopDecision",
    "early_stop",
    "mq_formats",
    "binarize_act",
    "binarize_act_backward",
    "build_model",
    "evaluate",
    "train",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ESConfig:
    enabled: bool = False
    patience: int = 10
    min_delta: float = 0.0


@dataclass
class TrainConfig:
    learning_rate: float = 0.3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    param_format: Optional[str] = None  # e.g. "Q5.2"; None = float
    act_format: Optional[str] = None
    mem_format: Optional[str] = None
    similarity: str = "dot"
    binary_act: bool = False
    mq: bool = False
    es: ESConfig = field(default_factory=ESConfig)
    alpha: int = -3
    E: int = 60
    L: int = 50
    R: int = 3
    init_std: float = 0.1
    max_grad_norm: Optional[float] = 5.0  # global-norm clip; None disables
    hist_iwl: Optional[int] = None  # histogram range; defaults to the act format's iwl (5 for float)

    def __post_init__(self):
        if isinstance(self.es, dict):
            self.es = ESConfig(**self.es)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.es.patience < 1:
            raise ValueError("patience must be >= 1")
        self.quant  # validates the format combination

    @property
    def quant(self) -> QuantConfig:
        f = lambda s: None if s is None else QFormat.parse(s)
        return QuantConfig(f(self.param_format), f(self.act_format), f(self.mem_format),
                           self.similarity, self.binary_act, self.mq, self.alpha)

    @property
    def histogram_iwl(self) -> int:
        if self.hist_iwl is not None:
            return self.hist_iwl
        q = self.quant
        return q.act_fmt.iwl if q.fixed else 5

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)  # one dict per epoch
    histograms: list = field(default_factory=list)  # (step, bin_lo, bin_hi, count)
    best_epoch: Optional[int] = None
    stopped_epoch: Optional[int] = None
    final: dict = field(default_factory=dict)

    def history(self, key: str) -> list:
        return [ep[key] for ep in self.epochs]

    def to_json(self) -> dict:
        return asdict(self)


class StopDecision(NamedTuple):
    stop: bool
    best_epoch: int  # 1-based


def early_stop(history, patience: int = 10, min_delta: float = 0.0) -> StopDecision:
    """Stop once ``patience`` epochs pass without beating the best by more than ``min_delta``."""
    if not history:
        raise ValueError("empty validation history")
    best, best_i = history[0], 0
    for i, v in enumerate(history[1:], 1):
        if v < best - min_delta:
            best, best_i = v, i
    return StopDecision(len(history) - 1 - best_i >= patience, best_i + 1)


def build_model(cfg: TrainConfig, I: int) -> MannModel:
    return MannModel(I, E=cfg.E, L=cfg.L, R=cfg.R, quant=cfg.quant, seed=cfg.seed, init_std=cfg.init_std)


class _Encoded:
    def __init__(self, stories, vocab, L):
        if stories:
            self.V, self.q, self.a, self.mask = encode_batch(stories, vocab, L)
        else:
            self.V = None
        self.n = len(stories)

    def batch(self, idx):
        # trim padding slots no story in the batch uses
        Lb = max(int(self.mask[idx].sum(axis=1).max()), 1)
        return self.V[idx, :, :Lb], self.q[idx], self.a[idx], self.mask[idx, :Lb]


def _error_rate(model, enc: _Encoded, batch_size: int, energy=None) -> Optional[float]:
    if enc.n == 0:
        return None
    wrong = 0
    for s in range(0, enc.n, batch_size):
        idx = np.arange(s, min(s + batch_size, enc.n))
        V, q, a, mask = enc.batch(idx)
        pred = np.argmax(model.forward(V, q, mask, energy=energy).logits, axis=-1)
        wrong += int(np.sum(pred != a))
    return 100.0 * wrong / enc.n


def evaluate(model: MannModel, stories, vocab, batch_size: int = 32, energy=None) -> float:
    return _error_rate(model, _Encoded(stories, vocab, model.L), batch_size, energy)


def _clip(grads: dict, max_norm: Optional[float]) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def train(model: MannModel, dataset: Dataset, cfg: TrainConfig, *, log_fn=None):
    """Run SGD; returns ``(model, RunMetrics)``.

    With early stopping enabled the parameters of the best validation epoch
    are restored before the final evaluation.
    """
    rng = np.random.default_rng(cfg.seed)
    bs = cfg.batch_size
    tr = _Encoded(dataset.train, dataset.vocab, model.L)
    va = _Encoded(dataset.val, dataset.vocab, model.L)
    te = _Encoded(dataset.test, dataset.vocab, model.L)
    metrics = RunMetrics()
    best_val, best_params, best_ep = math.inf, None, None
    hist_iwl = cfg.histogram_iwl

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(tr.n)
        record = SimilarityRecord()
        overflow = {c: 0 for c in OVERFLOW_COMPONENTS}
        losses = []
        for s in range(0, tr.n, bs):
            idx = np.sort(order[s : s + bs])
            V, q, a, mask = tr.batch(idx)
            loss, grads, cache = model.loss_and_grads(V, q, mask, a, record=record)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {s}")
            for k, v in cache.overflow.items():
                overflow[k] += v
            _clip(grads, cfg.max_grad_norm)
            for name, g in grads.items():
                getattr(model.params, name)[...] -= cfg.learning_rate * g
            losses.append(loss)
        sims = record.values
        ep = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_err": _error_rate(model, tr, bs),
            "val_err": _error_rate(model, va, bs),
            "test_err": _error_rate(model, te, bs),
            "overflow": overflow,
            "sim_width": inter_decile_width(sims),
            "sim_min": float(sims.min()) if sims.size else 0.0,
            "sim_max": float(sims.max()) if sims.size else 0.0,
            "sim_count": int(sims.size),
        }
        counts, edges = histogram(sims, hist_iwl)
        metrics.histograms.extend(
            (epoch, float(edges[i]), float(edges[i + 1]), int(n)) for i, n in enumerate(counts)
        )
        metrics.epochs.append(ep)
        if log_fn is not None:
            log_fn(ep)
        log.debug("epoch %d loss %.4f train %.2f val %s", epoch, ep["loss"], ep["train_err"], ep["val_err"])

        if cfg.es.enabled and ep["val_err"] is not None:
            if ep["val_err"] < best_val - cfg.es.min_delta or best_params is None:
                best_val, best_params, best_ep = ep["val_err"], model.params.copy(), epoch
            decision = early_stop(metrics.history("val_err"), cfg.es.patience, cfg.es.min_delta)
            if decision.stop:
                metrics.stopped_epoch = epoch
                break

    if cfg.es.enabled and best_params is not None:
        model.params = best_params
        metrics.best_epoch = best_ep
    metrics.final = {
        "train_err": _error_rate(model, tr, bs),
        "val_err": _error_rate(model, va, bs),
        "test_err": _error_rate(model, te, bs),
    }
    return model, metrics
