"""Command-line driver: train, eval, sweep, diag and energy."""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .data import SYNTHETIC_TASKS, encode_batch, load_babi_task, synthetic_dataset
from .diag import EnergyModel, dump_json, energy_report, export_curves, export_histograms, histogram
from .fxp import QFormat
from .model import OVERFLOW_COMPONENTS, MannModel
from .similarity import SimilarityRecord
from .train import ESConfig, TrainConfig, build_model, evaluate, train

BABI_ENV = "QMANN_BABI_DIR"
log = logging.getLogger("qmann")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    source: str  # "synthetic" or "babi"
    name: str

    @classmethod
    def parse(cls, text: str) -> "TaskSpec":
        src, sep, name = text.partition(":")
        if not sep or src not in ("synthetic", "babi") or not name:
            raise UsageError(f"--task must be synthetic:KIND or babi:N, got {text!r}")
        if src == "babi" and not (name.isdigit() and 1 <= int(name) <= 20):
            raise UsageError(f"bAbI task must be 1..20, got {name!r}")
        if src == "synthetic" and name not in SYNTHETIC_TASKS:
            raise UsageError(f"unknown synthetic task {name!r}; choose from {sorted(SYNTHETIC_TASKS)}")
        return cls(src, name)

    def __str__(self):
        return f"{self.source}:{self.name}"


def load_task(task: TaskSpec, *, seed: int, babi_dir=None, n_train=1000, n_test=1000, memory_size=50):
    if task.source == "synthetic":
        return synthetic_dataset(task.name, n_train, n_test, seed)
    babi_dir = babi_dir or os.environ.get(BABI_ENV)
    if not babi_dir:
        raise UsageError(f"bAbI tasks need --babi-dir or ${BABI_ENV}")
    return load_babi_task(babi_dir, int(task.name), memory_size, seed=seed)


# ---------------------------------------------------------------------------
# argument handling


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", required=True, help="synthetic:KIND or babi:N")
    p.add_argument("--mode", choices=("float", "fixed"), help="defaults to fixed when --qformat is given")
    p.add_argument("--qformat", help="Q-format of parameters, memory and activations, e.g. Q5.2")
    p.add_argument("--act", choices=("fixed", "binary"), default="fixed")
    p.add_argument("--similarity", choices=("dot", "hamming"), default="dot")
    p.add_argument("--mq", action="store_true", help="cycle the Q-format per hop")
    p.add_argument("--es", action="store_true", help="early stopping on validation error")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--clip", type=float, default=TrainConfig.max_grad_norm, help="global gradient-norm clip; 0 disables")
    p.add_argument("--alpha", type=int, default=-3)
    p.add_argument("--n-train", type=int, default=1000, help="synthetic stories in the train stream")
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--babi-dir", help=f"bAbI directory (default ${BABI_ENV})")


def config_from_args(a, qformat=None, seed=None) -> TrainConfig:
    """Validate flags and build a TrainConfig; raises UsageError before any work."""
    qformat = qformat if qformat is not None else a.qformat
    mode = a.mode or ("fixed" if qformat else "float")
    if mode == "float" and qformat:
        raise UsageError("--qformat conflicts with --mode float")
    if mode == "fixed" and not qformat:
        raise UsageError("--mode fixed needs --qformat")
    if mode == "float" and (a.similarity == "hamming" or a.act == "binary" or a.mq):
        raise UsageError("--similarity hamming, --act binary and --mq need fixed-point mode")
    if a.epochs < 1 or a.batch_size < 1:
        raise UsageError("--epochs and --batch-size must be positive")
    if qformat:
        try:
            QFormat.parse(qformat)
        except ValueError as e:
            raise UsageError(str(e)) from None
    try:
        return TrainConfig(
            learning_rate=a.lr, epochs=a.epochs, batch_size=a.batch_size,
            seed=a.seed if seed is None else seed,
            param_format=qformat, act_format=qformat, mem_format=qformat,
            similarity=a.similarity, binary_act=a.act == "binary", mq=a.mq,
            es=ESConfig(enabled=a.es, patience=a.patience), alpha=a.alpha,
            max_grad_norm=a.clip or None,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmann", description="Quantized memory-augmented networks")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration and write its artifacts")
    _add_run_flags(t)
    t.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="error rate of a saved checkpoint")
    e.add_argument("run", help="run directory written by train")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--babi-dir")

    s = sub.add_parser("sweep", help="repeat formats across seeds")
    _add_run_flags(s)
    s.add_argument("--formats", required=True, help="comma list, 'float' allowed, e.g. Q5.4,Q2.7")
    s.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)

    d = sub.add_parser("diag", help="similarity histogram and overflow counts of a checkpoint")
    d.add_argument("run")
    d.add_argument("--split", choices=("train", "val", "test"), default="test")
    d.add_argument("--babi-dir")

    g = sub.add_parser("energy", help="energy report of a run against a baseline run")
    g.add_argument("run")
    g.add_argument("--baseline", required=True, help="run directory of the reference (usually float)")
    g.add_argument("--out", help="write the report here instead of <run>/energy_report.json")
    return p


# ---------------------------------------------------------------------------
# commands


def _snapshot(a, cfg: TrainConfig, task: TaskSpec) -> dict:
    return {
        "code_version": __version__,
        "task": str(task),
        "n_train": a.n_train,
        "n_test": a.n_test,
        "train_config": cfg.to_json(),
        "argv": sys.argv[1:],
    }


def run_training(cfg: TrainConfig, task: TaskSpec, *, babi_dir=None, n_train=1000, n_test=1000, out=None,
                 snapshot=None):
    """Train one configuration; returns ``(model, metrics, dataset, energy)``."""
    ds = load_task(task, seed=cfg.seed, babi_dir=babi_dir, n_train=n_train, n_test=n_test, memory_size=cfg.L)
    model = build_model(cfg, ds.vocab.size)
    if out:
        os.makedirs(out, exist_ok=True)
        dump_json(snapshot or {"train_config": cfg.to_json(), "task": str(task)}, os.path.join(out, "config.json"))
        mf = open(os.path.join(out, "metrics.jsonl"), "w")
    else:
        mf = None

    def log_epoch(ep):
        if mf:
            mf.write(json.dumps(ep, sort_keys=True) + "\n")
        log.info("epoch %d loss %.4f train %.2f val %s test %s", ep["epoch"], ep["loss"], ep["train_err"],
                 ep["val_err"], ep["test_err"])

    try:
        model, metrics = train(model, ds, cfg, log_fn=log_epoch)
    finally:
        if mf:
            mf.close()
    # inference energy over the test split
    energy = EnergyModel()
    evaluate(model, ds.test, ds.vocab, cfg.batch_size, energy=energy)
    if out:
        model.save(os.path.join(out, "checkpoint.json"), extra={"vocab": ds.vocab.itos, "task": str(task)})
        export_curves(metrics, os.path.join(out, "curves.csv"))
        export_histograms(metrics.histograms, os.path.join(out, "histograms.csv"))
        dump_json(energy.to_json(), os.path.join(out, "energy.json"))
        summary = {k: getattr(metrics, k) for k in ("best_epoch", "stopped_epoch", "final")}
        summary["overflow_total"] = _overflow_totals(metrics)
        dump_json(summary, os.path.join(out, "summary.json"))
    return model, metrics, ds, energy


def _overflow_totals(metrics) -> dict:
    return {c: sum(ep["overflow"][c] for ep in metrics.epochs) for c in OVERFLOW_COMPONENTS}


def cmd_train(a) -> int:
    task = TaskSpec.parse(a.task)
    cfg = config_from_args(a)
    _, metrics, _, _ = run_training(cfg, task, babi_dir=a.babi_dir, n_train=a.n_train, n_test=a.n_test,
                                    out=a.out, snapshot=_snapshot(a, cfg, task))
    f = metrics.final
    print(f"train {f['train_err']:.2f}%  val {f['val_err']}  test {f['test_err']:.2f}%  -> {a.out}")
    return 0


def _load_run(run_dir, babi_dir=None):
    with open(os.path.join(run_dir, "config.json")) as f:
        snap = json.load(f)
    cfg = TrainConfig.from_json(snap["train_config"])
    model = MannModel.load(os.path.join(run_dir, "checkpoint.json"))
    task = TaskSpec.parse(snap["task"])
    ds = load_task(task, seed=cfg.seed, babi_dir=babi_dir, n_train=snap.get("n_train", 1000),
                   n_test=snap.get("n_test", 1000), memory_size=cfg.L)
    return cfg, model, ds


def cmd_eval(a) -> int:
    cfg, model, ds = _load_run(a.run, a.babi_dir)
    err = evaluate(model, getattr(ds, a.split), ds.vocab, cfg.batch_size)
    print(json.dumps({"split": a.split, "error": err}))
    return 0


def cmd_diag(a) -> int:
    cfg, model, ds = _load_run(a.run, a.babi_dir)
    stories = getattr(ds, a.split)
    record = SimilarityRecord()
    overflow = {c: 0 for c in OVERFLOW_COMPONENTS}
    for s in range(0, len(stories), cfg.batch_size):
        V, q, _, mask = encode_batch(stories[s : s + cfg.batch_size], ds.vocab, model.L)
        c = model.forward(V, q, mask, record=record)
        for k, v in c.overflow.items():
            overflow[k] += v
    iwl = cfg.histogram_iwl
    counts, edges = histogram(record.values, iwl)
    rows = [(0, float(edges[i]), float(edges[i + 1]), int(n)) for i, n in enumerate(counts)]
    export_histograms(rows, os.path.join(a.run, f"diag_histogram_{a.split}.csv"))
    out = {"split": a.split, "overflow": overflow, "similarity_count": int(record.values.size),
           "similarity_min": float(record.values.min()), "similarity_max": float(record.values.max())}
    dump_json(out, os.path.join(a.run, f"diag_{a.split}.json"))
    print(json.dumps(out))
    return 0


def cmd_energy(a) -> int:
    def load(d):
        with open(os.path.join(d, "energy.json")) as f:
            return EnergyModel.from_json(json.load(f))

    rep = energy_report(load(a.run), load(a.baseline))
    rep["run_dir"], rep["baseline_dir"] = a.run, a.baseline
    dump_json(rep, a.out or os.path.join(a.run, "energy_report.json"))
    print(f"gain_total {rep['gain_total']:.2f}x  gain_core {rep['gain_core']:.2f}x")
    return 0


def _sweep_cell(job):
    cfg_json, task, babi_dir, n_train, n_test = job
    cfg = TrainConfig.from_json(cfg_json)
    _, metrics, _, _ = run_training(cfg, TaskSpec.parse(task), babi_dir=babi_dir, n_train=n_train, n_test=n_test)
    return {"test_err": metrics.final["test_err"], "overflow": _overflow_totals(metrics)}


def sweep_rows(results: dict) -> list:
    """Collapse per-seed results into one row per format."""
    rows = []
    for fmt, cells in results.items():
        errs = [c["test_err"] for c in cells]
        row = {"format": fmt, "seeds": len(cells), "best_err": min(errs), "mean_err": statistics.fmean(errs)}
        for comp in OVERFLOW_COMPONENTS:
            row[f"overflow_{comp}"] = statistics.fmean(c["overflow"][comp] for c in cells)
        rows.append(row)
    return rows


def cmd_sweep(a) -> int:
    import csv

    task = TaskSpec.parse(a.task)
    formats = [f.strip() for f in a.formats.split(",") if f.strip()]
    try:
        seeds = [int(s) for s in a.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be integers, got {a.seeds!r}") from None
    if not formats or not seeds:
        raise UsageError("--formats and --seeds must be non-empty")
    jobs, keys = [], []
    for fmt in formats:
        qf = None if fmt == "float" else fmt
        saved_mode = a.mode
        a.mode = "float" if qf is None else "fixed"
        try:
            cfgs = [config_from_args(a, qformat=qf, seed=s) for s in seeds]
        finally:
            a.mode = saved_mode
        for cfg in cfgs:
            jobs.append((cfg.to_json(), str(task), a.babi_dir, a.n_train, a.n_test))
            keys.append(fmt)
    if a.workers > 1:
        with ProcessPoolExecutor(a.workers) as ex:
            outs = list(ex.map(_sweep_cell, jobs))
    else:
        outs = [_sweep_cell(j) for j in jobs]
    results: dict = {}
    for k, o in zip(keys, outs):
        results.setdefault(k, []).append(o)
    rows = sweep_rows(results)
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "sweep.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    dump_json({"task": str(task), "seeds": seeds, "rows": rows, "code_version": __version__},
              os.path.join(a.out, "sweep.json"))
    for r in rows:
        print(f"{r['format']:>6}  best {r['best_err']:6.2f}%  mean {r['mean_err']:6.2f}%  "
              f"sim-overflow {r['overflow_similarity']:.1f}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "diag": cmd_diag, "energy": cmd_energy}


def main(argv=None) -> int:
    p = build_parser()
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[a.command](a)
    except (UsageError, FileNotFoundError, ValueError) as e:
        print(f"qmann {a.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
