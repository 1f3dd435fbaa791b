"""Diagnostics: computation-energy model, similarity histograms, curves."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Optional

import numpy as np

__all__ = [
    "ENERGY_TABLE_PJ",
    "EnergyModel",
    "energy_gain",
    "op_gain",
    "round_gain",
    "histogram",
    "inter_decile_width",
    "record_histogram",
    "overflow_trace",
    "export_curves",
    "export_histograms",
    "energy_report",
]

# (number type, operation, bit width) -> pJ per operation (45nm figures)
ENERGY_TABLE_PJ = {
    ("fixed", "add", 8): Decimal("0.03"),
    ("fixed", "add", 32): Decimal("0.1"),
    ("fixed", "mult", 8): Decimal("0.2"),
    ("fixed", "mult", 32): Decimal("3.1"),
    ("float", "add", 16): Decimal("0.4"),
    ("float", "add", 32): Decimal("0.9"),
    ("float", "mult", 16): Decimal("1.1"),
    ("float", "mult", 32): Decimal("3.7"),
}
REFERENCE_OP = ("float", "mult", 32)


class EnergyModel:
    """Per-category op counter priced by ``ENERGY_TABLE_PJ``.

    Ops without a table row (``float exp``, for instance) are still counted
    but contribute nothing to the energy total; they are listed separately.
    """

    def __init__(self, table: Optional[Mapping] = None):
        self.table = dict(ENERGY_TABLE_PJ if table is None else table)
        if any(e <= 0 for e in self.table.values()):
            raise ValueError("energies must be positive")
        self.counts: dict = defaultdict(int)

    def count(self, kind: str, op: str, bits: int, n: int = 1, component: Optional[str] = None) -> None:
        if n:
            self.counts[(kind, op, int(bits), component or "other")] += int(n)

    def merged(self, exclude: Iterable[str] = ()) -> dict:
        """Counts per (kind, op, bits), dropping the given components."""
        skip = set(exclude)
        out: dict = defaultdict(int)
        for (kind, op, bits, comp), n in self.counts.items():
            if comp not in skip:
                out[(kind, op, bits)] += n
        return dict(out)

    def total_pj(self, exclude: Iterable[str] = ()) -> Decimal:
        return price(self.merged(exclude), self.table)

    def unpriced(self) -> dict:
        return {k: n for k, n in self.merged().items() if k not in self.table}

    def reset(self) -> None:
        self.counts.clear()

    def to_json(self) -> dict:
        return {
            "counts": [
                {"kind": k, "op": o, "bits": b, "component": c, "n": n}
                for (k, o, b, c), n in sorted(self.counts.items())
            ]
        }

    @classmethod
    def from_json(cls, d: dict) -> "EnergyModel":
        em = cls()
        for row in d["counts"]:
            em.count(row["kind"], row["op"], row["bits"], row["n"], row["component"])
        return em


def price(counts: Mapping, table: Mapping = ENERGY_TABLE_PJ) -> Decimal:
    total = Decimal(0)
    for key, n in counts.items():
        if key in table:
            total += table[key] * n
    return total


def energy_gain(counts_a: Mapping, counts_b: Mapping, table: Mapping = ENERGY_TABLE_PJ) -> Decimal:
    """Energy of profile ``a`` divided by energy of profile ``b``."""
    ea, eb = price(counts_a, table), price(counts_b, table)
    if eb == 0:
        raise ZeroDivisionError("denominator op profile has zero energy")
    return ea / eb


def op_gain(key, table: Mapping = ENERGY_TABLE_PJ) -> Decimal:
    """Single-op gain over a 32-bit float multiplication."""
    return energy_gain({REFERENCE_OP: 1}, {tuple(key): 1}, table)


def round_gain(g: Decimal, places: int = 1) -> Decimal:
    return Decimal(g).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def energy_report(run: EnergyModel, baseline: EnergyModel, scope_exclude=("output",)) -> dict:
    def block(em):
        merged = em.merged()
        return {
            "counts": {f"{k}-{o}-{b}": n for (k, o, b), n in sorted(merged.items())},
            "total_pj": float(em.total_pj()),
            "core_pj": float(em.total_pj(scope_exclude)),
            "unpriced": {f"{k}-{o}-{b}": n for (k, o, b), n in sorted(em.unpriced().items())},
        }

    r, b = block(run), block(baseline)
    return {
        "run": r,
        "baseline": b,
        "gain_total": b["total_pj"] / r["total_pj"] if r["total_pj"] else None,
        "gain_core": b["core_pj"] / r["core_pj"] if r["core_pj"] else None,
        "core_excludes": list(scope_exclude),
    }


# ---------------------------------------------------------------------------
# similarity distributions


def histogram(values, iwl: int, bins: int = 101):
    """Uniform bins over [-2**(iwl+1), 2**(iwl+1)]; outliers land in the edge bins."""
    lim = 2.0 ** (iwl + 1)
    edges = np.linspace(-lim, lim, bins + 1)
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), -lim, lim)
    counts, _ = np.histogram(v, bins=edges)
    return counts, edges


def inter_decile_width(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    lo, hi = np.percentile(v, [10, 90])
    return float(hi - lo)


def record_histogram(record, step: int, iwl: int, bins: int = 101) -> list:
    """Snapshot rows ``(step, bin_lo, bin_hi, count)``; empty record gives no rows."""
    vals = record.values if hasattr(record, "values") else np.asarray(record)
    if len(vals) == 0:
        return []
    counts, edges = histogram(vals, iwl, bins)
    return [(step, float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def overflow_trace(metrics, component: str = "similarity") -> list:
    return [int(ep["overflow"].get(component, 0)) for ep in metrics.epochs]


def export_curves(metrics, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "error"])
        for ep in metrics.epochs:
            for split in ("train", "val", "test"):
                if ep.get(f"{split}_err") is not None:
                    w.writerow([ep["epoch"], split, ep[f"{split}_err"]])


def export_histograms(rows: Iterable, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "bin_lo", "bin_hi", "count"])
        w.writerows(rows)


def dump_json(obj, path: str) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
