"""Latitude-weighted verification metrics and skillful-lead detection.

All three scores weight grid points by the cosine-latitude factor (mean 1
over rows) and are computed per sample, then averaged over the evaluation
set: RMSE as the mean of per-sample weighted RMS errors, Bias with the
prediction-minus-truth sign convention, and ACC as the mean per-sample
weighted correlation of anomalies about the climatology.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateAnomalyError, EmptyEvalError, NeverSkillfulError
from .grid import Climatology, LatWeights, StateField


@dataclass
class EvalSet:
    """Paired (prediction, truth) samples at one lead time."""

    pairs: list  # of (StateField, StateField)
    lead_hours: int = 0

    def __post_init__(self):
        if any(p.spec != t.spec for p, t in self.pairs):
            raise ValueError("prediction and truth grids differ")

    @property
    def n(self) -> int:
        return len(self.pairs)


def _check_nonempty(ev: EvalSet) -> None:
    if ev.n == 0:
        raise EmptyEvalError("evaluation set is empty")


def rmse(ev: EvalSet, lw: LatWeights) -> np.ndarray:
    """Per-variable mean over samples of sqrt((1/HW) sum_ij L(i) err^2)."""
    _check_nonempty(ev)
    out = []
    w = lw.values[None, :, None]
    for pred, truth in ev.pairs:
        err2 = (pred.data - truth.data) ** 2
        hw = pred.spec.H * pred.spec.W
        out.append(np.sqrt((w * err2).sum(axis=(1, 2)) / hw))
    return np.mean(out, axis=0)


def bias(ev: EvalSet, lw: LatWeights) -> np.ndarray:
    """Per-variable mean over samples of (1/HW) sum_ij L(i) (pred - truth)."""
    _check_nonempty(ev)
    out = []
    w = lw.values[None, :, None]
    for pred, truth in ev.pairs:
        hw = pred.spec.H * pred.spec.W
        out.append((w * (pred.data - truth.data)).sum(axis=(1, 2)) / hw)
    return np.mean(out, axis=0)


def acc(ev: EvalSet, clim: Climatology, lw: LatWeights) -> np.ndarray:
    """Per-variable mean over samples of the weighted anomaly correlation."""
    _check_nonempty(ev)
    w = lw.values[None, :, None]
    out = []
    for pred, truth in ev.pairs:
        c = clim.field_at(truth.time)
        ap = pred.data - c
        at = truth.data - c
        num = (w * ap * at).sum(axis=(1, 2))
        np2 = (w * ap * ap).sum(axis=(1, 2))
        nt2 = (w * at * at).sum(axis=(1, 2))
        if np.any(np2 == 0) or np.any(nt2 == 0):
            raise DegenerateAnomalyError(
                f"zero anomaly norm at validity time {truth.time}"
            )
        out.append(num / np.sqrt(np2 * nt2))
    return np.mean(out, axis=0)


def skillful_lead(leads, accs, threshold: float = 0.6) -> int:
    """Largest lead with ACC above threshold at every lead up to it.

    First-crossing convention: a later recovery above the threshold does not
    extend the skillful range.
    """
    leads = list(leads)
    accs = list(accs)
    if not leads or len(leads) != len(accs):
        raise ValueError("need matching nonempty lead and ACC sequences")
    if any(b <= a for a, b in zip(leads, leads[1:])):
        raise ValueError("leads must be increasing")
    if accs[0] <= threshold:
        raise NeverSkillfulError(f"ACC {accs[0]:.3f} <= {threshold} at first lead")
    for k in range(1, len(leads)):
        if accs[k] <= threshold:
            return leads[k - 1]
    return leads[-1]


@dataclass
class MetricsReport:
    """Per-variable scores at each lead; rows of the metrics CSV."""

    rows: list  # of dicts: run, variable, lead_hours, rmse, bias, acc

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=["run", "variable", "lead_hours",
                                               "rmse", "bias", "acc"])
            wr.writeheader()
            for row in self.rows:
                wr.writerow(row)


def evaluate_leads(run: str, eval_sets: list[EvalSet], clim: Climatology,
                   lw: LatWeights) -> MetricsReport:
    rows = []
    for ev in eval_sets:
        r, b, a = rmse(ev, lw), bias(ev, lw), acc(ev, clim, lw)
        for v in range(len(r)):
            rows.append({
                "run": run, "variable": f"v{v}", "lead_hours": ev.lead_hours,
                "rmse": repr(float(r[v])), "bias": repr(float(b[v])),
                "acc": repr(float(a[v])),
            })
    return MetricsReport(rows)


def write_scorecard(path, baseline: MetricsReport, candidate: MetricsReport) -> None:
    """Signed percent RMSE difference of a candidate run against a baseline."""
    base = {(r["variable"], r["lead_hours"]): float(r["rmse"]) for r in baseline.rows}
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["variable", "lead_hours", "baseline",
                                           "candidate", "pct_diff"])
        wr.writeheader()
        for r in candidate.rows:
            key = (r["variable"], r["lead_hours"])
            if key not in base:
                continue
            b = base[key]
            c = float(r["rmse"])
            pct = 100.0 * (c - b) / b if b else float("nan")
            wr.writerow({"variable": key[0], "lead_hours": key[1],
                         "baseline": repr(b), "candidate": repr(c),
                         "pct_diff": repr(pct)})
