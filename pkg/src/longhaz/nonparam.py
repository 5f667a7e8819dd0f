"""Kaplan-Meier, Nelson-Aalen and Aalen-Johansen estimators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .errors import LonghazError
from .expand import SurvivalRecord

Z95 = float(norm.ppf(0.975))


@dataclass(frozen=True)
class StepCurve:
    """Right-continuous step function, constant between jump times."""

    times: np.ndarray
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    start: float = 1.0  # value before the first jump

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise LonghazError("step-curve times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def at(self, t) -> np.ndarray | float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.where(idx >= 0, np.asarray(self.values)[np.maximum(idx, 0)] if len(self) else self.start,
                        self.start)
        return vals if np.ndim(t) else float(vals)

    def to_rows(self):
        lo = self.lower if self.lower is not None else [None] * len(self)
        hi = self.upper if self.upper is not None else [None] * len(self)
        return list(zip(self.times.tolist(), self.values.tolist(), list(lo), list(hi)))

    def to_csv(self, path: str | Path, digits: int = 6, label: tuple[str, str] | None = None) -> None:
        write_curves({"": self} if label is None else {label[1]: self}, path, digits,
                     None if label is None else label[0])


def write_curves(curves: dict, path: str | Path, digits: int = 6, key: str | None = None) -> None:
    """CSV with columns ``[key,]time,value,lower,upper``."""

    def fmt(x):
        if x is None or (isinstance(x, float) and math.isnan(x)):
            return ""
        return f"{x:.{digits}g}"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(([key] if key else []) + ["time", "value", "lower", "upper"])
        for name, curve in curves.items():
            for t, v, lo, hi in curve.to_rows():
                w.writerow(([name] if key else []) + [fmt(t), fmt(v), fmt(lo), fmt(hi)])


def _as_arrays(records_or_times, events=None):
    if events is None:
        recs: Sequence[SurvivalRecord] = records_or_times
        times = np.array([r.exit_time for r in recs], float)
        causes = np.array([r.cause for r in recs], np.int64)
        return times, causes
    return np.asarray(records_or_times, float), np.asarray(events, np.int64)


def _risk_table(times: np.ndarray, causes: np.ndarray):
    """Distinct event times with at-risk counts and per-cause event counts.

    Censorings tied with events are still at risk (events first).
    """
    order = np.argsort(times, kind="stable")
    times, causes = times[order], causes[order]
    uniq, first = np.unique(times, return_index=True)
    n_at = len(times) - first
    labels = sorted(set(causes[causes != 0].tolist()))
    d = np.zeros((len(labels), len(uniq)))
    pos = np.searchsorted(uniq, times)
    for j, c in enumerate(labels):
        np.add.at(d[j], pos[causes == c], 1.0)
    has = d.sum(axis=0) > 0
    return uniq[has], n_at[has].astype(float), d[:, has], labels


@dataclass(frozen=True)
class KaplanMeier:
    curve: StepCurve
    median: float | None
    median_ci: tuple[float | None, float | None]
    n: int
    events: int


def kaplan_meier(records_or_times, events=None) -> KaplanMeier:
    """Product-limit estimate with Greenwood log-log 95% band.

    ``events`` may be 0/1 indicators or cause labels (any nonzero is an event).
    """
    times, causes = _as_arrays(records_or_times, events)
    if times.size == 0:
        raise LonghazError("no records")
    t, n, d, _ = _risk_table(times, causes)
    if t.size == 0:
        return KaplanMeier(StepCurve(np.array([]), np.array([])), None, (None, None), int(times.size), 0)
    dd = d.sum(axis=0)
    S = np.cumprod(1.0 - dd / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        gw = np.cumsum(np.where(n > dd, dd / (n * (n - dd)), np.inf))
        logS = np.log(S)
        se = np.sqrt(gw) / np.abs(logS)
        lower = np.where((S > 0) & (S < 1), S ** np.exp(Z95 * se), np.nan)
        upper = np.where((S > 0) & (S < 1), S ** np.exp(-Z95 * se), np.nan)
    lower = np.where(S == 0, 0.0, lower)
    upper = np.where(S == 0, 0.0, upper)
    curve = StepCurve(t, S, lower, upper)

    def first_below(vals):
        hit = np.flatnonzero(np.nan_to_num(vals, nan=1.0) <= 0.5)
        return float(t[hit[0]]) if hit.size else None

    return KaplanMeier(curve, first_below(S), (first_below(lower), first_below(upper)),
                       int(times.size), int(dd.sum()))


def nelson_aalen(records_or_times, events=None) -> StepCurve:
    times, causes = _as_arrays(records_or_times, events)
    t, n, d, _ = _risk_table(times, causes)
    return StepCurve(t, np.cumsum(d.sum(axis=0) / n), start=0.0)


def stratum_times(records: Sequence[SurvivalRecord]) -> dict:
    """Per stratum: local exit times and event flags (leaving a stratum alive is censoring)."""
    out: dict = {}
    for rec in records:
        entries = rec.stratum_entries()
        last = rec.episodes[-1].stratum
        spans: dict = {}
        for ep in rec.episodes:
            lo, hi = spans.get(ep.stratum, (ep.t_start, ep.t_stop))
            spans[ep.stratum] = (min(lo, ep.t_start), max(hi, ep.t_stop))
        for s, (_, hi) in spans.items():
            ts, es = out.setdefault(s, ([], []))
            ts.append(hi - entries[s])
            es.append(rec.cause if s == last else 0)
    return {s: (np.array(v[0]), np.array(v[1], np.int64)) for s, v in sorted(out.items())}


def log_cumhaz_stratified(records: Sequence[SurvivalRecord], strata: Sequence | None = None) -> dict:
    """Log Nelson-Aalen curve per stratum on the stratum-local clock."""
    per = stratum_times(records)
    out = {}
    for s in (strata if strata is not None else per.keys()):
        if s not in per:
            out[s] = StepCurve(np.array([]), np.array([]), start=-np.inf)
            continue
        na = nelson_aalen(*per[s])
        keep = na.values > 0
        out[s] = StepCurve(na.times[keep], np.log(na.values[keep]), start=-np.inf)
    return out


@dataclass(frozen=True)
class CumulativeIncidence:
    cif: dict  # cause -> StepCurve on the all-cause event times
    survival: StepCurve


def cumulative_incidence(records_or_times, causes=None, labels: Sequence[int] | None = None) -> CumulativeIncidence:
    """Aalen-Johansen cause-specific cumulative incidence."""
    times, cz = _as_arrays(records_or_times, causes)
    if times.size == 0:
        raise LonghazError("no records")
    t, n, d, lab = _risk_table(times, cz)
    labels = list(labels) if labels is not None else (lab or [1])
    dd = d.sum(axis=0) if d.size else np.zeros_like(t)
    S = np.cumprod(1.0 - dd / n)
    S_prev = np.concatenate([[1.0], S[:-1]])
    cif = {}
    for c in labels:
        inc = S_prev * d[lab.index(c)] / n if c in lab else np.zeros_like(t)
        cif[c] = StepCurve(t, np.cumsum(inc), start=0.0)
    return CumulativeIncidence(cif, StepCurve(t, S))
