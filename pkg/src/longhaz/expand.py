"""Survival records and their pseudo-observation expansions.

Continuous records are split on cut points into one Poisson row per
(episode, interval) overlap with a log-exposure offset; discrete records
become one Bernoulli row per survived period. In both cases the GLM
likelihood of the rows coincides with the survival likelihood.

Interval convention: exposure is split on ``[t_k, t_{k+1})`` but an exit
(event or censoring) lying exactly on ``t_{k+1}`` is attributed to the
interval that ends there, so every row carries positive exposure.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ExpansionError

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
DISCRETE = "discrete"
FAMILIES = ("poisson_pieces", "bernoulli", "poisson_approx")
ANY_CAUSE = "any"

MAX_HAZARD_PROB = 0.2
MIN_RISK_SET = 30

_EPS = 1e-9


@dataclass(frozen=True)
class Episode:
    t_start: float
    t_stop: float
    covariates: Mapping[str, float] = field(default_factory=dict)
    stratum: int | None = None


@dataclass(frozen=True)
class SurvivalRecord:
    """One individual's follow-up.

    ``cause`` is 0 for censoring, otherwise the code of the cause that ended
    the last episode. ``clusters`` maps random-component columns to levels.
    """

    id: str
    time_type: str
    episodes: tuple[Episode, ...]
    cause: int = 0
    clusters: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.time_type not in (CONTINUOUS, DISCRETE):
            raise ExpansionError(f"unknown time type: {self.time_type}")
        if not self.episodes:
            raise ExpansionError(f"record {self.id} has no episodes")
        if self.episodes[0].t_start != 0:
            raise ExpansionError(f"record {self.id}: first episode must start at 0")
        prev = None
        for ep in self.episodes:
            if ep.t_stop < ep.t_start:
                raise ExpansionError(f"record {self.id}: episode ends before it starts")
            if prev is not None and ep.t_start != prev.t_stop:
                raise ExpansionError(f"record {self.id}: episodes are not contiguous")
            if self.time_type == DISCRETE and (ep.t_start != int(ep.t_start) or ep.t_stop != int(ep.t_stop)):
                raise ExpansionError(f"record {self.id}: discrete times must be integers")
            prev = ep

    @property
    def exit_time(self) -> float:
        return self.episodes[-1].t_stop

    @classmethod
    def discrete(cls, id, time: int, cause: int = 0, covariates=None, clusters=None, stratum=None):
        ep = Episode(0, int(time), dict(covariates or {}), stratum)
        return cls(str(id), DISCRETE, (ep,), int(cause), dict(clusters or {}))

    @classmethod
    def continuous(cls, id, time: float, cause: int = 0, covariates=None, clusters=None, stratum=None):
        ep = Episode(0.0, float(time), dict(covariates or {}), stratum)
        return cls(str(id), CONTINUOUS, (ep,), int(cause), dict(clusters or {}))

    def stratum_entries(self) -> dict:
        """Entry time of each stratum visited (first episode in the stratum)."""
        out = {}
        for ep in self.episodes:
            out.setdefault(ep.stratum, ep.t_start)
        return out


@dataclass(frozen=True)
class CutPoints:
    """Strictly increasing interval boundaries starting at 0.

    ``per_stratum`` overrides ``boundaries`` for the listed strata.
    """

    boundaries: np.ndarray
    per_stratum: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "boundaries", _validate_cuts(self.boundaries))
        object.__setattr__(
            self, "per_stratum", {int(k): _validate_cuts(v) for k, v in dict(self.per_stratum).items()}
        )

    def for_stratum(self, stratum) -> np.ndarray:
        if stratum is not None and stratum in self.per_stratum:
            return self.per_stratum[stratum]
        return self.boundaries

    def n_intervals(self, stratum=None) -> int:
        return len(self.for_stratum(stratum)) - 1

    def to_dict(self) -> dict:
        out = {"boundaries": [float(b) for b in self.boundaries]}
        if self.per_stratum:
            out["per_stratum"] = {str(k): [float(b) for b in v] for k, v in sorted(self.per_stratum.items())}
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "CutPoints":
        per = {int(k): np.asarray(v, float) for k, v in d.get("per_stratum", {}).items()}
        return cls(np.asarray(d["boundaries"], float), per)


def _validate_cuts(values) -> np.ndarray:
    b = np.asarray(values, dtype=float).ravel()
    if b.size < 2 or b[0] != 0 or np.any(np.diff(b) <= 0) or not np.all(np.isfinite(b)):
        raise ExpansionError("invalid cut points")
    return b


def _quantile_cuts(event_times, max_time, K) -> np.ndarray:
    q = np.quantile(np.asarray(event_times, float), np.arange(1, K + 1) / K)
    b = np.unique(np.concatenate([[0.0], q]))
    b = b[b > 0] if b.size > 1 else b
    b = np.concatenate([[0.0], b])
    if max_time > b[-1]:
        b[-1] = max_time
    return b


def make_cutpoints(
    records: Sequence[SurvivalRecord],
    K: int = 10,
    strategy: str = "quantile",
    explicit: Sequence[float] | Mapping[int, Sequence[float]] | None = None,
    by_stratum: bool = False,
) -> CutPoints:
    """Choose interval boundaries.

    ``quantile`` places the j/K quantiles of observed event times
    (j = 1..K), deduplicated, and stretches the last boundary to the largest
    observed time. With ``by_stratum`` the quantiles are taken per stratum on
    the stratum-local clock. ``explicit`` takes a list (or a per-stratum
    mapping) and only validates it.
    """
    if strategy == "explicit":
        if explicit is None:
            raise ExpansionError("invalid cut points")
        if isinstance(explicit, Mapping):
            per = {int(k): np.asarray(v, float) for k, v in explicit.items()}
            first = per[min(per)]
            return CutPoints(first, per)
        return CutPoints(np.asarray(explicit, float))
    if strategy != "quantile":
        raise ExpansionError(f"unknown cut point strategy: {strategy}")
    if K < 1:
        raise ExpansionError("K must be at least 1")

    if not by_stratum:
        events = [r.exit_time for r in records if r.cause != 0]
        if not events:
            raise ExpansionError("no events for quantile cut points")
        return CutPoints(_quantile_cuts(events, max(r.exit_time for r in records), K))

    local_events: dict = defaultdict(list)
    local_max: dict = defaultdict(float)
    for r in records:
        entries = r.stratum_entries()
        for ep in r.episodes:
            local_max[ep.stratum] = max(local_max[ep.stratum], ep.t_stop - entries[ep.stratum])
        if r.cause != 0:
            last = r.episodes[-1]
            local_events[last.stratum].append(last.t_stop - entries[last.stratum])
    if not any(local_events.values()):
        raise ExpansionError("no events for quantile cut points")
    per = {}
    for s in sorted(local_max, key=lambda v: (v is None, v)):
        if s is None:
            continue
        ev = local_events.get(s) or [local_max[s]]
        per[int(s)] = _quantile_cuts(ev, local_max[s], K)
    pooled = [t for v in local_events.values() for t in v]
    default = _quantile_cuts(pooled, max(local_max.values()), K)
    return CutPoints(default, per)


@dataclass(frozen=True)
class TraitLayout:
    time_type: str
    family: str
    stratified: bool = False
    cuts: CutPoints | None = None


@dataclass
class PseudoTable:
    """Expanded rows plus per-trait layout metadata.

    Columns: ``id, trait, cause, k, stratum, y, offset, exposure`` followed
    by covariate columns (float) and cluster columns (str).
    """

    data: pd.DataFrame
    layouts: dict[str, TraitLayout]
    covariates: tuple[str, ...] = ()
    clusters: tuple[str, ...] = ()

    def __len__(self):
        return len(self.data)

    @property
    def traits(self) -> list[str]:
        return list(self.layouts)

    def family(self, trait: str) -> str:
        return self.layouts[trait].family

    def baseline_stratum(self) -> np.ndarray:
        """Stratum used in the baseline key; 0 when the trait is not stratified."""
        strat = np.array([self.layouts[t].stratified for t in self.data["trait"]], dtype=bool)
        return np.where(strat, self.data["stratum"].to_numpy(), 0).astype(np.int64)

    def with_family(self, trait: str, family: str) -> "PseudoTable":
        layouts = dict(self.layouts)
        layouts[trait] = replace(layouts[trait], family=_check_family(layouts[trait].time_type, family))
        return PseudoTable(self.data, layouts, self.covariates, self.clusters)

    def rename_trait(self, old: str, new: str) -> "PseudoTable":
        data = self.data.copy()
        data.loc[data["trait"] == old, "trait"] = new
        layouts = {(new if k == old else k): v for k, v in self.layouts.items()}
        return PseudoTable(data, layouts, self.covariates, self.clusters)

    def select(self, traits: Sequence[str]) -> "PseudoTable":
        data = self.data[self.data["trait"].isin(list(traits))].reset_index(drop=True)
        return PseudoTable(data, {t: self.layouts[t] for t in traits}, self.covariates, self.clusters)

    def to_csv(self, path: str | Path) -> None:
        cols = ["id", "cause", "k", "stratum", "y", "offset", *self.covariates, *self.clusters, "trait"]
        out = self.data[cols].copy()
        out["offset"] = [("" if not np.isfinite(v) else repr(float(v))) for v in out["offset"]]
        out.to_csv(path, index=False, lineterminator="\n")

    def summary(self) -> dict:
        out = {}
        for trait, lay in self.layouts.items():
            d = self.data[self.data["trait"] == trait]
            risk = d.groupby(["stratum", "k"], sort=True).size()
            out[trait] = {
                "time_type": lay.time_type,
                "family": lay.family,
                "stratified": lay.stratified,
                "rows": int(len(d)),
                "individuals": int(d["id"].nunique()),
                "events": int(d["y"].sum()),
                "intervals": _interval_count(lay, d),
                "risk_sets": [
                    {"stratum": int(s), "k": int(k), "rows": int(n)} for (s, k), n in risk.items()
                ],
            }
        return out


def _interval_count(lay: TraitLayout, d: pd.DataFrame):
    if lay.cuts is None:
        return int(d["k"].max()) if len(d) else 0
    if lay.stratified and lay.cuts.per_stratum:
        return {str(s): lay.cuts.n_intervals(s) for s in sorted(lay.cuts.per_stratum)}
    return lay.cuts.n_intervals()


def _check_family(time_type, family):
    if family not in FAMILIES:
        raise ExpansionError(f"unknown family: {family}")
    if time_type == CONTINUOUS and family != "poisson_pieces":
        raise ExpansionError(f"family {family} needs discrete-time rows")
    if time_type == DISCRETE and family == "poisson_pieces":
        raise ExpansionError("family poisson_pieces needs continuous-time rows")
    return family


def stack(*tables: PseudoTable) -> PseudoTable:
    """Concatenate tables for a multi-trait model (trait names must differ)."""
    layouts: dict = {}
    for t in tables:
        for name, lay in t.layouts.items():
            if name in layouts:
                raise ExpansionError(f"duplicate trait: {name}")
            layouts[name] = lay
    covs = tuple(dict.fromkeys(c for t in tables for c in t.covariates))
    clus = tuple(dict.fromkeys(c for t in tables for c in t.clusters))
    data = pd.concat([t.data for t in tables], ignore_index=True)
    for c in covs:
        data[c] = data[c].fillna(0.0)
    return PseudoTable(data, layouts, covs, clus)


def _trait_map(records, traits):
    if traits is not None:
        return {str(k): (None if v is None else int(v)) for k, v in dict(traits).items()}
    causes = sorted({r.cause for r in records if r.cause != 0}) or [1]
    return {str(c): c for c in causes}


def _frame(rows, covariates, clusters) -> pd.DataFrame:
    cols = ["id", "trait", "cause", "k", "stratum", "y", "offset", "exposure", *covariates, *clusters]
    df = pd.DataFrame(rows, columns=cols)
    df = df.astype({"k": np.int64, "stratum": np.int64, "y": np.int64, "offset": float, "exposure": float})
    for c in covariates:
        df[c] = df[c].astype(float)
    for c in clusters:
        df[c] = df[c].astype(str)
    df["id"] = df["id"].astype(str)
    df["trait"] = df["trait"].astype(str)
    df["cause"] = df["cause"].astype(str)
    return df.sort_values(["trait", "id", "stratum", "k"], kind="stable").reset_index(drop=True)


def _row_extras(rec, ep, covariates, clusters):
    cov = []
    for c in covariates:
        if c not in ep.covariates:
            raise ExpansionError(f"column not found: {c}")
        cov.append(float(ep.covariates[c]))
    clu = []
    for c in clusters:
        if c not in rec.clusters:
            raise ExpansionError(f"column not found: {c}")
        clu.append(str(rec.clusters[c]))
    return cov, clu


def _responds(rec, cause):
    return rec.cause != 0 and (cause is None or rec.cause == cause)


def expand_continuous(
    records: Sequence[SurvivalRecord],
    cuts: CutPoints,
    stratified: bool = False,
    traits: Mapping[str, int | None] | None = None,
    covariates: Sequence[str] = (),
    clusters: Sequence[str] = (),
) -> PseudoTable:
    """Split continuous records on ``cuts`` into Poisson pseudo-observations.

    One row per (trait, episode, interval) with positive overlap; the offset
    is the log of that overlap. With ``stratified`` the clock restarts at the
    entry time of each stratum and the stratum's own cut points apply.
    ``traits`` maps trait names to the cause each responds to (``None`` for
    any cause); by default one trait per observed cause.
    """
    tmap = _trait_map(records, traits)
    rows = []
    for rec in records:
        if rec.time_type != CONTINUOUS:
            raise ExpansionError(f"record {rec.id} is not continuous")
        entries = rec.stratum_entries() if stratified else {}
        pieces = []
        for ep in rec.episodes:
            origin = entries.get(ep.stratum, 0.0) if stratified else 0.0
            bnd = cuts.for_stratum(ep.stratum) if stratified else cuts.boundaries
            a, b = ep.t_start - origin, ep.t_stop - origin
            if b > bnd[-1] * (1 + _EPS) + _EPS:
                raise ExpansionError(f"time exceeds cut points (record {rec.id}, t={ep.t_stop})")
            if b <= a:
                continue
            extras = _row_extras(rec, ep, covariates, clusters)
            lo = max(int(np.searchsorted(bnd, a, side="right")) - 1, 0)
            for k in range(lo, len(bnd) - 1):
                left, right = bnd[k], bnd[k + 1]
                if right <= a:
                    continue
                if left >= b:
                    break
                delta = min(b, right) - max(a, left)
                if delta > 0:
                    pieces.append((k + 1, ep.stratum, delta, extras))
        if not pieces:
            if rec.cause != 0:
                raise ExpansionError(f"event at time zero (record {rec.id})")
            continue
        for name, cause in tmap.items():
            event = _responds(rec, cause)
            for j, (k, stratum, delta, (cov, clu)) in enumerate(pieces):
                y = int(event and j == len(pieces) - 1)
                rows.append(
                    [rec.id, name, ANY_CAUSE if cause is None else str(cause), k,
                     0 if stratum is None else stratum, y, math.log(delta), delta, *cov, *clu]
                )
    layout = TraitLayout(CONTINUOUS, "poisson_pieces", bool(stratified), cuts)
    return PseudoTable(
        _frame(rows, covariates, clusters), {n: layout for n in tmap}, tuple(covariates), tuple(clusters)
    )


def expand_discrete(
    records: Sequence[SurvivalRecord],
    traits: Mapping[str, int | None] | None = None,
    covariates: Sequence[str] = (),
    clusters: Sequence[str] = (),
    family: str = "bernoulli",
) -> PseudoTable:
    """One row per survived period ``t = 1..T``; ``y = 1`` only at ``T`` for an event.

    Period ``t`` takes its covariates from the episode with
    ``t_start < t <= t_stop``.
    """
    _check_family(DISCRETE, family)
    tmap = _trait_map(records, traits)
    rows = []
    for rec in records:
        if rec.time_type != DISCRETE:
            raise ExpansionError(f"record {rec.id} is not discrete")
        T = int(rec.exit_time)
        if T < 1:
            if rec.cause != 0:
                raise ExpansionError(f"event at time zero (record {rec.id})")
            continue
        periods = []
        for ep in rec.episodes:
            extras = _row_extras(rec, ep, covariates, clusters) if ep.t_stop > ep.t_start else None
            for t in range(int(ep.t_start) + 1, int(ep.t_stop) + 1):
                periods.append((t, ep.stratum, extras))
        for name, cause in tmap.items():
            event = _responds(rec, cause)
            for t, stratum, (cov, clu) in periods:
                y = int(event and t == T)
                rows.append(
                    [rec.id, name, ANY_CAUSE if cause is None else str(cause), t,
                     0 if stratum is None else stratum, y, math.nan, 1.0, *cov, *clu]
                )
    layout = TraitLayout(DISCRETE, family, False, None)
    return PseudoTable(
        _frame(rows, covariates, clusters), {n: layout for n in tmap}, tuple(covariates), tuple(clusters)
    )


@dataclass(frozen=True)
class PoissonDiagnostic:
    max_hazard: float
    min_risk_set: int
    ok: bool
    warnings: tuple[str, ...]


def check_poisson_conditions(
    table: PseudoTable,
    hazards: np.ndarray,
    max_hazard: float = MAX_HAZARD_PROB,
    min_risk_set: int = MIN_RISK_SET,
) -> PoissonDiagnostic:
    """Check whether Bernoulli rows are in the regime where a Poisson likelihood approximates them.

    ``hazards`` are fitted per-row hazard probabilities aligned with
    ``table.data``. Risk sets are counted per (trait, period).
    """
    p = np.asarray(hazards, float)
    if p.shape != (len(table),):
        raise ExpansionError("hazards must align with table rows")
    d = table.data.assign(_p=p)
    groups = d.groupby(["trait", "k"], sort=True)
    pbar = groups["_p"].max()
    n_t = groups.size()
    max_p = float(pbar.max()) if len(pbar) else 0.0
    min_n = int(n_t.min()) if len(n_t) else 0
    warns = []
    if max_p > max_hazard:
        warns.append(f"hazard probability large (max {max_p:.3g} > {max_hazard})")
    if min_n < min_risk_set:
        warns.append(f"small risk set (min {min_n} < {min_risk_set})")
    for w in warns:
        log.warning(w)
    return PoissonDiagnostic(max_p, min_n, not warns, tuple(warns))


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------


def _require(fieldnames, names):
    missing = [n for n in names if n not in (fieldnames or ())]
    if missing:
        raise ExpansionError(f"column not found: {', '.join(missing)}")


def _num(value, name, rid):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ExpansionError(f"record {rid}: column {name} is not numeric") from None


def read_records(
    path: str | Path,
    time_type: str,
    covariates: Sequence[str] = (),
    clusters: Sequence[str] = (),
) -> list[SurvivalRecord]:
    """Load records from CSV.

    Continuous files have one row per episode
    (``id,tstart,tstop,stratum,cause,...``); discrete files one row per
    individual (``id,time,cause,...``). Cause 0 means censored.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        base = ["id", "tstart", "tstop", "stratum", "cause"] if time_type == CONTINUOUS else ["id", "time", "cause"]
        _require(reader.fieldnames, [*base, *covariates, *clusters])
        raw = list(reader)

    if time_type == DISCRETE:
        out = []
        for r in raw:
            t = _num(r["time"], "time", r["id"])
            if t != int(t):
                raise ExpansionError(f"record {r['id']}: discrete times must be integers")
            stratum = int(r["stratum"]) if r.get("stratum") not in (None, "") else None
            out.append(
                SurvivalRecord.discrete(
                    r["id"], int(t), int(_num(r["cause"], "cause", r["id"])),
                    {c: _num(r[c], c, r["id"]) for c in covariates},
                    {c: r[c] for c in clusters},
                    stratum,
                )
            )
        return out

    if time_type != CONTINUOUS:
        raise ExpansionError(f"unknown time type: {time_type}")
    grouped: dict = {}
    for r in raw:
        grouped.setdefault(r["id"], []).append(r)
    out = []
    for rid, rows in grouped.items():
        rows.sort(key=lambda r: _num(r["tstart"], "tstart", rid))
        eps = []
        for r in rows:
            stratum = int(r["stratum"]) if r["stratum"] not in ("", None) else None
            eps.append(
                Episode(
                    _num(r["tstart"], "tstart", rid), _num(r["tstop"], "tstop", rid),
                    {c: _num(r[c], c, rid) for c in covariates}, stratum,
                )
            )
        for r in rows[:-1]:
            if int(_num(r["cause"], "cause", rid)) != 0:
                raise ExpansionError(f"record {rid}: cause given before the last episode")
        clus = {c: rows[0][c] for c in clusters}
        for r in rows[1:]:
            if any(r[c] != clus[c] for c in clusters):
                raise ExpansionError(f"record {rid}: cluster membership changes over time")
        out.append(SurvivalRecord(rid, CONTINUOUS, tuple(eps), int(_num(rows[-1]["cause"], "cause", rid)), clus))
    return out


def write_records(
    records: Iterable[SurvivalRecord],
    path: str | Path,
    covariates: Sequence[str] = (),
    clusters: Sequence[str] = (),
) -> None:
    records = list(records)
    if not records:
        raise ExpansionError("no records to write")
    time_type = records[0].time_type
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if time_type == DISCRETE:
            w.writerow(["id", "time", "cause", *covariates, *clusters])
            for r in records:
                ep = r.episodes[-1]
                w.writerow([r.id, int(r.exit_time), r.cause,
                            *[_fmt(ep.covariates[c]) for c in covariates], *[r.clusters[c] for c in clusters]])
        else:
            w.writerow(["id", "tstart", "tstop", "stratum", "cause", *covariates, *clusters])
            for r in records:
                for j, ep in enumerate(r.episodes):
                    cause = r.cause if j == len(r.episodes) - 1 else 0
                    w.writerow([r.id, _fmt(ep.t_start), _fmt(ep.t_stop), "" if ep.stratum is None else ep.stratum,
                                cause, *[_fmt(ep.covariates[c]) for c in covariates],
                                *[r.clusters[c] for c in clusters]])


def _fmt(x) -> str:
    x = float(x)
    return str(int(x)) if x == int(x) and abs(x) < 1e15 else repr(x)
