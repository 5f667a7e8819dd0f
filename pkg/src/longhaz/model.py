"""Model declaration, linear predictors and log-likelihoods.

Each trait is one marginal GLM on its own rows of a stacked pseudo-table:
a log-link Poisson (continuous pieces, or the Poisson approximation of
discrete periods) or a log-link Bernoulli. Baselines are free log-rates per
(trait, stratum, interval); random components enter every trait through a
cross-trait covariance block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import ModelError
from .expand import CONTINUOUS, DISCRETE, FAMILIES, CutPoints, PseudoTable, SurvivalRecord

POISSON_FAMILIES = ("poisson_pieces", "poisson_approx")
STRUCTURES = ("pedigree", "iid")


@dataclass(frozen=True)
class TraitSpec:
    name: str
    family: str
    covariates: tuple[str, ...] = ()
    dispersion: float | None = None  # None: estimated; otherwise held fixed
    cause: int | None = None  # event cause this trait responds to; None: any

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family: {self.family}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.dispersion is not None and not self.dispersion > 0:
            raise ModelError("fixed dispersion must be positive")

    @property
    def time_type(self) -> str:
        return CONTINUOUS if self.family == "poisson_pieces" else DISCRETE


@dataclass(frozen=True)
class RandomComponent:
    name: str
    structure: str
    column: str
    genetic_scale: float = 1.0

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ModelError(f"unknown random-component structure: {self.structure}")


@dataclass(frozen=True)
class ModelSpec:
    traits: tuple[TraitSpec, ...]
    random: tuple[RandomComponent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "traits", tuple(self.traits))
        object.__setattr__(self, "random", tuple(self.random))
        if not 1 <= len(self.traits) <= 2:
            raise ModelError("a model has one or two traits")
        names = [t.name for t in self.traits]
        if len(set(names)) != len(names):
            raise ModelError("trait names must be unique")
        cnames = [c.name for c in self.random]
        if len(set(cnames)) != len(cnames):
            raise ModelError("random-component names must be unique")

    @property
    def trait_names(self) -> list[str]:
        return [t.name for t in self.traits]

    def trait(self, name: str) -> TraitSpec:
        for t in self.traits:
            if t.name == name:
                return t
        raise ModelError(f"unknown trait: {name}")

    def component(self, name: str) -> RandomComponent:
        for c in self.random:
            if c.name == name:
                return c
        raise ModelError(f"unknown random component: {name}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        traits = []
        for t in d["traits"]:
            disp = t.get("dispersion", {"free": True})
            if isinstance(disp, Mapping):
                fixed = disp.get("fixed")
            else:
                fixed = disp
            cause = t.get("cause")
            traits.append(TraitSpec(str(t["name"]), t["family"], tuple(t.get("covariates", ())),
                                    None if fixed is None else float(fixed),
                                    None if cause is None else int(cause)))
        random = [
            RandomComponent(c["name"], c["structure"], c["column"], float(c.get("genetic_scale", 1.0)))
            for c in d.get("random", ())
        ]
        return cls(tuple(traits), tuple(random))

    def to_dict(self) -> dict:
        return {
            "traits": [
                {"name": t.name, "family": t.family, "covariates": list(t.covariates),
                 "dispersion": {"free": True} if t.dispersion is None else {"fixed": t.dispersion},
                 "cause": t.cause}
                for t in self.traits
            ],
            "random": [
                {"name": c.name, "structure": c.structure, "column": c.column, "genetic_scale": c.genetic_scale}
                for c in self.random
            ],
        }

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class VarianceComponents:
    """Cross-trait covariance block per random component and dispersion per trait."""

    traits: tuple[str, ...]
    sigma: Mapping[str, np.ndarray]
    dispersion: Mapping[str, float]

    def __post_init__(self):
        T = len(self.traits)
        for name, S in self.sigma.items():
            S = np.asarray(S, float)
            if S.shape != (T, T) or not np.allclose(S, S.T):
                raise ModelError(f"covariance block {name} must be a symmetric {T}x{T} matrix")
            if np.linalg.eigvalsh(S).min() < -1e-10 * max(1.0, np.abs(S).max()):
                raise ModelError(f"covariance block {name} is not positive semi-definite")
        for t, phi in self.dispersion.items():
            if not phi > 0:
                raise ModelError(f"dispersion for {t} must be positive")

    def variance(self, component: str, trait: str) -> float:
        i = self.traits.index(trait)
        return float(np.asarray(self.sigma[component])[i, i])


@dataclass(frozen=True)
class Params:
    """Fixed effects and realized random effects.

    ``baseline`` is keyed by (trait, stratum, k) with stratum 0 for
    unstratified traits; ``effects`` by component then (level, trait).
    """

    baseline: Mapping[tuple, float]
    beta: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    effects: Mapping[str, Mapping[tuple, float]] = field(default_factory=dict)


def _baseline_value(params: Params, trait, stratum, k):
    key = (trait, int(stratum), int(k))
    if key in params.baseline:
        return params.baseline[key]
    key0 = (trait, 0, int(k))
    if key0 in params.baseline:
        return params.baseline[key0]
    raise ModelError(f"no baseline for trait {trait}, stratum {stratum}, interval {k}")


def linear_predictor(spec: ModelSpec, row: Mapping, params: Params) -> float:
    """log-baseline + X'beta + sum of the row's random effects (offset excluded)."""
    trait = str(row["trait"])
    ts = spec.trait(trait)
    eta = _baseline_value(params, trait, row.get("stratum", 0), row["k"])
    beta = params.beta.get(trait, {})
    for c in ts.covariates:
        eta += beta.get(c, 0.0) * float(row[c])
    for comp in spec.random:
        level = str(row[comp.column])
        try:
            eta += params.effects[comp.name][(level, trait)]
        except KeyError:
            raise ModelError(f"unseen cluster level: {comp.name}={level}") from None
    return eta


def conditional_hazard(eta, family: str):
    """exp(eta): a rate for Poisson families, a hazard probability for Bernoulli."""
    eta = np.asarray(eta, float)
    if not np.all(np.isfinite(eta)):
        raise ModelError("linear predictor must be finite")
    h = np.exp(eta)
    if family == "bernoulli" and np.any(h >= 1.0):
        raise ModelError("hazard probability >= 1")
    return h if h.ndim else float(h)


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------


@dataclass
class Design:
    """Sparse design of a pseudo-table under a model spec."""

    X: sp.csr_matrix
    Z: list[sp.csr_matrix]
    y: np.ndarray
    offset: np.ndarray
    exposure: np.ndarray
    bernoulli: np.ndarray  # bool per row
    trait_idx: np.ndarray
    fixed_names: list[tuple]
    levels: list[list[str]]
    traits: list[str]

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]

    def eta(self, beta: np.ndarray, u: Sequence[np.ndarray]) -> np.ndarray:
        out = self.X @ beta
        for Zc, uc in zip(self.Z, u):
            out = out + Zc @ uc
        return out

    def fixed_slices(self) -> dict[str, np.ndarray]:
        """Column positions of each trait's fixed effects."""
        out = {t: [] for t in self.traits}
        for j, (_, trait, _) in enumerate(self.fixed_names):
            out[trait].append(j)
        return {t: np.array(v, dtype=np.int64) for t, v in out.items()}


def baseline_cells(table: PseudoTable, trait: str) -> list[tuple[int, int]]:
    d = table.data
    mask = (d["trait"] == trait).to_numpy()
    bs = table.baseline_stratum()[mask]
    ks = d["k"].to_numpy()[mask]
    return sorted(set(zip(bs.tolist(), ks.tolist())))


def build_design(
    table: PseudoTable,
    spec: ModelSpec,
    levels: Sequence[Sequence[str]] | None = None,
    cells: Mapping[str, Sequence[tuple[int, int]]] | None = None,
) -> Design:
    """Assemble X (baseline cells then covariates, per trait) and Z per component.

    Z columns are ordered level-major: ``level * n_traits + trait``.
    """
    d = table.data
    traits = spec.trait_names
    unknown = set(d["trait"].unique()) - set(traits)
    if unknown:
        raise ModelError(f"table holds traits not in the model: {sorted(unknown)}")
    for t in spec.traits:
        if t.name not in table.layouts:
            raise ModelError(f"trait {t.name} has no rows")
        if t.time_type != table.layouts[t.name].time_type:
            raise ModelError(f"family {t.family} does not fit {table.layouts[t.name].time_type} rows of {t.name}")
    n = len(d)
    tcode = pd.Categorical(d["trait"], categories=traits).codes.astype(np.int64)
    bstrat = table.baseline_stratum()
    ks = d["k"].to_numpy()

    rows, cols, vals = [], [], []
    names: list[tuple] = []
    for ti, ts in enumerate(spec.traits):
        mask = np.flatnonzero(tcode == ti)
        tcells = list(cells[ts.name]) if cells is not None else baseline_cells(table, ts.name)
        pos = {c: j for j, c in enumerate(tcells)}
        base = len(names)
        col = np.empty(mask.size, dtype=np.int64)
        for r_i, r in enumerate(mask):
            key = (int(bstrat[r]), int(ks[r]))
            if key not in pos:
                key = (0, int(ks[r]))
                if key not in pos:
                    raise ModelError(f"no baseline for trait {ts.name}, interval {ks[r]}")
            col[r_i] = base + pos[key]
        rows.append(mask)
        cols.append(col)
        vals.append(np.ones(mask.size))
        names.extend(("baseline", ts.name, c) for c in tcells)
        for c in ts.covariates:
            if c not in d.columns:
                raise ModelError(f"column not found: {c}")
            rows.append(mask)
            cols.append(np.full(mask.size, len(names)))
            vals.append(d[c].to_numpy(float)[mask])
            names.append(("beta", ts.name, c))
    X = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, len(names))
    )

    T = len(traits)
    Zs, lev_out = [], []
    for ci, comp in enumerate(spec.random):
        if comp.column not in d.columns:
            raise ModelError(f"column not found: {comp.column}")
        col_vals = d[comp.column].astype(str)
        lev = list(levels[ci]) if levels is not None else sorted(col_vals.unique())
        codes = pd.Categorical(col_vals, categories=lev).codes.astype(np.int64)
        if np.any(codes < 0):
            bad = col_vals[codes < 0].iloc[0]
            raise ModelError(f"unseen cluster level: {comp.name}={bad}")
        Zs.append(sp.csr_matrix((np.ones(n), (np.arange(n), codes * T + tcode)), shape=(n, len(lev) * T)))
        lev_out.append(lev)

    fam = np.array([spec.trait(t).family for t in traits])[tcode] if n else np.array([], dtype=str)
    exposure = d["exposure"].to_numpy(float)
    offset = np.where(fam == "poisson_pieces", np.log(np.where(fam == "poisson_pieces", exposure, 1.0)), 0.0)
    return Design(
        X=X, Z=Zs, y=d["y"].to_numpy(float), offset=offset,
        exposure=np.where(fam == "poisson_pieces", exposure, 1.0),
        bernoulli=fam == "bernoulli", trait_idx=tcode, fixed_names=names, levels=lev_out, traits=traits,
    )


def params_to_vectors(design: Design, spec: ModelSpec, params: Params) -> tuple[np.ndarray, list[np.ndarray]]:
    beta = np.empty(design.n_fixed)
    for j, (kind, trait, key) in enumerate(design.fixed_names):
        if kind == "baseline":
            beta[j] = _baseline_value(params, trait, key[0], key[1])
        else:
            beta[j] = params.beta.get(trait, {}).get(key, 0.0)
    u = []
    for comp, lev in zip(spec.random, design.levels):
        eff = params.effects.get(comp.name, {})
        vec = np.empty(len(lev) * len(design.traits))
        for li, level in enumerate(lev):
            for ti, trait in enumerate(design.traits):
                try:
                    vec[li * len(design.traits) + ti] = eff[(level, trait)]
                except KeyError:
                    raise ModelError(f"unseen cluster level: {comp.name}={level}") from None
        u.append(vec)
    return beta, u


def vectors_to_params(design: Design, spec: ModelSpec, beta: np.ndarray, u: Sequence[np.ndarray]) -> Params:
    baseline, b = {}, {t: {} for t in design.traits}
    for j, (kind, trait, key) in enumerate(design.fixed_names):
        if kind == "baseline":
            baseline[(trait, key[0], key[1])] = float(beta[j])
        else:
            b[trait][key] = float(beta[j])
    effects = {}
    T = len(design.traits)
    for comp, lev, uc in zip(spec.random, design.levels, u):
        effects[comp.name] = {
            (level, trait): float(uc[li * T + ti])
            for li, level in enumerate(lev) for ti, trait in enumerate(design.traits)
        }
    return Params(baseline, b, effects)


def linear_predictors(table: PseudoTable, spec: ModelSpec, params: Params) -> np.ndarray:
    levels = []
    for comp in spec.random:
        eff = params.effects.get(comp.name, {})
        levels.append(sorted({lv for lv, _ in eff}))
    cells = {t: sorted({(s, k) for (tt, s, k) in params.baseline if tt == t}) for t in spec.trait_names}
    design = build_design(table, spec, levels=levels, cells=cells)
    beta, u = params_to_vectors(design, spec, params)
    return design.eta(beta, u)


# ---------------------------------------------------------------------------
# Log-likelihoods
# ---------------------------------------------------------------------------


def row_loglik(y, eta, offset, exposure, bernoulli) -> np.ndarray:
    """Per-row conditional log-likelihood contributions (y! dropped)."""
    y = np.asarray(y, float)
    eta = np.asarray(eta, float)
    out = np.empty_like(eta)
    pois = ~bernoulli
    out[pois] = y[pois] * (offset[pois] + eta[pois]) - exposure[pois] * np.exp(eta[pois])
    if np.any(bernoulli):
        eb = eta[bernoulli]
        if np.any(eb >= 0):
            raise ModelError("hazard probability >= 1")
        yb = y[bernoulli]
        out[bernoulli] = yb * eb + (1 - yb) * np.log1p(-np.exp(eb))
    return out


def conditional_loglik(table: PseudoTable, spec: ModelSpec, params: Params) -> float:
    """Sum of pseudo-row log-likelihoods given the random effects."""
    if len(table) == 0:
        return 0.0
    levels = [sorted({lv for lv, _ in params.effects.get(c.name, {})}) for c in spec.random]
    cells = {t: sorted({(s, k) for (tt, s, k) in params.baseline if tt == t}) for t in spec.trait_names}
    design = build_design(table, spec, levels=levels, cells=cells)
    beta, u = params_to_vectors(design, spec, params)
    eta = design.eta(beta, u)
    return math.fsum(row_loglik(design.y, eta, design.offset, design.exposure, design.bernoulli))


class ExactSurvival:
    """Survival log-likelihood sum_i [d_i log lambda(t_i) - Lambda(t_i)] without expansion.

    Episode data are gathered once; :meth:`loglik` then evaluates any
    parameter point. The cumulative hazard of each episode comes from linear
    interpolation of the cumulative baseline at the interval boundaries.
    ``cause`` selects the events counted for ``trait`` (``None``: any cause).
    """

    def __init__(self, records: Sequence[SurvivalRecord], cuts: CutPoints, spec: ModelSpec,
                 trait: str | None = None, cause: int | None = None, stratified: bool = False):
        self.spec = spec
        self.trait = trait if trait is not None else spec.trait_names[0]
        self.covariates = spec.trait(self.trait).covariates
        self.stratified = stratified
        strata, a, b, x, levels, owner, event = [], [], [], [], [], [], []
        for i, rec in enumerate(records):
            if rec.time_type != CONTINUOUS:
                raise ModelError(f"record {rec.id} is not continuous")
            levels.append([str(rec.clusters[c.column]) for c in spec.random])
            entries = rec.stratum_entries() if stratified else {}
            for j, ep in enumerate(rec.episodes):
                origin = entries.get(ep.stratum, 0.0) if stratified else 0.0
                strata.append(ep.stratum if stratified else 0)
                a.append(ep.t_start - origin)
                b.append(ep.t_stop - origin)
                x.append([ep.covariates[c] for c in self.covariates])
                owner.append(i)
                last = j == len(rec.episodes) - 1
                event.append(last and rec.cause != 0 and (cause is None or rec.cause == cause))
        self.a, self.b = np.array(a, float), np.array(b, float)
        self.x = np.array(x, float).reshape(len(a), len(self.covariates))
        self.owner = np.array(owner, dtype=np.int64)
        self.event = np.array(event, dtype=bool)
        self.levels = levels
        strata = np.array(strata, dtype=np.int64)
        self.groups = []  # (stratum, boundaries, episode index, event-interval index)
        for st in np.unique(strata):
            idx = np.flatnonzero(strata == st)
            bnd = np.asarray(cuts.for_stratum(int(st)) if stratified else cuts.boundaries, float)
            k = np.maximum(np.searchsorted(bnd, self.b[idx], side="left"), 1)
            self.groups.append((int(st), bnd, idx, k))

    def loglik(self, params: Params) -> float:
        return math.fsum(self.terms(params))

    def terms(self, params: Params) -> np.ndarray:
        """Individual contributions (one exposure term per episode, one log-hazard term per event)."""
        trait = self.trait
        beta = params.beta.get(trait, {})
        b = np.array([beta.get(c, 0.0) for c in self.covariates])
        frail = np.zeros(len(self.levels))
        for ci, comp in enumerate(self.spec.random):
            eff = params.effects[comp.name]
            for i, lv in enumerate(self.levels):
                try:
                    frail[i] += eff[(lv[ci], trait)]
                except KeyError:
                    raise ModelError(f"unseen cluster level: {comp.name}={lv[ci]}") from None
        lin = frail[self.owner] + self.x @ b
        terms = []
        for st, bnd, idx, k in self.groups:
            log_rates = np.array([_baseline_value(params, trait, st, j) for j in range(1, len(bnd))])
            cum = np.concatenate([[0.0], np.cumsum(np.exp(log_rates) * np.diff(bnd))])
            H = np.interp(self.b[idx], bnd, cum) - np.interp(self.a[idx], bnd, cum)
            terms.append(-np.exp(lin[idx]) * H)
            ev = self.event[idx]
            terms.append(log_rates[k[ev] - 1] + lin[idx][ev])
        return np.concatenate(terms) if terms else np.zeros(0)


def exact_survival_loglik(
    records: Sequence[SurvivalRecord],
    cuts: CutPoints,
    spec: ModelSpec,
    params: Params,
    trait: str | None = None,
    cause: int | None = None,
    stratified: bool = False,
) -> float:
    """One-shot :class:`ExactSurvival` evaluation."""
    return ExactSurvival(records, cuts, spec, trait, cause, stratified).loglik(params)
