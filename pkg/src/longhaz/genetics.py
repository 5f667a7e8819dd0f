"""Adjusted baseline hazards, phenotypic-variance parcels and heritabilities.

Heritability is evaluated at the Kaplan-Meier median survival time ``t_m``:

* hazard scale, continuous or Poisson family: ``s_g / (s_g + s_e + phi / lam)``
* hazard scale, Bernoulli family: ``s_g / (s_g + s_e + phi (1 - lam) / lam)``
* cumulative scale, continuous or Poisson: ``s_g / (s_g + s_e + phi / Lam)``
* cumulative scale, Bernoulli: ``s_g / (s_g + s_e + phi gamma / Lam^2)``

with ``s_g`` the genetic variance after ``genetic_scale`` (4 for sire models).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelError
from .expand import CONTINUOUS, PseudoTable
from .nonparam import kaplan_meier

log = logging.getLogger(__name__)

AVERAGING = "risk-set"  # eta is averaged over individuals at risk in each interval


@dataclass(frozen=True)
class BaselineStar:
    """exp of the risk-set average linear predictor per interval, for one trait and stratum."""

    trait: str
    stratum: int
    time_type: str
    boundaries: np.ndarray  # interval edges (continuous) or 0..T (discrete)
    eta_bar: np.ndarray  # NaN where the risk set is empty
    n_at_risk: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.eta_bar)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def value_at(self, t: float) -> float:
        """lambda* in the interval containing ``t`` (intervals closed on the right)."""
        k = int(np.searchsorted(self.boundaries, t, side="left"))
        k = min(max(k, 1), len(self.eta_bar))
        if t > self.boundaries[-1] or t < 0:
            raise ModelError("time out of range")
        return float(np.exp(self.eta_bar[k - 1]))


def _row_eta(fit, table: PseudoTable) -> np.ndarray:
    d = table.data
    params = fit.params
    spec = fit.spec
    bstrat = table.baseline_stratum()
    base = np.array([
        params.baseline.get((t, int(s), int(k)), params.baseline.get((t, 0, int(k)), np.nan))
        for t, s, k in zip(d["trait"], bstrat, d["k"])
    ], float)
    eta = base
    for ts in spec.traits:
        mask = (d["trait"] == ts.name).to_numpy()
        for c in ts.covariates:
            eta = eta + np.where(mask, params.beta.get(ts.name, {}).get(c, 0.0) * d[c].to_numpy(float), 0.0)
    for comp in spec.random:
        eff = params.effects.get(comp.name, {})
        vals = np.array([eff.get((str(lv), t), np.nan) for lv, t in zip(d[comp.column].astype(str), d["trait"])])
        if np.any(np.isnan(vals)):
            raise ModelError(f"unseen cluster level: {comp.name}")
        eta = eta + vals
    return eta


def baseline_star(fit, table: PseudoTable) -> dict[tuple[str, int], BaselineStar]:
    """Per (trait, stratum): average of eta-hat over each interval's risk set."""
    d = table.data.assign(_eta=_row_eta(fit, table), _bs=table.baseline_stratum())
    out = {}
    for trait in fit.spec.trait_names:
        lay = table.layouts[trait]
        sub = d[d["trait"] == trait]
        # one value per individual and interval, then the risk-set mean
        per_ind = sub.groupby(["_bs", "k", "id"], sort=True)["_eta"].mean()
        means = per_ind.groupby(level=[0, 1]).mean()
        counts = per_ind.groupby(level=[0, 1]).size()
        for s in sorted(sub["_bs"].unique()):
            if lay.time_type == CONTINUOUS:
                bnd = lay.cuts.for_stratum(s) if lay.stratified else lay.cuts.boundaries
            else:
                bnd = np.arange(0, int(sub["k"].max()) + 1, dtype=float)
            K = len(bnd) - 1
            eta_bar = np.full(K, np.nan)
            n = np.zeros(K, dtype=np.int64)
            for k in range(1, K + 1):
                if (s, k) in means.index:
                    eta_bar[k - 1] = means.loc[(s, k)]
                    n[k - 1] = counts.loc[(s, k)]
            out[(trait, int(s))] = BaselineStar(trait, int(s), lay.time_type, np.asarray(bnd, float), eta_bar, n)
    return out


def cumulative_star(bs: BaselineStar, t: float) -> float:
    """Lambda*(t): piecewise-linear accumulation (continuous) or partial sum over periods 1..t."""
    bnd = bs.boundaries
    if t < 0 or t > bnd[-1] + 1e-12 * max(1.0, bnd[-1]):
        raise ModelError("time out of range")
    lam = bs.values
    if np.any(np.isnan(lam)):
        log.warning("intervals with empty risk sets skipped in the cumulative hazard of %s", bs.trait)
    if bs.time_type == CONTINUOUS:
        covered = np.clip(t, bnd[:-1], bnd[1:]) - bnd[:-1]
        return math.fsum(np.nan_to_num(covered * lam))
    if t != int(t):
        raise ModelError("discrete time must be an integer period")
    return math.fsum(np.nan_to_num(lam[: int(t)]))


def gamma_star(bs: BaselineStar, t: int) -> float:
    """gamma(t) = sum over periods s <= t of lambda*(s) (1 - lambda*(s))."""
    if t < 0 or t > len(bs.eta_bar):
        raise ModelError("time out of range")
    lam = bs.values[: int(t)]
    return math.fsum(np.nan_to_num(lam * (1 - lam)))


def _discrete_form(family: str) -> bool:
    return family == "bernoulli"


def variance_decomposition(sigma_g: float, sigma_e: float, phi: float, value: float, family: str,
                           scale: str = "hazard", at_risk: int = 1, gamma: float | None = None,
                           genetic_scale: float = 1.0) -> tuple[float, float, float]:
    """(genetic, environmental, dispersion) parcels of the phenotypic variance.

    ``value`` is lambda* on the hazard scale and Lambda* on the cumulative scale.
    """
    _check_inputs(sigma_g, sigma_e, phi, value, family, scale, gamma)
    if not at_risk:
        return (0.0, 0.0, 0.0)
    sg = genetic_scale * sigma_g
    v2 = value * value
    if scale == "hazard":
        disp = phi * value * (1.0 - value) if _discrete_form(family) else phi * value
    else:
        disp = phi * gamma if _discrete_form(family) else phi * value
    return (v2 * sg, v2 * sigma_e, disp)


def _check_inputs(sigma_g, sigma_e, phi, value, family, scale, gamma):
    if min(sigma_g, sigma_e, phi) < 0:
        raise ModelError("variances and dispersion must be non-negative")
    if scale == "hazard":
        if not (value > 0 and math.isfinite(value)) or (_discrete_form(family) and value >= 1):
            raise ModelError("invalid hazard for heritability")
    elif scale == "cumulative":
        if not (value > 0 and math.isfinite(value)):
            raise ModelError("invalid cumulative hazard")
        if _discrete_form(family) and (gamma is None or gamma < 0):
            raise ModelError("discrete cumulative heritability needs gamma >= 0")
    else:
        raise ModelError(f"unknown scale: {scale}")


def h2_hazard(sigma_g: float, sigma_e: float, phi: float, lam: float, family: str,
              genetic_scale: float = 1.0) -> float:
    _check_inputs(sigma_g, sigma_e, phi, lam, family, "hazard", None)
    sg = genetic_scale * sigma_g
    disp = phi * (1.0 - lam) / lam if _discrete_form(family) else phi / lam
    den = sg + sigma_e + disp
    return sg / den if den > 0 else 0.0


def h2_cumulative(sigma_g: float, sigma_e: float, phi: float, Lam: float, family: str,
                  gamma: float | None = None, genetic_scale: float = 1.0) -> float:
    _check_inputs(sigma_g, sigma_e, phi, Lam, family, "cumulative", gamma)
    sg = genetic_scale * sigma_g
    disp = phi * gamma / (Lam * Lam) if _discrete_form(family) else phi / Lam
    den = sg + sigma_e + disp
    return sg / den if den > 0 else 0.0


def genetic_correlation(S) -> float:
    S = np.asarray(S, float)
    if S.shape != (2, 2):
        raise ModelError("correlation needs a 2x2 block")
    if S[0, 0] <= 0 or S[1, 1] <= 0:
        raise ModelError("correlation undefined")
    r = S[0, 1] / math.sqrt(S[0, 0] * S[1, 1])
    return float(min(1.0, max(-1.0, r)))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class HeritabilityReport:
    trait: str
    stratum: int
    family: str
    t_m: float | None
    lambda_star: float | None
    Lambda_star: float | None
    gamma: float | None
    sigma_g: float
    sigma_e: float
    dispersion: float
    genetic_scale: float
    parcels_hazard: tuple | None
    parcels_cumulative: tuple | None
    h2_hazard: float | None
    h2_cumulative: float | None
    averaging: str = AVERAGING
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parcels"] = {"hazard": self.parcels_hazard, "cumulative": self.parcels_cumulative}
        del d["parcels_hazard"], d["parcels_cumulative"]
        return d


def _km_input(table: PseudoTable, trait: str, stratum: int):
    """Exit time and event per individual, read back from the pseudo-table."""
    d = table.data
    bs = table.baseline_stratum()
    sub = d[(d["trait"] == trait).to_numpy() & (bs == stratum)]
    lay = table.layouts[trait]
    g = sub.groupby("id", sort=True)
    if lay.time_type == CONTINUOUS:
        times = g["exposure"].sum().to_numpy()
    else:
        times = g["k"].max().to_numpy(float)
    events = g["y"].max().to_numpy(np.int64)
    return times, events


def variance_parts(fit, trait: str) -> tuple[float, float, float, float]:
    """(raw genetic variance, environmental variance, dispersion, genetic scale) for a trait."""
    i = list(fit.traits).index(trait)
    sg, se, scale = 0.0, 0.0, 1.0
    for c in fit.spec.random:
        v = float(np.asarray(fit.variance.sigma[c.name])[i, i])
        if c.structure == "pedigree":
            sg += v
            scale = c.genetic_scale
        else:
            se += v
    return sg, se, float(fit.variance.dispersion[trait]), scale


def heritability_report(fit, table: PseudoTable) -> list[HeritabilityReport]:
    stars = baseline_star(fit, table)
    out = []
    for (trait, stratum), bs in stars.items():
        family = fit.spec.trait(trait).family
        sg, se, phi, scale = variance_parts(fit, trait)
        rep = HeritabilityReport(trait, stratum, family, None, None, None, None, sg, se, phi, scale,
                                 None, None, None, None)
        km = kaplan_meier(*_km_input(table, trait, stratum))
        if km.median is None:
            rep.notes.append("median survival not reached; heritability not evaluated")
            out.append(rep)
            continue
        t_m = km.median
        rep.t_m = t_m
        try:
            lam = bs.value_at(t_m)
            Lam = cumulative_star(bs, t_m)
            gam = gamma_star(bs, int(t_m)) if bs.time_type != CONTINUOUS else None
            rep.lambda_star, rep.Lambda_star, rep.gamma = lam, Lam, gam
            rep.parcels_hazard = variance_decomposition(sg, se, phi, lam, family, "hazard", genetic_scale=scale)
            rep.h2_hazard = h2_hazard(sg, se, phi, lam, family, scale)
            rep.parcels_cumulative = variance_decomposition(sg, se, phi, Lam, family, "cumulative",
                                                            gamma=gam, genetic_scale=scale)
            rep.h2_cumulative = h2_cumulative(sg, se, phi, Lam, family, gam, scale)
        except ModelError as exc:
            rep.notes.append(str(exc))
        out.append(rep)
    return out


def write_h2_report(reports: list[HeritabilityReport], path: str | Path, digits: int = 6) -> None:
    from .inference import round_sig

    payload = {"averaging": AVERAGING, "traits": [r.to_dict() for r in reports]}
    Path(path).write_text(json.dumps(round_sig(payload, digits), indent=2) + "\n")
