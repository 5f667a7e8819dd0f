"""Forward simulation of pedigrees and longevity records with known truth.

Every random draw comes from a Philox generator keyed by
``(seed, stream, index)`` so the output does not depend on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ModelError
from .expand import CONTINUOUS, DISCRETE, Episode, SurvivalRecord
from .pedigree import Pedigree, inbreeding, mendelian_variances

# stream identifiers
_S_GENETIC, _S_IID, _S_ASSIGN, _S_SURV, _S_CENS, _S_COV = range(6)


def stream(seed: int, kind: int, index: int = 0) -> np.random.Generator:
    """Independent generator for one (stream kind, index) pair."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(kind, int(index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class TraitTruth:
    name: str
    time_type: str
    baseline: Sequence[float]  # rates per interval, or hazard probabilities per period
    cuts: Sequence[float] | None = None  # continuous boundaries; the last may be inf
    cause: int = 1
    beta: Mapping[str, float] = field(default_factory=dict)


@dataclass
class ComponentTruth:
    name: str
    structure: str  # "pedigree" or "iid"
    column: str
    n_levels: int = 0  # iid only


@dataclass
class SimulationTruth:
    traits: Sequence[TraitTruth]
    components: Sequence[ComponentTruth] = ()
    sigma: Mapping[str, np.ndarray] = field(default_factory=dict)
    covariates: Sequence[str] = ()  # standard normal draws per individual
    seed: int = 0
    realized: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.traits)
        for c in self.components:
            S = np.atleast_2d(np.asarray(self.sigma[c.name], float))
            if S.shape != (T, T) or np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-12:
                raise ModelError(f"truth covariance for {c.name} is not a positive semi-definite {T}x{T} matrix")
            self.sigma[c.name] = S

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "traits": [
                {**asdict(t), "baseline": list(map(float, t.baseline)),
                 "cuts": None if t.cuts is None else [float(c) for c in t.cuts]}
                for t in self.traits
            ],
            "components": [asdict(c) for c in self.components],
            "sigma": {k: np.asarray(v).tolist() for k, v in self.sigma.items()},
            "covariates": list(self.covariates),
        }
        out["realized"] = {
            comp: {lv: list(map(float, v)) for lv, v in eff.items()} for comp, eff in self.realized.items()
        }
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_pedigree(n_sires: int, daughters_per_sire: int, seed: int = 0) -> Pedigree:
    """Unrelated sires, each with half-sib daughters out of unrecorded dams."""
    if n_sires < 1 or daughters_per_sire < 1:
        raise ModelError("counts must be at least 1")
    rows = [(f"s{i}", None, None) for i in range(n_sires)]
    rows += [(f"d{i}_{j}", f"s{i}", None) for i in range(n_sires) for j in range(daughters_per_sire)]
    return Pedigree.from_rows(rows)


def draw_genetic(ped: Pedigree, sigma: np.ndarray, seed: int) -> np.ndarray:
    """Breeding values with covariance ``kron(A, Sigma)`` via Mendelian sampling.

    ``u_i = (u_sire + u_dam) / 2 + sqrt(d_i) * L z_i`` with ``A = T D T'``.
    """
    sigma = np.atleast_2d(sigma)
    L = _sqrt_psd(sigma)
    T = sigma.shape[0]
    d = mendelian_variances(ped, inbreeding(ped))
    u = np.zeros((len(ped), T))
    for i in range(len(ped)):
        z = stream(seed, _S_GENETIC, i).standard_normal(T)
        mean = 0.0
        for p in (ped.sire[i], ped.dam[i]):
            if p >= 0:
                mean = mean + 0.5 * u[p]
        u[i] = mean + np.sqrt(d[i]) * (L @ z)
    return u


def _subjects(ped: Pedigree | None, n: int | None):
    if ped is None:
        if n is None:
            raise ModelError("either a pedigree or a subject count is required")
        return [f"i{k}" for k in range(n)], [None] * n
    subj = [(ind, ped.ids[s]) for ind, s in zip(ped.ids, ped.sire) if s >= 0]
    if not subj:
        subj = [(ind, None) for ind in ped.ids]
    return [s for s, _ in subj], [p for _, p in subj]


def _frailties(ped, truth: SimulationTruth, subjects, sires, seed):
    """Per-subject, per-trait summed random effects and cluster labels."""
    T = len(truth.traits)
    total = np.zeros((len(subjects), T))
    clusters = [dict() for _ in subjects]
    truth.realized = {}
    for ci, comp in enumerate(truth.components):
        S = truth.sigma[comp.name]
        if comp.structure == "pedigree":
            if ped is None:
                raise ModelError(f"component {comp.name} needs a pedigree")
            u = draw_genetic(ped, S, seed * 1_000_003 + ci)
            truth.realized[comp.name] = {ped.ids[i]: u[i].tolist() for i in range(len(ped))}
            for k, sire in enumerate(sires):
                # sire model: the record carries its sire's effect
                level = sire if sire is not None else subjects[k]
                total[k] += u[ped.index[level]]
                clusters[k][comp.column] = level
        else:
            if comp.n_levels < 1:
                raise ModelError(f"component {comp.name} needs n_levels")
            L = _sqrt_psd(S)
            v = np.array([L @ stream(seed, _S_IID, ci * 10_000_000 + j).standard_normal(T)
                          for j in range(comp.n_levels)])
            truth.realized[comp.name] = {f"{comp.name}{j}": v[j].tolist() for j in range(comp.n_levels)}
            for k in range(len(subjects)):
                j = int(stream(seed, _S_ASSIGN, ci * 10_000_000 + k).integers(comp.n_levels))
                total[k] += v[j]
                clusters[k][comp.column] = f"{comp.name}{j}"
    return total, clusters


def simulate_survival(
    ped: Pedigree | None,
    truth: SimulationTruth,
    censoring: float = 0.0,
    seed: int | None = None,
    n: int | None = None,
) -> list[SurvivalRecord]:
    """Draw one record per subject (pedigree members with a known sire, or ``n`` individuals).

    Continuous times come from inverting the piecewise-constant cumulative
    hazard, with independent exponential censoring at rate ``censoring``.
    Discrete times come from per-period draws; ``censoring`` is then a
    per-period drop-out probability. Competing causes: first event wins.
    """
    seed = truth.seed if seed is None else seed
    types = {t.time_type for t in truth.traits}
    if len(types) != 1:
        raise ModelError("all simulated causes must share a time type")
    subjects, sires = _subjects(ped, n)
    frail, clusters = _frailties(ped, truth, subjects, sires, seed)
    out = []
    for k, sid in enumerate(subjects):
        cov = {}
        if truth.covariates:
            draws = stream(seed, _S_COV, k).standard_normal(len(truth.covariates))
            cov = dict(zip(truth.covariates, draws.tolist()))
        lin = frail[k] + np.array([sum(t.beta.get(c, 0.0) * cov[c] for c in t.beta) for t in truth.traits])
        rng = stream(seed, _S_SURV, k)
        if types == {CONTINUOUS}:
            time, cause = _draw_continuous(truth.traits, lin, rng)
            if censoring > 0:
                c = stream(seed, _S_CENS, k).exponential(1.0 / censoring)
                if c < time:
                    time, cause = c, 0
            out.append(SurvivalRecord(sid, CONTINUOUS, (Episode(0.0, float(time), cov),), cause, clusters[k]))
        else:
            time, cause = _draw_discrete(truth.traits, lin, rng, censoring, stream(seed, _S_CENS, k))
            out.append(SurvivalRecord(sid, DISCRETE, (Episode(0, time, cov),), cause, clusters[k]))
    return out


def _draw_continuous(traits, lin, rng):
    cuts = np.asarray(traits[0].cuts, float)
    for t in traits[1:]:
        if not np.array_equal(np.asarray(t.cuts, float), cuts):
            raise ModelError("competing causes must share cut points in simulation")
    rates = np.array([np.asarray(t.baseline, float) * np.exp(l) for t, l in zip(traits, lin)])
    total = rates.sum(axis=0)
    target = rng.exponential()
    acc = 0.0
    for k in range(len(total)):
        width = cuts[k + 1] - cuts[k]
        piece = total[k] * width
        if acc + piece >= target and total[k] > 0:
            time = cuts[k] + (target - acc) / total[k]
            cause = 1 + int(rng.choice(len(traits), p=rates[:, k] / total[k]))
            return time, traits[cause - 1].cause
        acc += piece
    return cuts[-1], 0  # administratively censored at the last boundary


def _draw_discrete(traits, lin, rng, censoring, crng):
    probs = np.array([np.asarray(t.baseline, float) * np.exp(l) for t, l in zip(traits, lin)])
    if np.any(probs.sum(axis=0) >= 1.0):
        raise ModelError("truth yields invalid probability")
    for t in range(probs.shape[1]):
        r = rng.random()
        cum = np.cumsum(probs[:, t])
        hit = int(np.searchsorted(cum, r, side="right"))
        if hit < len(traits):
            return t + 1, traits[hit].cause
        if censoring > 0 and crng.random() < censoring:
            return t + 1, 0
    return probs.shape[1], 0


# ---------------------------------------------------------------------------
# Parity process: one latent culling process seen on two time scales
# ---------------------------------------------------------------------------


@dataclass
class ParityTruth:
    """Culling within parities of fixed length.

    ``rates[p][k]`` is the culling rate in local interval ``k`` of parity
    ``p + 1`` (cut points ``cuts`` on the parity-local clock). A sow that
    completes a parity is censored with probability ``p_censor``.
    """

    cuts: Sequence[float]
    rates: Sequence[Sequence[float]]
    sigma_sire: float
    sigma_hy: float
    n_hy: int
    p_censor: float
    seed: int = 0
    realized: dict = field(default_factory=dict)

    @property
    def parity_length(self) -> float:
        return float(self.cuts[-1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cuts"] = list(map(float, self.cuts))
        d["rates"] = [list(map(float, r)) for r in self.rates]
        return d

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def parity_rates(cuts: Sequence[float], shape: Sequence[float], culling: Sequence[float]) -> list[list[float]]:
    """Piecewise rates per parity: ``shape`` scaled so parity ``p`` culls with probability ``culling[p]``."""
    shape = np.asarray(shape, float)
    widths = np.diff(np.asarray(cuts, float))
    if shape.shape != widths.shape or np.any(shape <= 0):
        raise ModelError("shape must be positive with one value per interval")
    q = np.asarray(culling, float)
    if np.any((q <= 0) | (q >= 1)):
        raise ModelError("culling probabilities must lie in (0, 1)")
    unit = float(shape @ widths)
    return [list(shape * (-np.log1p(-qi) / unit)) for qi in q]


def simulate_parity(ped: Pedigree, truth: ParityTruth) -> tuple[list[SurvivalRecord], list[SurvivalRecord]]:
    """Days in herd stratified by parity (continuous) and number of parities (discrete).

    Both record sets come from the same realized lives; censoring happens
    only at parity completion.
    """
    seed = truth.seed
    comps = (ComponentTruth("sire", "pedigree", "sire"), ComponentTruth("hy", "iid", "hy", truth.n_hy))
    st = SimulationTruth(
        (TraitTruth("ND", CONTINUOUS, [1.0], [0, 1.0]),),
        comps,
        {"sire": np.array([[truth.sigma_sire]]), "hy": np.array([[truth.sigma_hy]])},
        seed=seed,
    )
    subjects, sires = _subjects(ped, None)
    frail, clusters = _frailties(ped, st, subjects, sires, seed)
    truth.realized = st.realized
    cuts = np.asarray(truth.cuts, float)
    P = len(truth.rates)
    nd, np_recs = [], []
    for k, sid in enumerate(subjects):
        rng = stream(seed, _S_SURV, k)
        crng = stream(seed, _S_CENS, k)
        mult = float(np.exp(frail[k, 0]))
        episodes, start, cause, parity = [], 0.0, 0, P
        for p in range(P):
            rates = np.asarray(truth.rates[p], float) * mult
            target = rng.exponential()
            acc, exit_local = 0.0, None
            for j in range(len(rates)):
                piece = rates[j] * (cuts[j + 1] - cuts[j])
                if acc + piece >= target:
                    exit_local = cuts[j] + (target - acc) / rates[j]
                    break
                acc += piece
            if exit_local is not None:
                episodes.append(Episode(start, start + exit_local, {}, p + 1))
                cause, parity = 1, p + 1
                break
            episodes.append(Episode(start, start + cuts[-1], {}, p + 1))
            start += cuts[-1]
            if p == P - 1 or crng.random() < truth.p_censor:
                cause, parity = 0, p + 1
                break
        nd.append(SurvivalRecord(sid, CONTINUOUS, tuple(episodes), cause, clusters[k]))
        np_recs.append(SurvivalRecord(sid, DISCRETE, (Episode(0, parity, {}),), cause, clusters[k]))
    return nd, np_recs


def sire_model(
    n_sires: int,
    daughters_per_sire: int,
    hazard: float | Sequence[float] = 0.08,
    periods: int = 5,
    sigma_sire: float = 0.06,
    sigma_hy: float = 0.22,
    n_hy: int = 100,
    censoring: float = 0.0,
    seed: int = 0,
) -> tuple[Pedigree, list[SurvivalRecord], SimulationTruth]:
    """Discrete sire model with an iid herd-year effect, one trait ``NP``."""
    base = np.broadcast_to(np.asarray(hazard, float), (periods,)).tolist()
    ped = simulate_pedigree(n_sires, daughters_per_sire, seed)
    truth = SimulationTruth(
        (TraitTruth("NP", DISCRETE, base),),
        (ComponentTruth("sire", "pedigree", "sire"), ComponentTruth("hy", "iid", "hy", n_hy)),
        {"sire": np.array([[sigma_sire]]), "hy": np.array([[sigma_hy]])},
        seed=seed,
    )
    return ped, simulate_survival(ped, truth, censoring), truth
