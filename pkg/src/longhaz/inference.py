"""Penalized quasi-likelihood fitting of the multivariate mixed hazard model.

The outer loop alternates

* IRLS on working variates ``z = eta + (y - mu) / mu`` (log link) with the
  mixed-model equations solved by a sparse symmetric factorization,
* one average-information REML step for every cross-trait covariance block
  on the resulting working linear mixed model,
* a Pearson update of each free dispersion.

Random-effect columns are level-major (``level * n_traits + trait``) so the
penalty of a component is ``kron(K^-1, Sigma^-1)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, MMEError, ModelError
from .expand import PseudoTable
from .model import (
    Design,
    ModelSpec,
    Params,
    VarianceComponents,
    build_design,
    params_to_vectors,
    row_loglik,
    vectors_to_params,
)
from .pedigree import Pedigree, a_inverse

log = logging.getLogger(__name__)

CHUNK_ROWS = 16384
MAX_HALVING = 30
MU_CAP = 1.0 - 1e-4


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 200
    variance_floor: float = 1e-10
    fix_dispersion: float | None = None
    threads: int = 1
    init_variance: float = 0.1
    inner_tol: float = 1e-10
    max_inner: int = 100


# ---------------------------------------------------------------------------
# Mixed-model equations
# ---------------------------------------------------------------------------


@dataclass
class MixedModelEquations:
    C: sp.csc_matrix
    rhs: np.ndarray
    n_fixed: int = 0


@dataclass
class Factor:
    """Sparse symmetric factorization of an MME coefficient matrix."""

    lu: object
    logdet: float

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(b, float))


def factorize(C: sp.spmatrix) -> Factor:
    C = sp.csc_matrix(C)
    if C.shape[0] == 0:
        return Factor(None, 0.0)
    try:
        lu = spla.splu(C, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:  # exactly singular
        raise MMEError("MME not positive definite") from exc
    d = lu.U.diagonal()
    if not np.array_equal(lu.perm_r, lu.perm_c) or not np.all(d > 0) or not np.all(np.isfinite(d)):
        raise MMEError("MME not positive definite")
    return Factor(lu, float(np.sum(np.log(d))))


def solve_mme(mme: MixedModelEquations | sp.spmatrix, rhs: np.ndarray | None = None) -> np.ndarray:
    """Solve ``C x = r`` for symmetric positive definite sparse ``C``.

    One round of iterative refinement keeps ``|Cx - r| / |r|`` at rounding level.
    """
    if isinstance(mme, MixedModelEquations):
        C, r = mme.C, mme.rhs
    else:
        C, r = mme, rhs
    C = sp.csc_matrix(C)
    r = np.asarray(r, float)
    if C.shape[0] != C.shape[1] or C.shape[0] != r.shape[0]:
        raise MMEError("MME dimensions do not conform")
    if abs(C - C.T).max() > 1e-12 * max(abs(C).max(), 1.0):
        raise MMEError("MME not symmetric")
    fac = factorize(C)
    x = fac.solve(r)
    for _ in range(2):
        res = r - C @ x
        if np.linalg.norm(res) <= 1e-14 * max(np.linalg.norm(r), 1e-300):
            break
        x = x + fac.solve(res)
    return x


def _chunk_crossprod(M: sp.csr_matrix, w: np.ndarray, z: np.ndarray, threads: int):
    """``M' diag(w) M`` and ``M' (w z)`` over fixed row chunks, reduced in chunk order."""
    n = M.shape[0]
    starts = list(range(0, max(n, 1), CHUNK_ROWS))

    def part(s):
        Mc = M[s:s + CHUNK_ROWS]
        wc = w[s:s + CHUNK_ROWS]
        WM = sp.diags(wc) @ Mc
        return (Mc.T @ WM).tocsc(), Mc.T @ (wc * z[s:s + CHUNK_ROWS])

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(part, starts))
    else:
        parts = [part(s) for s in starts]
    C, r = parts[0]
    for Cp, rp in parts[1:]:
        C = C + Cp
        r = r + rp
    return C, r


# ---------------------------------------------------------------------------
# Problem set-up
# ---------------------------------------------------------------------------


def _sym_params(T: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(T) for j in range(i + 1)]


def _unit(T: int, i: int, j: int) -> np.ndarray:
    E = np.zeros((T, T))
    E[i, j] = E[j, i] = 1.0
    return E


def _clip_psd(S: np.ndarray, floor: float) -> tuple[np.ndarray, bool]:
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    pinned = bool(np.any(vals < floor))
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T), pinned


@dataclass
class _Problem:
    design: Design
    spec: ModelSpec
    kinv: list[sp.csc_matrix]
    logdet_k: list[float]
    fixed_phi: dict[int, float]
    opts: FitOptions
    M: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.M = sp.hstack([self.design.X, *self.design.Z], format="csr")

    @property
    def T(self) -> int:
        return len(self.design.traits)

    @property
    def p(self) -> int:
        return self.design.n_fixed

    def blocks(self) -> list[slice]:
        out, start = [], self.p
        for Zc in self.design.Z:
            out.append(slice(start, start + Zc.shape[1]))
            start += Zc.shape[1]
        return out

    def penalty(self, sigmas: Sequence[np.ndarray]) -> sp.csc_matrix:
        mats = [sp.csc_matrix((self.p, self.p))]
        for Kinv, S in zip(self.kinv, sigmas):
            mats.append(sp.kron(Kinv, np.linalg.inv(S), format="csc"))
        return sp.block_diag(mats, format="csc")

    def mu(self, eta: np.ndarray) -> np.ndarray:
        return np.exp(self.design.offset + eta)

    def working(self, eta: np.ndarray, phi: np.ndarray):
        """Fisher weights and working variate ``z = eta + score / weight``.

        Bernoulli weights use ``min(mu, MU_CAP)`` so the system stays well
        conditioned next to the boundary; the score is exact, hence the
        fixed point is unchanged.
        """
        d = self.design
        mu = self.mu(eta)
        mb = np.where(d.bernoulli, mu, 0.0)
        score = np.where(d.bernoulli, (d.y - mu) / (1.0 - mb), d.y - mu)
        base = np.where(d.bernoulli, mu / (1.0 - np.minimum(mb, MU_CAP)), mu)
        w = base / phi[d.trait_idx]
        z = eta + score / base
        return w, z

    def assemble(self, w, z, sigmas):
        C, r = _chunk_crossprod(self.M, w, z, self.opts.threads)
        return (C + self.penalty(sigmas)).tocsc(), r

    def eta(self, sol: np.ndarray) -> np.ndarray:
        return self.M @ sol

    def feasible(self, eta: np.ndarray) -> bool:
        b = self.design.bernoulli
        return bool(np.all(np.isfinite(eta))) and not np.any(eta[b] >= 0.0)

    def penalized(self, eta, sol, sigmas, phi) -> float:
        d = self.design
        ll = row_loglik(d.y, eta, d.offset, d.exposure, d.bernoulli) / phi[d.trait_idx]
        pen = 0.0
        for blk, Kinv, S in zip(self.blocks(), self.kinv, sigmas):
            u = sol[blk]
            pen += u @ (sp.kron(Kinv, np.linalg.inv(S), format="csr") @ u)
        return math.fsum(ll) - 0.5 * pen

    def mode(self, sol, sigmas, phi):
        """IRLS for (beta, u) at fixed variance parameters, with step-halving."""
        eta = self.eta(sol)
        obj = self.penalized(eta, sol, sigmas, phi)
        for it in range(self.opts.max_inner):
            w, z = self.working(eta, phi)
            C, r = self.assemble(w, z, sigmas)
            fac = factorize(C)
            new = fac.solve(r)
            step = 1.0
            for _ in range(MAX_HALVING):
                cand = sol + step * (new - sol)
                cand_eta = self.eta(cand)
                if self.feasible(cand_eta):
                    cand_obj = self.penalized(cand_eta, cand, sigmas, phi)
                    if cand_obj >= obj - 1e-10 * (1.0 + abs(obj)):
                        break
                step *= 0.5
            else:
                raise ConvergenceError("step-halving exhausted: hazard probability >= 1")
            change = np.max(np.abs(cand_eta - eta)) if eta.size else 0.0
            sol, eta, obj = cand, cand_eta, cand_obj
            if change < self.opts.inner_tol:
                return sol, it + 1
        log.warning("inner IRLS stopped after %d iterations", self.opts.max_inner)
        return sol, self.opts.max_inner

    def pearson(self, eta: np.ndarray) -> np.ndarray:
        d = self.design
        mu = self.mu(eta)
        var = np.where(d.bernoulli, mu * (1.0 - np.where(d.bernoulli, mu, 0.0)), mu)
        x2 = np.bincount(d.trait_idx, weights=(d.y - mu) ** 2 / var, minlength=self.T)
        n = np.bincount(d.trait_idx, minlength=self.T)
        cols = d.fixed_slices()
        rank = np.array([_rank(d.X, d.trait_idx == t, cols[name]) for t, name in enumerate(d.traits)])
        df = n - rank
        if np.any(df <= 0):
            raise ModelError("insufficient residual degrees of freedom")
        return x2 / df


def _rank(X: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> int:
    if cols.size == 0:
        return 0
    sub = X[np.flatnonzero(rows)][:, cols]
    return int(np.linalg.matrix_rank((sub.T @ sub).toarray()))


def _prune_zero_event_cells(table: PseudoTable) -> tuple[PseudoTable, list[tuple]]:
    d = table.data
    bs = table.baseline_stratum()
    key = d["trait"].astype(str) + "|" + bs.astype(str) + "|" + d["k"].astype(str)
    events = d["y"].groupby(key.to_numpy()).sum()
    empty = set(events.index[events == 0])
    if not empty:
        return table, []
    keep = ~key.isin(empty).to_numpy()
    dropped = sorted((t, int(s), int(k)) for t, s, k in (e.split("|") for e in empty))
    out = PseudoTable(d.loc[keep].reset_index(drop=True), table.layouts, table.covariates, table.clusters)
    return out, dropped


def random_levels(table: PseudoTable, spec: ModelSpec, pedigree: Pedigree | None):
    """Level list, K^-1 and log|K| per random component."""
    d = table.data
    levels, kinv, logdet = [], [], []
    for comp in spec.random:
        observed = sorted(d[comp.column].astype(str).unique())
        if comp.structure == "iid":
            levels.append(observed)
            kinv.append(sp.identity(len(observed), format="csc"))
            logdet.append(0.0)
            continue
        if pedigree is None:
            raise ModelError(f"component {comp.name} needs a pedigree")
        missing = [lv for lv in observed if lv not in pedigree.index]
        if missing:
            raise ModelError(f"unseen cluster level: {comp.name}={missing[0]}")
        sub = pedigree.with_ancestors(observed)
        Ainv = a_inverse(sub).full().tocsc()
        levels.append([str(i) for i in sub.ids])
        kinv.append(Ainv)
        dense_ok = Ainv.shape[0] <= 4000
        logdet.append(-np.linalg.slogdet(Ainv.toarray())[1] if dense_ok else 0.0)
    return levels, kinv, logdet


def _initial_beta(problem: _Problem) -> np.ndarray:
    d = problem.design
    beta = np.zeros(problem.p)
    X = d.X.tocsc()
    for j, (kind, _, _) in enumerate(d.fixed_names):
        if kind != "baseline":
            continue
        rows = X[:, j].indices
        events = d.y[rows].sum()
        expo = d.exposure[rows].sum()
        beta[j] = math.log(max(events, 0.5) / expo)
    return beta


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    spec: ModelSpec
    params: Params
    variance: VarianceComponents
    se: Mapping[str, np.ndarray]
    dispersion_se: Mapping[str, float]
    dispersion_fixed: Mapping[str, bool]
    pev: Mapping[str, Mapping[tuple, float]]
    converged: bool
    iterations: int
    final_change: float
    reml: float
    history: tuple = ()
    warnings: tuple = ()
    dropped_cells: tuple = ()
    n_rows: int = 0

    @property
    def traits(self) -> tuple[str, ...]:
        return self.variance.traits

    def correlations(self) -> dict[str, float | None]:
        from .genetics import genetic_correlation

        out = {}
        for comp, S in self.variance.sigma.items():
            if len(self.traits) == 2:
                try:
                    out[comp] = genetic_correlation(S)
                except ModelError:
                    out[comp] = None
        return out

    def to_dict(self) -> dict:
        traits = list(self.traits)
        fixed = []
        for (t, s, k), v in sorted(self.params.baseline.items()):
            fixed.append({"trait": t, "term": "baseline", "stratum": s, "k": k, "estimate": v})
        for t in traits:
            for name, v in self.params.beta.get(t, {}).items():
                fixed.append({"trait": t, "term": name, "stratum": None, "k": None, "estimate": v})
        comps = {}
        corr = self.correlations()
        for c in self.spec.random:
            S = np.asarray(self.variance.sigma[c.name])
            comps[c.name] = {
                "structure": c.structure,
                "genetic_scale": c.genetic_scale,
                "matrix": S.tolist(),
                "se": np.asarray(self.se[c.name]).tolist(),
                "variances": {t: float(S[i, i]) for i, t in enumerate(traits)},
                "correlation": corr.get(c.name),
            }
        return {
            "traits": traits,
            "model": self.spec.to_dict(),
            "fixed_effects": fixed,
            "variance_components": comps,
            "dispersion": {
                t: {"estimate": self.variance.dispersion[t], "se": self.dispersion_se.get(t),
                    "fixed": self.dispersion_fixed[t]}
                for t in traits
            },
            "convergence": {
                "converged": self.converged, "iterations": self.iterations,
                "final_change": self.final_change, "reml_loglik": self.reml,
                "log": list(self.history),
            },
            "warnings": list(self.warnings),
            "dropped_cells": [list(c) for c in self.dropped_cells],
            "n_rows": self.n_rows,
        }

    def write_report(self, path: str | Path, digits: int | None = None) -> None:
        d = self.to_dict()
        if digits is not None:
            d = round_sig(d, digits)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=False) + "\n")

    def write_blups(self, path: str | Path, digits: int | None = None) -> None:
        fmt = (lambda x: f"{x:.{digits}g}") if digits else repr
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component", "level", "trait", "blup", "pev"])
            for c in self.spec.random:
                eff = self.params.effects[c.name]
                pev = self.pev.get(c.name, {})
                for (level, trait), v in eff.items():
                    w.writerow([c.name, level, trait, fmt(v), fmt(pev.get((level, trait), float("nan")))])

    @classmethod
    def load(cls, report: str | Path, blups: str | Path | None = None) -> "FitResult":
        d = json.loads(Path(report).read_text())
        spec = ModelSpec.from_dict(d["model"])
        traits = tuple(d["traits"])
        baseline, beta = {}, {t: {} for t in traits}
        for f in d["fixed_effects"]:
            if f["term"] == "baseline":
                baseline[(f["trait"], int(f["stratum"]), int(f["k"]))] = float(f["estimate"])
            else:
                beta[f["trait"]][f["term"]] = float(f["estimate"])
        sigma = {n: np.array(c["matrix"], float) for n, c in d["variance_components"].items()}
        se = {n: np.array(c["se"], float) for n, c in d["variance_components"].items()}
        disp = {t: float(v["estimate"]) for t, v in d["dispersion"].items()}
        effects: dict = {c.name: {} for c in spec.random}
        pev: dict = {c.name: {} for c in spec.random}
        if blups is not None:
            with open(blups, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    effects[row["component"]][(row["level"], row["trait"])] = float(row["blup"])
                    pev[row["component"]][(row["level"], row["trait"])] = float(row["pev"])
        conv = d["convergence"]
        return cls(
            spec=spec, params=Params(baseline, beta, effects),
            variance=VarianceComponents(traits, sigma, disp), se=se,
            dispersion_se={t: v["se"] for t, v in d["dispersion"].items()},
            dispersion_fixed={t: bool(v["fixed"]) for t, v in d["dispersion"].items()},
            pev=pev, converged=bool(conv["converged"]), iterations=int(conv["iterations"]),
            final_change=float(conv["final_change"]), reml=float(conv["reml_loglik"]),
            history=tuple(conv.get("log", ())), warnings=tuple(d.get("warnings", ())),
            dropped_cells=tuple(tuple(c) for c in d.get("dropped_cells", ())), n_rows=int(d.get("n_rows", 0)),
        )


def round_sig(obj, digits: int = 6):
    """Round every float in a nested JSON-like structure to ``digits`` significant digits."""
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}") if math.isfinite(obj) else obj
    if isinstance(obj, Mapping):
        return {k: round_sig(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_sig(v, digits) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def estimate_dispersion(table: PseudoTable, spec: ModelSpec, params: Params) -> dict[str, float]:
    """Pearson X^2 / (n - rank of the trait's fixed block), per trait."""
    levels = [sorted({lv for lv, _ in params.effects.get(c.name, {})}) for c in spec.random]
    cells = {t: sorted({(s, k) for (tt, s, k) in params.baseline if tt == t}) for t in spec.trait_names}
    design = build_design(table, spec, levels=levels, cells=cells)

    beta, u = params_to_vectors(design, spec, params)
    prob = _Problem(design, spec, [], [], {}, FitOptions())
    phi = prob.pearson(design.eta(beta, u))
    for t, v in zip(design.traits, phi):
        if v == 0.0:
            log.warning("dispersion for %s is zero (perfect fit)", t)
    return dict(zip(design.traits, phi.tolist()))


class _Fitter:
    def __init__(self, table: PseudoTable, spec: ModelSpec, opts: FitOptions, pedigree: Pedigree | None):
        if len(table) == 0:
            raise ModelError("empty pseudo-table")
        self.warnings: list[str] = []
        table, dropped = _prune_zero_event_cells(table)
        for c in dropped:
            msg = f"baseline cell without events dropped: trait {c[0]}, stratum {c[1]}, interval {c[2]}"
            log.warning(msg)
            self.warnings.append(msg)
        self.dropped = dropped
        self.table = table
        self.spec = spec
        self.opts = opts
        levels, kinv, logdet = random_levels(table, spec, pedigree)
        design = build_design(table, spec, levels=levels)
        fixed_phi = {}
        for t, ts in enumerate(spec.traits):
            if opts.fix_dispersion is not None:
                fixed_phi[t] = float(opts.fix_dispersion)
            elif ts.dispersion is not None:
                fixed_phi[t] = ts.dispersion
        self.prob = _Problem(design, spec, kinv, logdet, fixed_phi, opts)

    # working-LMM quantities -------------------------------------------------

    def reml(self, w, z, sigmas, fac=None, r=None):
        prob = self.prob
        if fac is None:
            C, r = prob.assemble(w, z, sigmas)
            fac = factorize(C)
        sol = fac.solve(r)
        ypy = math.fsum(w * z * z) - float(sol @ r)
        logdet_g = sum(
            Kinv.shape[0] * np.linalg.slogdet(S)[1] + prob.T * ld
            for Kinv, S, ld in zip(prob.kinv, sigmas, prob.logdet_k)
        )
        return -0.5 * (fac.logdet + logdet_g - math.fsum(np.log(w)) + ypy), sol, fac

    def _cinv_random(self, fac: Factor) -> np.ndarray:
        n = self.prob.M.shape[1]
        p = self.prob.p
        q = n - p
        out = np.empty((n, q))
        for s in range(0, q, 512):
            e = np.zeros((n, min(512, q - s)))
            e[p + s + np.arange(e.shape[1]), np.arange(e.shape[1])] = 1.0
            out[:, s:s + e.shape[1]] = fac.solve(e)
        return out

    def ai_terms(self, w, z, sigmas, phi, with_phi=False):
        """REML score and average-information matrix for the covariance blocks."""
        prob = self.prob
        T = prob.T
        C, r = prob.assemble(w, z, sigmas)
        fac = factorize(C)
        sol = fac.solve(r)
        e = z - prob.eta(sol)  # working residual, P z = W e
        Cinv = self._cinv_random(fac)
        pairs = _sym_params(T)
        score, qs = [], []
        for blk, Kinv, S in zip(prob.blocks(), prob.kinv, sigmas):
            L = Kinv.shape[0]
            Sinv = np.linalg.inv(S)
            u = sol[blk].reshape(L, T)
            Cuu = Cinv[blk, blk.start - prob.p:blk.stop - prob.p]
            Kc = Kinv.tocoo()
            for i, j in pairs:
                E = _unit(T, i, j)
                Mk = Sinv @ E @ Sinv
                big = sp.kron(Kc, Mk, format="coo")
                tr_c = float(np.sum(Cuu[big.row, big.col] * big.data))
                quad = float(np.sum((Kinv @ u) * (u @ Mk.T)))
                score.append(-0.5 * (L * np.trace(Sinv @ E) - tr_c - quad))
                # q = Z (I kron E Sigma^-1) u
                v = (u @ (E @ Sinv).T).ravel()
                full = np.zeros(prob.M.shape[1])
                full[blk] = v
                qs.append(prob.M @ full)
        if with_phi:
            for t in range(T):
                if t in prob.fixed_phi:
                    continue
                qs.append(np.where(prob.design.trait_idx == t, e / phi[t], 0.0))
        Q = np.column_stack(qs) if qs else np.zeros((len(w), 0))
        WQ = w[:, None] * Q
        MtWQ = (prob.M.T @ WQ)
        PQ = WQ - w[:, None] * (prob.M @ fac.solve(MtWQ))
        AI = 0.5 * (Q.T @ PQ)
        return np.array(score), 0.5 * (AI + AI.T), fac, sol, Cinv

    # main loop --------------------------------------------------------------

    def run(self, init: Mapping | None = None) -> FitResult:
        prob, opts = self.prob, self.opts
        T = prob.T
        sigmas = [np.eye(T) * opts.init_variance for _ in prob.kinv]
        if init:
            sigmas = [np.array(init.get(c.name, s), float) for c, s in zip(self.spec.random, sigmas)]
        phi = np.array([prob.fixed_phi.get(t, 1.0) for t in range(T)])
        sol = np.concatenate([_initial_beta(prob), np.zeros(prob.M.shape[1] - prob.p)])
        history = []
        converged = False
        change = float("inf")
        reml_value = float("nan")
        it = 0
        pairs = _sym_params(T)
        for it in range(1, opts.max_iter + 1):
            sol, n_inner = prob.mode(sol, sigmas, phi)
            eta = prob.eta(sol)
            w, z = prob.working(eta, phi)
            theta_old = np.concatenate([[S[i, j] for i, j in pairs] for S in sigmas] + [phi])
            new_sigmas = sigmas
            if sigmas:
                score, AI, fac, sol_w, _ = self.ai_terms(w, z, sigmas, phi)
                reml_value, _, _ = self.reml(w, z, sigmas, fac=fac, r=prob.assemble(w, z, sigmas)[1])
                new_sigmas = self._ai_step(score, AI, sigmas, w, z, reml_value)
            new_phi = phi.copy()
            free = [t for t in range(T) if t not in prob.fixed_phi]
            if free:
                est = prob.pearson(eta)
                for t in free:
                    new_phi[t] = max(est[t], opts.variance_floor)
            theta_new = np.concatenate([[S[i, j] for i, j in pairs] for S in new_sigmas] + [new_phi])
            change = float(np.max(np.abs(theta_new - theta_old) / np.maximum(np.abs(theta_old), 1e-6)))
            history.append({
                "iteration": it, "inner": n_inner, "change": change, "reml": reml_value,
                "sigma": {c.name: S.tolist() for c, S in zip(self.spec.random, new_sigmas)},
                "dispersion": new_phi.tolist(),
            })
            log.info("iteration %d: change %.3e, reml %.6f", it, change, reml_value)
            sigmas, phi = new_sigmas, new_phi
            if change < opts.tol:
                converged = True
                break
        sol, _ = prob.mode(sol, sigmas, phi)
        result = self._result(sol, sigmas, phi, converged, it, change, history)
        if not converged:
            raise ConvergenceError(f"did not converge in {opts.max_iter} iterations", result)
        return result

    def _ai_step(self, score, AI, sigmas, w, z, reml_old):
        prob, opts = self.prob, self.opts
        T = prob.T
        pairs = _sym_params(T)
        try:
            delta = np.linalg.solve(AI, score)
        except np.linalg.LinAlgError:
            delta = score / np.maximum(np.diag(AI), 1e-12)
        step = 1.0
        best = sigmas
        for _ in range(12):
            cand, pinned = [], []
            pos = 0
            for c, S in zip(self.spec.random, sigmas):
                Snew = S.copy()
                for i, j in pairs:
                    Snew[i, j] = Snew[j, i] = S[i, j] + step * delta[pos]
                    pos += 1
                Snew, pin = _clip_psd(Snew, opts.variance_floor)
                cand.append(Snew)
                pinned.append((c.name, pin))
            try:
                reml_new, _, _ = self.reml(w, z, cand)
            except MMEError:
                reml_new = -np.inf
            if reml_new >= reml_old - 1e-8 * (1.0 + abs(reml_old)):
                best = cand
                for name, pin in pinned:
                    if pin:
                        log.debug("covariance block %s clipped at the floor", name)
                break
            step *= 0.5
        return best

    def _result(self, sol, sigmas, phi, converged, it, change, history) -> FitResult:
        prob = self.prob
        T = prob.T
        traits = prob.design.traits
        eta = prob.eta(sol)
        w, z = prob.working(eta, phi)
        u = [sol[blk] for blk in prob.blocks()]
        params = vectors_to_params(prob.design, self.spec, sol[:prob.p], u)
        se: dict[str, np.ndarray] = {}
        disp_se: dict[str, float | None] = {t: None for t in traits}
        pev: dict[str, dict] = {}
        reml_value = float("nan")
        if sigmas:
            _, AI, fac, _, Cinv = self.ai_terms(w, z, sigmas, phi, with_phi=True)
            reml_value, _, _ = self.reml(w, z, sigmas, fac=fac, r=prob.assemble(w, z, sigmas)[1])
            try:
                cov = np.linalg.inv(AI)
                sd = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
            except np.linalg.LinAlgError:
                sd = np.full(AI.shape[0], np.nan)
            pos = 0
            for c in self.spec.random:
                M = np.full((T, T), np.nan)
                for i, j in _sym_params(T):
                    M[i, j] = M[j, i] = sd[pos]
                    pos += 1
                se[c.name] = M
            for t in range(T):
                if t not in prob.fixed_phi:
                    disp_se[traits[t]] = float(sd[pos])
                    pos += 1
            for c, blk, lev in zip(self.spec.random, prob.blocks(), prob.design.levels):
                d = np.diag(Cinv[blk, blk.start - prob.p:blk.stop - prob.p])
                pev[c.name] = {(lv, traits[ti]): float(d[li * T + ti]) for li, lv in enumerate(lev) for ti in range(T)}
        for c, S in zip(self.spec.random, sigmas):
            if np.linalg.eigvalsh(S).min() <= self.opts.variance_floor * (1 + 1e-6):
                what = "variance" if S.shape[0] == 1 else "smallest eigenvalue of covariance"
                msg = f"{what} of {c.name} pinned at floor {self.opts.variance_floor:g}"
                log.warning(msg)
                self.warnings.append(msg)
        vc = VarianceComponents(
            tuple(traits), {c.name: S for c, S in zip(self.spec.random, sigmas)},
            {t: float(phi[i]) for i, t in enumerate(traits)},
        )
        return FitResult(
            spec=self.spec, params=params, variance=vc, se=se, dispersion_se=disp_se,
            dispersion_fixed={t: i in prob.fixed_phi for i, t in enumerate(traits)}, pev=pev,
            converged=converged, iterations=it, final_change=change, reml=reml_value,
            history=tuple(history), warnings=tuple(self.warnings), dropped_cells=tuple(self.dropped),
            n_rows=len(self.table),
        )


def fit_pql(
    table: PseudoTable,
    spec: ModelSpec,
    opts: FitOptions | None = None,
    pedigree: Pedigree | None = None,
    init: Mapping[str, np.ndarray] | None = None,
) -> FitResult:
    """Fit the model by PQL with average-information updates of the covariance blocks."""
    opts = opts or FitOptions()
    return _Fitter(table, spec, opts, pedigree).run(init)


# ---------------------------------------------------------------------------
# Curvature diagnostic
# ---------------------------------------------------------------------------


def second_difference_curvature(f: Callable[[float], float], theta: float, rel_step: float) -> float:
    """``[f(theta(1+h)) - 2 f(theta) + f(theta(1-h))] / (theta h)^2``."""
    if not 0.0 < rel_step < 0.5:
        raise ModelError("rel_step must lie in (0, 0.5)")
    if theta == 0.0:
        raise ModelError("curvature not evaluable at a zero parameter")
    h = theta * rel_step
    try:
        vals = [f(theta + h), f(theta), f(theta - h)]
    except (MMEError, ConvergenceError, ModelError, FloatingPointError) as exc:
        raise ModelError("curvature not evaluable") from exc
    if not all(math.isfinite(v) for v in vals):
        raise ModelError("curvature not evaluable")
    return (vals[0] - 2.0 * vals[1] + vals[2]) / (h * h)


def _parse_parameter(name: str, spec: ModelSpec) -> tuple[int, int, int]:
    parts = name.split(":")
    comps = [c.name for c in spec.random]
    if parts[0] not in comps:
        raise ModelError(f"unknown variance parameter: {name}")
    ci = comps.index(parts[0])
    traits = spec.trait_names
    if len(parts) == 1:
        if len(traits) != 1:
            raise ModelError(f"variance parameter {name} must name a trait")
        return ci, 0, 0
    try:
        i = traits.index(parts[1])
        j = traits.index(parts[2]) if len(parts) > 2 else i
    except ValueError:
        raise ModelError(f"unknown variance parameter: {name}") from None
    return ci, max(i, j), min(i, j)


def laplace_loglik(fitter: "_Fitter", sigmas, phi, start) -> tuple[float, np.ndarray]:
    """Laplace log quasi-likelihood with (beta, u) at their joint mode."""
    prob = fitter.prob
    sol, _ = prob.mode(start, sigmas, phi)
    eta = prob.eta(sol)
    w, z = prob.working(eta, phi)
    C, _ = prob.assemble(w, z, sigmas)
    fac = factorize(C)
    logdet_g = sum(
        Kinv.shape[0] * np.linalg.slogdet(S)[1] + prob.T * ld
        for Kinv, S, ld in zip(prob.kinv, sigmas, prob.logdet_k)
    )
    return prob.penalized(eta, sol, sigmas, phi) - 0.5 * logdet_g - 0.5 * fac.logdet, sol


def profile_curvature(
    table: PseudoTable,
    spec: ModelSpec,
    component: str,
    fit: FitResult,
    rel_step: float = 0.1,
    pedigree: Pedigree | None = None,
) -> float:
    """Second-difference curvature of the Laplace log quasi-likelihood in one variance parameter.

    ``component`` is ``name`` (univariate), ``name:trait`` or ``name:trait1:trait2``.
    The remaining covariance parameters and the dispersions stay at their fitted values.
    """
    if not 0.0 < rel_step < 0.5:
        raise ModelError("rel_step must lie in (0, 0.5)")
    fitter = _Fitter(table, spec, FitOptions(), pedigree)
    ci, i, j = _parse_parameter(component, spec)
    traits = fitter.prob.design.traits
    base = [np.asarray(fit.variance.sigma[c.name], float) for c in spec.random]
    phi = np.array([fit.variance.dispersion[t] for t in traits])
    beta, u = params_to_vectors(fitter.prob.design, spec, fit.params)
    start = np.concatenate([beta, *u])

    def f(value: float) -> float:
        sig = [S.copy() for S in base]
        sig[ci][i, j] = sig[ci][j, i] = value
        if np.linalg.eigvalsh(sig[ci]).min() <= 0:
            raise ModelError("curvature not evaluable")
        return laplace_loglik(fitter, sig, phi, start)[0]

    return second_difference_curvature(f, float(base[ci][i, j]), rel_step)
