"""Acceptance criteria 1-9, one recorded PASS/FAIL line each."""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from _report import record
from oracles import path_relationship, random_pedigree_rows
from scipy.optimize import brentq

from longhaz.cli import main
from longhaz.expand import (
    CutPoints,
    Episode,
    SurvivalRecord,
    expand_continuous,
    expand_discrete,
    make_cutpoints,
)
from longhaz.genetics import h2_cumulative, h2_hazard, variance_decomposition
from longhaz.inference import FitOptions, fit_pql, profile_curvature
from longhaz.model import (
    ExactSurvival,
    ModelSpec,
    RandomComponent,
    TraitSpec,
    build_design,
    row_loglik,
    vectors_to_params,
)
from longhaz.nonparam import cumulative_incidence, kaplan_meier
from longhaz.pedigree import Pedigree, a_inverse, additive_relationship
from longhaz.simulate import (
    ParityTruth,
    SimulationTruth,
    TraitTruth,
    parity_rates,
    simulate_parity,
    simulate_pedigree,
    simulate_survival,
    sire_model,
)

SIRE_COMPONENTS = (RandomComponent("sire", "pedigree", "sire", 4.0), RandomComponent("hy", "iid", "hy"))
QUICKSTART = Path(__file__).resolve().parent.parent / "data" / "quickstart" / "config.json"


# ---------------------------------------------------------------------------
# 1. likelihood coincidence
# ---------------------------------------------------------------------------


def _coincidence_dataset(rng, n=50, K=3):
    recs = []
    for i in range(n):
        t = float(rng.uniform(0.02, 1.0))
        x = float(rng.normal())
        recs.append(SurvivalRecord(str(i), "continuous", (Episode(0.0, t, {"x": x}),),
                                   int(rng.random() < 0.65), {"herd": f"h{i % 5}"}))
    inner = np.sort(rng.uniform(0.05, 0.95, K - 1))
    return recs, CutPoints(np.concatenate([[0.0], inner, [1.0]]), {})


def _central_gradient(terms, theta, h=1e-6):
    # difference each contribution before the exact sum, so rounding of the
    # total does not swamp the 1e-8 tolerance
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = math.fsum(np.concatenate([terms(theta + e), -terms(theta - e)])) / (2 * h)
    return g


def test_criterion_1_likelihood_coincidence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    spec = ModelSpec((TraitSpec("T", "poisson_pieces", ("x",)),), (RandomComponent("herd", "iid", "herd"),))
    worst_grad, worst_spread = 0.0, 0.0
    for _ in range(20):
        recs, cuts = _coincidence_dataset(rng)
        tab = expand_continuous(recs, cuts, traits={"T": None}, covariates=["x"], clusters=["herd"])
        design = build_design(tab, spec)
        exact = ExactSurvival(recs, cuts, spec)
        p = design.n_fixed

        def split(theta):
            return theta[:p], [theta[p:]]

        def pseudo_terms(theta):
            eta = design.eta(*split(theta))
            return row_loglik(design.y, eta, design.offset, design.exposure, design.bernoulli)

        def survival_terms(theta):
            return exact.terms(vectors_to_params(design, spec, *split(theta)))

        def pseudo(theta):
            return math.fsum(pseudo_terms(theta))

        def survival(theta):
            return exact.loglik(vectors_to_params(design, spec, *split(theta)))

        diffs = []
        for _ in range(50):
            theta = np.concatenate([rng.normal(-1.0, 0.5, p - 1), rng.normal(0.0, 0.3, 1),
                                    rng.normal(0.0, 0.3, len(design.levels[0]))])
            g_exact = _central_gradient(survival_terms, theta)
            g_pseudo = _central_gradient(pseudo_terms, theta)
            worst_grad = max(worst_grad, float(np.abs(g_exact - g_pseudo).max()))
            diffs.append(survival(theta) - pseudo(theta))
        worst_spread = max(worst_spread, max(diffs) - min(diffs))
    elapsed = time.perf_counter() - t0
    ok = worst_grad < 1e-8 and worst_spread < 1e-10 and elapsed < 10
    record(1, ok, f"max|grad diff|={worst_grad:.2e} (<1e-8), value-difference spread={worst_spread:.2e} "
                  f"(<1e-10), {elapsed:.1f}s (<10s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. poisson_approx vs bernoulli
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_poisson_vs_bernoulli():
    t0 = time.perf_counter()
    ped, recs, _ = sire_model(300, 30, hazard=0.05, periods=5, seed=0)
    est = {}
    for family in ("bernoulli", "poisson_approx"):
        tab = expand_discrete(recs, traits={"NP": None}, clusters=["sire", "hy"], family=family)
        fit = fit_pql(tab, ModelSpec((TraitSpec("NP", family),), SIRE_COMPONENTS), pedigree=ped)
        est[family] = float(fit.variance.sigma["sire"][0, 0])
    rel = abs(est["poisson_approx"] - est["bernoulli"]) / est["bernoulli"]
    elapsed = time.perf_counter() - t0
    ok = rel < 0.10 and elapsed < 300
    record(2, ok, f"sire variance bernoulli={est['bernoulli']:.4f} poisson_approx={est['poisson_approx']:.4f} "
                  f"relative gap={rel:.3f} (<0.10), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. variance-component recovery
# ---------------------------------------------------------------------------


def _recovery(fix_dispersion):
    spec = ModelSpec((TraitSpec("NP", "bernoulli"),), SIRE_COMPONENTS)
    opts = FitOptions(fix_dispersion=fix_dispersion)
    rows, pinned, slowest = [], 0, 0.0
    for seed in range(20):
        t0 = time.perf_counter()
        ped, recs, _ = sire_model(200, 25, hazard=0.08, periods=5, sigma_sire=0.06, sigma_hy=0.22, seed=seed)
        tab = expand_discrete(recs, traits={"NP": None}, clusters=["sire", "hy"])
        fit = fit_pql(tab, spec, opts, pedigree=ped)
        slowest = max(slowest, time.perf_counter() - t0)
        rows.append((fit.variance.sigma["sire"][0, 0], fit.variance.sigma["hy"][0, 0], fit.variance.dispersion["NP"]))
        pinned += any("pinned" in w for w in fit.warnings)
    return np.array(rows), pinned, slowest


@pytest.mark.slow
def test_criterion_3_variance_recovery():
    # Bernoulli responses carry no overdispersion, so phi is held at its true value 1.
    est, pinned, slowest = _recovery(1.0)
    mean = est.mean(axis=0)
    rel = np.abs(mean[:2] - [0.06, 0.22]) / [0.06, 0.22]
    ok = bool(np.all(rel < 0.20)) and pinned == 0 and slowest < 300
    record(3, ok, f"mean sire={mean[0]:.4f} (truth 0.06, rel {rel[0]:.3f}), mean hy={mean[1]:.4f} "
                  f"(truth 0.22, rel {rel[1]:.3f}), pinned={pinned}, phi fixed at 1, slowest {slowest:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_3_free_dispersion_is_reported():
    """Companion run with phi estimated; reported, not gated (see README)."""
    est, pinned, _ = _recovery(None)
    mean = est.mean(axis=0)
    print(f"criterion 3 (free phi, informational): mean sire={mean[0]:.4f} hy={mean[1]:.4f} "
          f"phi={mean[2]:.4f} pinned={pinned}")
    assert np.all(np.isfinite(mean))


# ---------------------------------------------------------------------------
# 4. relationship matrix
# ---------------------------------------------------------------------------


def test_criterion_4_relationship_matrix():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    accepted, exact_rule, oracle_err = 0, True, 0.0
    while accepted < 200:
        ped = Pedigree.from_rows(random_pedigree_rows(rng, int(rng.integers(2, 21))))
        oracle, lengths, inbred = path_relationship(ped)
        if inbred:
            continue
        accepted += 1
        A = additive_relationship(ped).toarray()
        for (i, j), paths in lengths.items():
            if paths:
                exact_rule &= A[i, j] == sum(0.5 ** r for r in paths)
        oracle_err = max(oracle_err, float(np.abs(A - oracle).max()))
    big = Pedigree.from_rows(random_pedigree_rows(np.random.default_rng(44), 500))
    resid = float(np.abs(a_inverse(big).toarray() @ additive_relationship(big).toarray() - np.eye(500)).max())
    elapsed = time.perf_counter() - t0
    ok = exact_rule and oracle_err < 1e-12 and resid < 1e-8 and elapsed < 30
    record(4, ok, f"200 pedigrees: (1/2)^r rule exact={exact_rule}, max|A-oracle|={oracle_err:.1e}; "
                  f"500 members max|AinvA-I|={resid:.1e}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. heritability formulas against the published variance rows
# ---------------------------------------------------------------------------


def test_criterion_5_heritability_consistency():
    t0 = time.perf_counter()
    # poisson-approximated discrete model: sire 0.063, herd-year 0.219, dispersion 0.653, h2 0.096 / 0.165
    lam = brentq(lambda x: h2_hazard(0.063, 0.219, 0.653, x, "poisson_approx", 4.0) - 0.096, 1e-6, 50)
    # bernoulli model: sire 0.066, herd-year 0.220, dispersion 0.978, h2 0.098
    h2_b = h2_hazard(0.066, 0.220, 0.978, lam, "bernoulli", 4.0)
    Lam = brentq(lambda x: h2_cumulative(0.063, 0.219, 0.653, x, "poisson_approx", None, 4.0) - 0.165, 1e-6, 50)
    h2_c = h2_cumulative(0.063, 0.219, 0.653, 0.618, "poisson_approx", None, 4.0)
    elapsed = time.perf_counter() - t0
    ok = (0.29 <= lam <= 0.32 and abs(lam - 0.303) < 0.005 and abs(h2_b - 0.098) <= 0.005
          and abs(Lam - 0.618) < 0.005 and abs(h2_c - 0.165) <= 0.005 and elapsed < 1)
    record(5, ok, f"lambda*={lam:.5f}, bernoulli h2_lambda(lambda*)={h2_b:.4f} (0.098+-0.005); "
                  f"Lambda*={Lam:.5f}, h2_Lambda(0.618)={h2_c:.4f} (0.165+-0.005)")
    assert ok


# ---------------------------------------------------------------------------
# 6. decomposition identity
# ---------------------------------------------------------------------------


def test_criterion_6_decomposition_identity():
    rng = np.random.default_rng(6)
    worst, negative = 0.0, 0
    families = ("poisson_pieces", "poisson_approx", "bernoulli")
    for _ in range(10_000):
        sg, se, phi = rng.uniform(0, 2, 3)
        lam = rng.uniform(1e-3, 0.999)
        Lam = rng.uniform(1e-3, 5.0)
        gamma = rng.uniform(0, Lam)
        fam = families[rng.integers(3)]
        scale = (1.0, 4.0)[rng.integers(2)]
        ph = variance_decomposition(sg, se, phi, lam, fam, "hazard", genetic_scale=scale)
        pc = variance_decomposition(sg, se, phi, Lam, fam, "cumulative", gamma=gamma, genetic_scale=scale)
        negative += min(ph) < 0 or min(pc) < 0
        worst = max(worst,
                    abs(h2_hazard(sg, se, phi, lam, fam, scale) - ph[0] / sum(ph)),
                    abs(h2_cumulative(sg, se, phi, Lam, fam, gamma, scale) - pc[0] / sum(pc)))
    ok = worst < 1e-12 and negative == 0
    record(6, ok, f"10^4 draws: max|h2 - genetic/total|={worst:.1e} (<1e-12), negative parcels={negative}")
    assert ok


# ---------------------------------------------------------------------------
# 7. curvature ordering
# ---------------------------------------------------------------------------

PARITY_CUTS = np.linspace(0.0, 150.0, 9)
PARITY_SHAPE = [2.0, 1.0, 0.6, 0.5, 0.5, 0.6, 0.8, 1.2]
PARITY_CULLING = [0.12, 0.10, 0.10, 0.11, 0.13, 0.16]


def _curvature_pair(seed):
    ped = simulate_pedigree(100, 20, seed)
    truth = ParityTruth(PARITY_CUTS, parity_rates(PARITY_CUTS, PARITY_SHAPE, PARITY_CULLING),
                        0.06, 0.22, 80, 0.35, seed=seed)
    nd, npr = simulate_parity(ped, truth)
    censored = float(np.mean([r.cause == 0 for r in nd]))
    cuts = make_cutpoints(nd, K=8, by_stratum=True)
    min_intervals = min(len(b) - 1 for b in cuts.per_stratum.values())
    t_nd = expand_continuous(nd, cuts, stratified=True, traits={"ND": None}, clusters=["sire", "hy"])
    t_np = expand_discrete(npr, traits={"NP": None}, clusters=["sire", "hy"])
    opts = FitOptions(fix_dispersion=1.0)
    out = {}
    for name, tab, family in (("CTM", t_nd, "poisson_pieces"), ("DTM", t_np, "bernoulli")):
        spec = ModelSpec((TraitSpec(name, family),), SIRE_COMPONENTS)
        tab = tab.rename_trait(tab.traits[0], name)
        fit = fit_pql(tab, spec, opts, pedigree=ped)
        out[name] = profile_curvature(tab, spec, "sire", fit, 0.1, ped)
    return censored, min_intervals, out


@pytest.mark.slow
def test_criterion_7_curvature_ordering():
    t0 = time.perf_counter()
    wins, design_ok, ratios = 0, True, []
    for seed in range(10):
        censored, min_k, curv = _curvature_pair(seed)
        design_ok &= censored >= 0.60 and min_k >= 8
        wins += abs(curv["DTM"]) > abs(curv["CTM"])
        ratios.append(abs(curv["DTM"]) / abs(curv["CTM"]))
    elapsed = time.perf_counter() - t0
    ok = wins >= 8 and design_ok and elapsed < 600
    record(7, ok, f"|DTM|>|CTM| in {wins}/10 pairs (>=8), ratios {min(ratios):.2f}-{max(ratios):.2f}, "
                  f"design (>=60% censored, >=8 intervals/stratum) ok={design_ok}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 8. nonparametric estimators
# ---------------------------------------------------------------------------


def test_criterion_8_nonparametric():
    truth = SimulationTruth((TraitTruth("NP", "discrete", [0.3] * 40),), seed=0)
    km = kaplan_meier(simulate_survival(None, truth, n=1000))
    # S(2) = 0.49 sits next to 0.5, so only about three draws in four of this
    # size give median 2; the reported share makes that visible
    rng = np.random.default_rng(8)
    hits = np.mean([np.mean(rng.geometric(0.3, 1000) > 2) <= 0.5 for _ in range(2000)])

    rng = np.random.default_rng(80)
    t = rng.exponential(3.0, 2000).round(2)
    causes = rng.choice([0, 1, 2, 3], 2000, p=[0.25, 0.3, 0.25, 0.2])
    res = cumulative_incidence(t, causes)
    sum_err = float(np.abs(sum(c.values for c in res.cif.values()) + res.survival.values - 1).max())
    single = (causes > 0).astype(int)
    one = cumulative_incidence(t, single)
    km1 = kaplan_meier(t, single)
    single_err = float(np.abs(one.cif[1].values - (1 - km1.curve.values)).max())
    ok = km.median == 2 and sum_err < 1e-12 and single_err < 1e-12
    record(8, ok, f"geometric(0.3) n=1000 KM median={km.median} (share of draws with median 2: {hits:.2f}); "
                  f"CIF sum error={sum_err:.1e}; single-cause CIF vs 1-KM={single_err:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism across thread counts
# ---------------------------------------------------------------------------


def test_criterion_9_thread_determinism(tmp_path):
    files = {}
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        code = main(["fit", "--config", str(QUICKSTART), "--out", str(out), "--threads", str(threads), "--seed", "7"])
        assert code == 0
        files[threads] = [(out / f).read_bytes() for f in ("fit_report.json", "blups.csv")]
    ok = files[1] == files[4]
    record(9, ok, "fit_report.json and blups.csv byte-identical for --threads 1 and 4" if ok
           else "outputs differ between --threads 1 and 4")
    assert ok
