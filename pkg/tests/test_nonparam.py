import math

import numpy as np
import pytest

from longhaz.expand import Episode, SurvivalRecord
from longhaz.nonparam import (
    StepCurve,
    cumulative_incidence,
    kaplan_meier,
    log_cumhaz_stratified,
    nelson_aalen,
    stratum_times,
    write_curves,
)


def test_four_deaths():
    km = kaplan_meier([1, 2, 3, 4], [1, 1, 1, 1])
    np.testing.assert_array_equal(km.curve.values, [0.75, 0.5, 0.25, 0.0])
    assert km.median == 2


def test_all_censored():
    km = kaplan_meier([1, 2, 3], [0, 0, 0])
    assert km.median is None and km.events == 0
    assert km.curve.at(10) == 1.0


def test_geometric_median():
    # S(2) = 0.49 sits close to 0.5, so a given draw shows median 3 about a quarter of the time
    rng = np.random.default_rng(1)
    t = rng.geometric(0.3, 1000)
    assert kaplan_meier(t, np.ones_like(t)).median == 2


def test_no_censoring_equals_empirical_survival():
    rng = np.random.default_rng(1)
    t = rng.exponential(3.0, 200).round(1)
    km = kaplan_meier(t, np.ones_like(t))
    emp = np.array([(t > s).mean() for s in km.curve.times])
    np.testing.assert_allclose(km.curve.values, emp, atol=1e-12)


def test_ties_events_before_censoring():
    km = kaplan_meier([2, 2, 3], [1, 0, 1])
    # the censoring at 2 is still at risk at 2
    assert km.curve.values[0] == pytest.approx(2 / 3)
    assert km.curve.values[1] == 0.0


def test_median_ci_brackets_median():
    rng = np.random.default_rng(2)
    t = rng.exponential(10.0, 400)
    e = (rng.random(400) < 0.7).astype(int)
    km = kaplan_meier(t, e)
    lo, hi = km.median_ci
    assert lo <= km.median <= hi
    assert np.all(km.curve.lower <= km.curve.values + 1e-15)
    assert np.all(km.curve.values <= km.curve.upper + 1e-15)


def test_nelson_aalen_single_jump():
    t = [5.0] + [10.0] * 9
    e = [1] + [0] * 9
    na = nelson_aalen(t, e)
    assert na.values[0] == pytest.approx(0.1)
    curves = log_cumhaz_stratified([SurvivalRecord.continuous(str(i), ti, ei, stratum=1)
                                    for i, (ti, ei) in enumerate(zip(t, e))])
    assert curves[1].values[0] == pytest.approx(-2.302585, abs=1e-6)


def test_nelson_aalen_close_to_minus_log_km():
    rng = np.random.default_rng(3)
    t = rng.exponential(5.0, 500)
    e = (rng.random(500) < 0.8).astype(int)
    na, km = nelson_aalen(t, e), kaplan_meier(t, e)
    keep = km.curve.values > 0
    diff = np.abs(na.values[keep] + np.log(km.curve.values[keep]))
    n_at = np.array([(t >= s).sum() for s in na.times[keep]])
    assert diff.max() < na.values[keep][-1] ** 2 / n_at.min()


def _stratified_exponential(n, rates, seed):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        eps, start, cause = [], 0.0, 0
        for s, lam in enumerate(rates, start=1):
            x = rng.exponential(1 / lam)
            if x < 20.0:
                eps.append(Episode(start, start + x, {}, s))
                cause = 1
                break
            eps.append(Episode(start, start + 20.0, {}, s))
            start += 20.0
        recs.append(SurvivalRecord(str(i), "continuous", tuple(eps), cause))
    return recs


def test_constant_hazard_log_curve_has_unit_slope():
    recs = _stratified_exponential(4000, [0.05], seed=4)
    c = log_cumhaz_stratified(recs)[1]
    sel = (c.times > 2) & (c.times < 15)
    slope, icpt = np.polyfit(np.log(c.times[sel]), c.values[sel], 1)
    assert slope == pytest.approx(1.0, abs=0.05)
    assert icpt == pytest.approx(math.log(0.05), abs=0.1)


def test_proportional_strata_are_parallel():
    recs = _stratified_exponential(20000, [0.02, 0.04], seed=5)
    per = stratum_times(recs)
    assert set(per) == {1, 2}
    c = log_cumhaz_stratified(recs)
    grid = np.linspace(5, 18, 8)
    gap = c[2].at(grid) - c[1].at(grid)
    assert np.all(np.abs(gap - math.log(2)) < 0.15)


def test_empty_stratum_curve():
    recs = [SurvivalRecord.continuous("a", 3.0, 0, stratum=1)]
    assert len(log_cumhaz_stratified(recs, strata=[1, 2])[2]) == 0


def test_cif_identities():
    rng = np.random.default_rng(6)
    n = 600
    t = rng.exponential(4.0, n).round(1)
    c = rng.choice([0, 1, 2], n, p=[0.3, 0.35, 0.35])
    res = cumulative_incidence(t, c)
    total = res.cif[1].values + res.cif[2].values + res.survival.values
    assert np.max(np.abs(total - 1.0)) < 1e-12
    for cur in res.cif.values():
        assert np.all(np.diff(cur.values) >= 0) and cur.values[-1] <= 1


def test_single_cause_cif_is_one_minus_km():
    rng = np.random.default_rng(7)
    t = rng.exponential(4.0, 300)
    e = (rng.random(300) < 0.6).astype(int)
    res = cumulative_incidence(t, e)
    km = kaplan_meier(t, e)
    assert np.max(np.abs(res.cif[1].values - (1 - km.curve.values))) < 1e-12


def test_missing_cause_is_zero():
    res = cumulative_incidence([1, 2, 3], [1, 1, 0], labels=[1, 2])
    assert np.all(res.cif[2].values == 0)


def test_symmetric_competing_exponentials():
    rng = np.random.default_rng(8)
    a, b = rng.exponential(1.0, 20000), rng.exponential(1.0, 20000)
    t = np.minimum(a, b)
    res = cumulative_incidence(t, np.where(a < b, 1, 2))
    assert res.cif[1].values[-1] == pytest.approx(0.5, abs=0.015)
    assert res.cif[2].values[-1] == pytest.approx(0.5, abs=0.015)


def test_step_curve_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        StepCurve(np.array([2.0, 1.0]), np.array([0.5, 0.4]))
    km = kaplan_meier([1, 2], [1, 0])
    write_curves({"all": km.curve}, tmp_path / "c.csv", key="stratum")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "stratum,time,value,lower,upper"
    assert lines[1].startswith("all,1,0.5,")
