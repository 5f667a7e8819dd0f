import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longhaz.errors import ExpansionError
from longhaz.expand import (
    CutPoints,
    Episode,
    SurvivalRecord,
    check_poisson_conditions,
    expand_continuous,
    expand_discrete,
    make_cutpoints,
    read_records,
    stack,
    write_records,
)


def overlap_oracle(a, b, bounds):
    """Exposure per interval by clipping, independent of the row walk."""
    lo, hi = np.asarray(bounds[:-1]), np.asarray(bounds[1:])
    return np.clip(b, lo, hi) - np.clip(a, lo, hi)


class TestCutPoints:
    def test_quantile_median(self):
        recs = [SurvivalRecord.continuous(i, t, 1) for i, t in enumerate([10, 20, 30, 40])]
        cuts = make_cutpoints(recs, K=2)
        np.testing.assert_array_equal(cuts.boundaries, [0, 25, 40])

    def test_single_interval(self):
        recs = [SurvivalRecord.continuous(i, t, 1) for i, t in enumerate([3.0, 7.0, 9.0])]
        cuts = make_cutpoints(recs, K=1)
        np.testing.assert_array_equal(cuts.boundaries, [0, 9.0])

    def test_last_boundary_covers_censored(self):
        recs = [SurvivalRecord.continuous(0, 5.0, 1), SurvivalRecord.continuous(1, 12.0, 0)]
        assert make_cutpoints(recs, K=3).boundaries[-1] == 12.0

    def test_invalid_explicit(self):
        with pytest.raises(ExpansionError, match="invalid cut points"):
            make_cutpoints([], strategy="explicit", explicit=[0, 50, 30])

    def test_no_events(self):
        with pytest.raises(ExpansionError, match="no events for quantile cut points"):
            make_cutpoints([SurvivalRecord.continuous(0, 5.0, 0)], K=2)

    def test_dedup(self):
        recs = [SurvivalRecord.continuous(i, 10.0, 1) for i in range(5)]
        np.testing.assert_array_equal(make_cutpoints(recs, K=4).boundaries, [0, 10.0])


class TestContinuous:
    cuts = CutPoints(np.array([0.0, 50.0, 150.0]))

    def test_death_split(self):
        d = expand_continuous([SurvivalRecord.continuous("a", 100, 1)], self.cuts).data
        assert d["k"].tolist() == [1, 2]
        np.testing.assert_allclose(d["exposure"], [50, 50])
        np.testing.assert_allclose(d["offset"], np.log([50, 50]))
        assert d["y"].tolist() == [0, 1]

    def test_censored_on_boundary(self):
        d = expand_continuous([SurvivalRecord.continuous("a", 50, 0)], self.cuts, traits={"1": 1}).data
        assert d["k"].tolist() == [1]
        assert d["exposure"].tolist() == [50.0] and d["y"].tolist() == [0]

    def test_event_on_boundary_keeps_exposure(self):
        d = expand_continuous([SurvivalRecord.continuous("a", 50, 1)], self.cuts).data
        assert d["k"].tolist() == [1] and d["y"].tolist() == [1]

    def test_stratified_clock_restart(self):
        rec = SurvivalRecord(
            "a", "continuous", (Episode(0, 160, {}, 1), Episode(160, 200, {}, 2)), cause=1
        )
        cuts = CutPoints(np.array([0, 150, 365.0]), {1: np.array([0, 150, 365.0]), 2: np.array([0, 150, 365.0])})
        d = expand_continuous([rec], cuts, stratified=True).data
        assert d[["stratum", "k"]].values.tolist() == [[1, 1], [1, 2], [2, 1]]
        np.testing.assert_allclose(d["exposure"], [150, 10, 40])
        assert d["y"].tolist() == [0, 0, 1]
        # clipping oracle on stratum-local clocks
        s1 = overlap_oracle(0, 160, cuts.for_stratum(1))
        s2 = overlap_oracle(0, 40, cuts.for_stratum(2))
        np.testing.assert_allclose(d["exposure"], np.concatenate([s1[s1 > 0], s2[s2 > 0]]))

    def test_time_exceeds(self):
        with pytest.raises(ExpansionError, match="time exceeds cut points"):
            expand_continuous([SurvivalRecord.continuous("a", 151, 0)], self.cuts)

    def test_event_at_zero(self):
        with pytest.raises(ExpansionError, match="event at time zero"):
            expand_continuous([SurvivalRecord.continuous("a", 0, 1)], self.cuts)

    def test_competing_causes(self):
        recs = [SurvivalRecord.continuous("a", 100, 2), SurvivalRecord.continuous("b", 20, 1)]
        tab = expand_continuous(recs, self.cuts, traits={"c1": 1, "c2": 2})
        d = tab.data
        assert set(tab.traits) == {"c1", "c2"}
        assert d[d.trait == "c1"]["y"].sum() == 1 and d[d.trait == "c2"]["y"].sum() == 1
        assert d[(d.trait == "c2") & (d.id == "a")]["y"].tolist() == [0, 1]

    def test_covariates_and_clusters(self):
        rec = SurvivalRecord(
            "a", "continuous", (Episode(0, 30, {"x": 1.0}), Episode(30, 100, {"x": 2.0})), 1, {"sire": "s1"}
        )
        d = expand_continuous([rec], self.cuts, covariates=["x"], clusters=["sire"]).data
        assert d["x"].tolist() == [1.0, 2.0, 2.0]
        np.testing.assert_allclose(d["exposure"], [30, 20, 50])
        assert (d["sire"] == "s1").all()
        with pytest.raises(ExpansionError, match="column not found"):
            expand_continuous([rec], self.cuts, covariates=["z"])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(0.01, 99.0), st.integers(0, 2)), min_size=1, max_size=25
        ),
        st.lists(st.floats(0.5, 99.0), min_size=0, max_size=6, unique=True),
    )
    def test_invariants(self, recs, inner):
        bnd = np.unique(np.concatenate([[0.0], inner, [100.0]]))
        records = [SurvivalRecord.continuous(i, t, c) for i, (t, c) in enumerate(recs)]
        tab = expand_continuous(records, CutPoints(bnd), traits={"1": 1, "2": 2})
        d = tab.data
        for trait, cause in (("1", 1), ("2", 2)):
            sub = d[d.trait == trait]
            # exposure conserved per individual
            tot = sub.groupby("id")["exposure"].sum()
            for i, (t, _) in enumerate(recs):
                assert math.isclose(tot[str(i)], t, rel_tol=1e-12, abs_tol=1e-12)
                np.testing.assert_allclose(
                    sub[sub.id == str(i)]["exposure"].to_numpy(),
                    [v for v in overlap_oracle(0, t, bnd) if v > 0],
                    rtol=1e-12, atol=1e-12,
                )
            assert sub["y"].sum() == sum(1 for _, c in recs if c == cause)
            # at most one event per individual, on its last row
            for _, g in sub.groupby("id"):
                assert g["y"].sum() <= 1
                assert g["y"].iloc[:-1].sum() == 0
            assert (sub["exposure"] > 0).all()


class TestDiscrete:
    def test_died(self):
        d = expand_discrete([SurvivalRecord.discrete("a", 3, 1)]).data
        assert d["y"].tolist() == [0, 0, 1] and d["k"].tolist() == [1, 2, 3]
        assert d["offset"].isna().all()

    def test_censored(self):
        d = expand_discrete([SurvivalRecord.discrete("a", 2, 0)], traits={"1": 1}).data
        assert d["y"].tolist() == [0, 0]

    def test_competing(self):
        tab = expand_discrete([SurvivalRecord.discrete("a", 2, 2)], traits={"c1": 1, "c2": 2})
        d = tab.data
        assert d[d.trait == "c1"]["y"].tolist() == [0, 0]
        assert d[d.trait == "c2"]["y"].tolist() == [0, 1]

    def test_event_at_zero(self):
        with pytest.raises(ExpansionError, match="event at time zero"):
            expand_discrete([SurvivalRecord.discrete("a", 0, 1)])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=1, max_size=30))
    def test_row_count(self, spec):
        recs = [SurvivalRecord.discrete(i, t, c if t > 0 else 0) for i, (t, c) in enumerate(spec)]
        d = expand_discrete(recs, traits={"1": 1}).data
        assert len(d) == sum(t for t, _ in spec)
        assert d["y"].sum() == sum(1 for t, c in spec if t > 0 and c == 1)

    def test_time_varying_covariate(self):
        rec = SurvivalRecord("a", "discrete", (Episode(0, 2, {"x": 0.0}), Episode(2, 3, {"x": 1.0})), 1)
        d = expand_discrete([rec], covariates=["x"]).data
        assert d["x"].tolist() == [0.0, 0.0, 1.0]


class TestPoissonConditions:
    def _table(self, n, T):
        return expand_discrete([SurvivalRecord.discrete(i, T, 0) for i in range(n)], traits={"1": 1})

    def test_pass(self):
        tab = self._table(1000, 3)
        rep = check_poisson_conditions(tab, np.full(len(tab), 0.01))
        assert rep.ok and rep.max_hazard == 0.01 and rep.min_risk_set == 1000

    def test_large_hazard(self):
        tab = self._table(1000, 3)
        p = np.full(len(tab), 0.01)
        p[5] = 0.6
        rep = check_poisson_conditions(tab, p)
        assert not rep.ok and any("hazard probability large" in w for w in rep.warnings)

    def test_small_risk_set(self):
        recs = [SurvivalRecord.discrete(i, 3 if i < 5 else 2, 0) for i in range(1000)]
        tab = expand_discrete(recs, traits={"1": 1})
        rep = check_poisson_conditions(tab, np.full(len(tab), 0.01))
        assert rep.min_risk_set == 5
        assert any("small risk set" in w for w in rep.warnings)


class TestIO:
    def test_roundtrip_continuous(self, tmp_path):
        recs = [
            SurvivalRecord("a", "continuous", (Episode(0, 30, {"x": 1.5}, 1), Episode(30, 75.5, {"x": 2.0}, 2)), 1,
                           {"sire": "s1"}),
            SurvivalRecord.continuous("b", 12, 0, {"x": 0.0}, {"sire": "s2"}, 1),
        ]
        p = tmp_path / "r.csv"
        write_records(recs, p, ["x"], ["sire"])
        back = read_records(p, "continuous", ["x"], ["sire"])
        assert back == recs

    def test_roundtrip_discrete(self, tmp_path):
        recs = [SurvivalRecord.discrete("a", 3, 1, {"x": 1.0}, {"hy": "h1"})]
        p = tmp_path / "r.csv"
        write_records(recs, p, ["x"], ["hy"])
        assert read_records(p, "discrete", ["x"], ["hy"]) == recs

    def test_missing_column(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("id,time,cause\na,1,1\n")
        with pytest.raises(ExpansionError, match="column not found"):
            read_records(p, "discrete", ["parity"])

    def test_pseudo_export(self, tmp_path):
        tab = stack(
            expand_discrete([SurvivalRecord.discrete("a", 2, 1)], traits={"NP": None}),
            expand_continuous([SurvivalRecord.continuous("a", 100, 1)], CutPoints(np.array([0, 50, 150.0])),
                              traits={"ND": None}),
        )
        p = tmp_path / "pseudo.csv"
        tab.to_csv(p)
        lines = p.read_text().splitlines()
        assert lines[0] == "id,cause,k,stratum,y,offset,trait"
        assert lines[1] == "a,any,1,0,0,,NP"
        assert lines[3].startswith("a,any,1,0,0,3.91") and lines[3].endswith(",ND")
