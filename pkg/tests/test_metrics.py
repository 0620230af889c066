import numpy as np
import pytest

from hnsurv.errors import EmptyCohort, NoComparablePairs
from hnsurv.metrics import CohortOutcome, ctd_index, harrell_c, kaplan_meier
from hnsurv.survival import TimeGrid, build_grid

from oracles import ctd_pairs, harrell_pairs


def cohort(rng, n):
    # integer times so outcome ties occur
    time = rng.integers(1, max(3, n // 3), size=n).astype(float)
    event = rng.uniform(size=n) < 0.6
    event[0] = True
    time[1] = time[0] + 1
    return CohortOutcome(time, event)


def curves(rng, n, p, coarse=False):
    h = rng.uniform(0.05, 0.5, size=(n, p))
    if coarse:
        h = np.round(h, 1)
    return np.cumprod(1 - h, axis=1)


class TestCtd:
    def test_perfect_order(self):
        time = np.arange(1.0, 6.0)
        out = CohortOutcome(time, np.ones(5, bool))
        grid = TimeGrid(tuple(time))
        S = np.tile(time.reshape(5, 1), (1, 5)) / 10.0
        assert ctd_index(S, out, grid) == 1.0

    def test_identical_curves(self):
        out = CohortOutcome([1.0, 2.0, 3.0, 4.0], [1, 1, 0, 1])
        S = np.tile([0.9, 0.5], (4, 1))
        assert ctd_index(S, out, TimeGrid((2.0, 4.0))) == 0.5

    @pytest.mark.parametrize("n", [10, 100, 200, 500])
    def test_vs_pair_oracle(self, n):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            out = cohort(rng, n)
            u = np.unique(out.time)
            grid = TimeGrid(tuple(u[np.linspace(0, u.size - 1, min(5, u.size)).astype(int)]))
            S = curves(rng, n, grid.p, coarse=seed % 2 == 0)
            assert ctd_index(S, out, grid) == ctd_pairs(S, out.time, out.event, grid.edges)

    def test_no_pairs(self):
        out = CohortOutcome([1.0, 2.0], [0, 0])
        with pytest.raises(NoComparablePairs):
            ctd_index(np.ones((2, 1)), out, TimeGrid((2.0,)))

    def test_time_ties_excluded(self):
        out = CohortOutcome([2.0, 2.0], [1, 1])
        with pytest.raises(NoComparablePairs):
            ctd_index(np.array([[0.1], [0.9]]), out, TimeGrid((2.0,)))

    def test_monotone_transform_invariant(self):
        rng = np.random.default_rng(11)
        out = cohort(rng, 60)
        grid = build_grid(out.time, 4)
        S = curves(rng, 60, 4)
        assert ctd_index(S, out, grid) == ctd_index(S ** 3 * 0.5, out, grid)


class TestHarrell:
    def test_negated_time(self):
        t = np.array([3.0, 1.0, 4.0, 1.5, 9.0])
        assert harrell_c(-t, CohortOutcome(t, np.ones(5, bool))) == 1.0

    def test_constant(self):
        t = np.array([3.0, 1.0, 4.0, 1.5, 9.0])
        assert harrell_c(np.zeros(5), CohortOutcome(t, [1, 0, 1, 1, 0])) == 0.5

    @pytest.mark.parametrize("n", [10, 100, 500])
    def test_vs_pair_oracle(self, n):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            out = cohort(rng, n)
            r = rng.integers(0, 5, size=n).astype(float) if seed % 2 else rng.normal(size=n)
            assert harrell_c(r, out) == harrell_pairs(r, out.time, out.event)

    def test_antisymmetry(self):
        rng = np.random.default_rng(7)
        out = cohort(rng, 80)
        r = rng.normal(size=80)
        assert harrell_c(-r, out) == pytest.approx(1 - harrell_c(r, out), abs=1e-15)

    def test_scale_invariance(self):
        rng = np.random.default_rng(8)
        out = cohort(rng, 80)
        r = rng.normal(size=80)
        assert harrell_c(np.exp(r) * 3 + 1, out) == harrell_c(r, out)

    def test_no_pairs(self):
        with pytest.raises(NoComparablePairs):
            harrell_c([1.0, 2.0], CohortOutcome([1.0, 2.0], [0, 0]))


class TestKaplanMeier:
    def test_all_censored(self):
        km = kaplan_meier(CohortOutcome([1.0, 2.0, 3.0], [0, 0, 0]))
        assert km.survival.tolist() == [1.0]
        assert km.at(100.0) == 1.0

    def test_hand_example(self):
        km = kaplan_meier(CohortOutcome([1, 2, 3, 4, 5], [1, 0, 1, 0, 1]))
        assert km.time.tolist() == [0.0, 1.0, 3.0, 5.0]
        assert km.at(0.5) == 1.0
        assert km.at(1.0) == pytest.approx(0.8, abs=1e-15)
        assert km.at(3.5) == pytest.approx(0.8 * 2 / 3, abs=1e-15)
        assert km.at(5.0) == 0.0

    def test_uncensored_empirical(self):
        n = 7
        km = kaplan_meier(CohortOutcome(np.arange(1.0, n + 1), np.ones(n, bool)))
        for k in range(1, n + 1):
            assert km.at(float(k)) == pytest.approx((n - k) / n, abs=1e-12)

    def test_non_increasing(self):
        rng = np.random.default_rng(9)
        km = kaplan_meier(cohort(rng, 200))
        assert km.survival[0] == 1.0
        assert (np.diff(km.survival) <= 0).all()
        assert ((km.survival >= 0) & (km.survival <= 1)).all()

    def test_empty(self):
        with pytest.raises(EmptyCohort):
            kaplan_meier(CohortOutcome([], []))


def test_outcome_validation():
    with pytest.raises(ValueError):
        CohortOutcome([1.0, np.inf], [1, 0])
    with pytest.raises(ValueError):
        CohortOutcome([0.0], [1])
