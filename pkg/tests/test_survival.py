import numpy as np
import pytest
from numpy.testing import assert_allclose

from rermst.errors import DomainError
from rermst.survival import (
    Dataset,
    SubjectRecord,
    censoring_km,
    event_table,
    kaplan_meier,
    restrict,
    restrict_arrays,
    rmst,
    rmst_from_samples,
)

GRID = np.array([0.0, 0.5, 0.999, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 10.0])


def step(breaks, values, t):
    """Reference right-continuous step function: values[k] on [breaks[k-1], breaks[k])."""
    return np.array(values)[np.searchsorted(breaks, t, side="right")]


class TestRestrict:
    def test_uncensored_before_tau(self):
        assert restrict(3, None, 5) == (3, 1)

    def test_administrative(self):
        assert restrict(7, None, 5) == (5, 0)

    def test_censored_first(self):
        assert restrict(4, 2, 5) == (2, 0)

    def test_event_at_tau_counts(self):
        assert restrict(5, None, 5) == (5, 1)

    def test_negative_time(self):
        with pytest.raises(DomainError):
            restrict(-1, None, 5)

    def test_arrays_match_scalar(self):
        T = np.array([3.0, 7.0, 4.0, 1.0])
        C = np.array([np.inf, np.inf, 2.0, 1.0])
        y, d = restrict_arrays(T, C, 5.0)
        expected = [restrict(t, c, 5.0) for t, c in zip(T, C)]
        assert_allclose(y, [e[0] for e in expected])
        assert list(d) == [e[1] for e in expected]


class TestKaplanMeier:
    def test_no_censoring(self):
        S = kaplan_meier([(1, 1), (2, 1), (3, 1)])
        assert_allclose(S(GRID), step([1, 2, 3], [1, 2 / 3, 1 / 3, 0], GRID))

    def test_no_events(self):
        S = kaplan_meier([(1, 0), (2, 0)])
        assert_allclose(S(GRID), 1.0)

    def test_hand_product_limit(self):
        # risk sets 3, 2, 1: S = 2/3 after t=1, unchanged by the censoring at 2, 0 at 3
        S = kaplan_meier([(1, 1), (2, 0), (3, 1)])
        assert_allclose(S(GRID), step([1, 3], [1, 2 / 3, 0], GRID))

    def test_array_input_matches_pairs(self):
        S1 = kaplan_meier(np.array([1.0, 2.0, 3.0]), np.array([1, 0, 1]))
        S2 = kaplan_meier([(1, 1), (2, 0), (3, 1)])
        assert_allclose(S1.jump_times, S2.jump_times)
        assert_allclose(S1.values, S2.values)

    def test_ties_events_before_censorings(self):
        # at t=2 one event and one censoring with 4 at risk: factor 3/4
        S = kaplan_meier([(1, 1), (2, 1), (2, 0), (3, 1), (4, 0)])
        assert_allclose(S(2.0), (4 / 5) * (3 / 4))
        assert_allclose(S(3.0), (4 / 5) * (3 / 4) * (1 / 2))

    def test_left_limit(self):
        S = kaplan_meier([(1, 1), (2, 1), (3, 1)])
        assert_allclose(S.left_limit(np.array([1.0, 2.0, 3.0])), [1, 2 / 3, 1 / 3])

    def test_empty(self):
        with pytest.raises(DomainError):
            kaplan_meier([])

    def test_event_table(self):
        times, at_risk, d, c = event_table([1, 2, 2, 3], [1, 1, 0, 0])
        assert_allclose(times, [1, 2, 3])
        assert list(at_risk) == [4, 3, 1]
        assert list(d) == [1, 1, 0]
        assert list(c) == [0, 1, 1]


class TestCensoringKM:
    def test_no_censoring(self):
        assert_allclose(censoring_km([(1, 1), (2, 1)])(GRID), 1.0)

    def test_role_swap(self):
        G = censoring_km([(1, 0), (2, 0)])
        assert_allclose(G(GRID), step([1, 2], [1, 0.5, 0], GRID))

    def test_hand_product_limit(self):
        G = censoring_km([(1, 1), (2, 0), (3, 1)])
        assert_allclose(G(GRID), step([2], [1, 0.5], GRID))

    def test_tie_uses_risk_set_after_events(self):
        # at t=2: 4 at risk, the event leaves first, so the censoring factor is 1 - 1/3
        G = censoring_km([(1, 1), (2, 1), (2, 0), (3, 1), (4, 0)])
        assert_allclose(G(2.0), 2 / 3)

    def test_symmetry_without_ties(self):
        rng = np.random.default_rng(5)
        y = rng.permutation(np.arange(1, 31, dtype=float))
        d = rng.integers(0, 2, 30)
        assert_allclose(censoring_km(y, d)(GRID * 3), kaplan_meier(y, 1 - d)(GRID * 3))


class TestRmst:
    def test_no_deaths(self):
        assert rmst(kaplan_meier([(1, 0), (2, 0)]), 5) == 5

    def test_hand_integration(self):
        assert_allclose(rmst(kaplan_meier([(1, 1), (2, 0), (3, 1)]), 3), 7 / 3, rtol=1e-15)

    def test_zero_horizon(self):
        assert rmst(kaplan_meier([(1, 1), (2, 0), (3, 1)]), 0) == 0

    def test_carry_forward_past_last_time(self):
        # S = 2/3 from t=1 onward
        assert_allclose(rmst(kaplan_meier([(1, 1), (2, 0), (3, 0)]), 5), 1 + 4 * 2 / 3)

    def test_uncensored_equals_mean_of_restricted(self):
        rng = np.random.default_rng(2)
        y = rng.exponential(3.0, 500)
        tau = 4.0
        assert_allclose(rmst_from_samples(y, np.ones(500, int), tau),
                        np.minimum(y, tau).mean(), rtol=1e-12)


class TestDataset:
    def make(self):
        recs = [
            SubjectRecord(2, 1.0, 1, 0),
            SubjectRecord(1, 2.0, 0, 1),
            SubjectRecord(2, 3.0, 1, 1),
        ]
        return Dataset.from_records(recs, tau=5.0)

    def test_sizes(self):
        data = self.make()
        assert data.cluster_sizes == {1: 1, 2: 2}
        assert len(data) == 3

    def test_records_round_trip(self):
        data = self.make()
        again = Dataset.from_records(data.records, tau=5.0)
        assert again.records == data.records

    def test_design(self):
        assert_allclose(self.make().design(), [[1, 0], [1, 1], [1, 1]])

    def test_rejects_time_past_tau(self):
        with pytest.raises(DomainError):
            Dataset.from_records([SubjectRecord(1, 6.0, 1, 0)], tau=5.0)

    def test_rejects_bad_event(self):
        with pytest.raises(DomainError):
            Dataset.from_records([SubjectRecord(1, 1.0, 2, 0)], tau=5.0)

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(DomainError):
            Dataset.from_records([SubjectRecord(1, 0.0, 0, 0)], tau=0.0)
