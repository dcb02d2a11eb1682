import numpy as np
import pytest
from numpy.testing import assert_allclose

from rermst.errors import PositivityError, SingularDesignError
from rermst.ipcw import (
    fit_weighted,
    ipcw_fit_all,
    ipcw_fit_arrays,
    ipcw_fit_cluster,
    ipcw_weights,
    known_restricted_time,
)
from rermst.survival import Dataset, SubjectRecord, censoring_km

TAU = 5.0


def cluster_data(seed, n=200, censor=0.3):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, 2, n).astype(float)
    T = rng.exponential(np.exp(1 + 0.5 * g))
    C = np.where(rng.random(n) < censor, rng.uniform(0, TAU, n), np.inf)
    y = np.minimum(np.minimum(T, C), TAU)
    delta = (T <= np.minimum(C, TAU)).astype(int)
    X = np.column_stack([np.ones(n), g])
    return y, delta, X


class TestWeights:
    def test_known_indicator(self):
        assert list(known_restricted_time([1.0, 2.0, 5.0, 5.0], [1, 0, 0, 1], TAU)) == [1, 0, 1, 1]

    def test_no_censoring(self):
        y, delta, _ = cluster_data(0, censor=0.0)
        w, known = ipcw_weights(y, delta, TAU)
        assert known.all()
        assert_allclose(w, 1.0)

    def test_validity(self):
        y, delta, _ = cluster_data(1)
        w, known = ipcw_weights(y, delta, TAU)
        assert np.all(w[known == 1] >= 1.0)
        assert np.all(w[known == 0] == 0.0)

    def test_left_limit(self):
        # censoring at 2; the event at 3 sees G(3-) = 1/2, the survivor at tau too
        y = np.array([1.0, 2.0, 3.0, 5.0])
        d = np.array([1, 0, 1, 0])
        w, _ = ipcw_weights(y, d, TAU)
        G = censoring_km(y, d)
        assert_allclose(w, [1.0, 0.0, 1 / G.left_limit(3.0), 1 / G.left_limit(5.0)])
        assert_allclose(w, [1.0, 0.0, 1.5, 1.5])

    def test_left_limit_never_zero_for_known(self):
        # G(y-) = 0 would need everyone still at risk censored before y
        for seed in range(20):
            y, delta, _ = cluster_data(seed, n=30, censor=0.9)
            G = censoring_km(y, delta)
            known = known_restricted_time(y, delta, TAU) == 1
            assert np.all(G.left_limit(y[known]) > 0)

    def test_positivity(self, monkeypatch):
        import rermst.ipcw as mod

        y = np.array([1.0, 3.0, 4.0])
        d = np.array([1, 0, 1])
        G = censoring_km(y, d)
        zeroed = type(G)(G.jump_times, np.zeros_like(G.values))
        monkeypatch.setattr(mod, "censoring_km", lambda *a: zeroed)
        with pytest.raises(PositivityError, match="subject 2"):
            ipcw_weights(y, d, TAU)


class TestFit:
    def test_ols_without_censoring(self):
        y, delta, X = cluster_data(2, censor=0.0)
        fit = ipcw_fit_arrays(y, delta, X, TAU)
        assert_allclose(fit.beta, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-8)
        assert np.all(fit.se > 0)
        assert fit.n_events + fit.n_censored == fit.n

    def test_equation_residual(self):
        y, delta, X = cluster_data(3)
        for link in ("identity", "log"):
            assert ipcw_fit_arrays(y, delta, X, TAU, link).residual_norm < 1e-8

    def test_duplication(self):
        y, delta, X = cluster_data(4)
        fit = ipcw_fit_arrays(y, delta, X, TAU)
        twice = ipcw_fit_arrays(np.tile(y, 2), np.tile(delta, 2), np.tile(X, (2, 1)), TAU)
        assert_allclose(twice.beta, fit.beta, atol=1e-8)

    def test_sandwich(self):
        y, delta, X = cluster_data(5)
        w, _ = ipcw_weights(y, delta, TAU)
        beta, se, _ = fit_weighted(y, X, w)
        r = y - X @ beta
        bread = np.linalg.inv((X * w[:, None]).T @ X)
        meat = (X * ((w * r) ** 2)[:, None]).T @ X
        assert_allclose(se, np.sqrt(np.diag(bread @ meat @ bread)), rtol=1e-10)

    def test_log_link_ratio(self):
        y, delta, X = cluster_data(6, n=4000, censor=0.0)
        fit = ipcw_fit_arrays(y, delta, X, TAU, "log")
        m0, m1 = y[X[:, 1] == 0].mean(), y[X[:, 1] == 1].mean()
        assert_allclose(fit.beta, [np.log(m0), np.log(m1 / m0)], rtol=1e-10)

    def test_all_censored(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        X = np.column_stack([np.ones(4), [0, 1, 0, 1]])
        with pytest.raises((PositivityError, SingularDesignError)):
            ipcw_fit_arrays(y, np.zeros(4, int), X, TAU)

    def test_rank_deficient(self):
        y, delta, X = cluster_data(7)
        X[:, 1] = 0.0
        with pytest.raises(SingularDesignError):
            ipcw_fit_arrays(y, delta, X, TAU)


class TestClusters:
    def make(self):
        recs = []
        for c in (1, 2, 3):
            y, d, X = cluster_data(10 + c, n=60)
            recs += [SubjectRecord(c, yy, int(dd), xx[1]) for yy, dd, xx in zip(y, d, X)]
        return Dataset.from_records(recs, TAU)

    def test_records_and_dataset_agree(self):
        data = self.make()
        sub = data.subset(data.cluster == 2)
        a = ipcw_fit_cluster(sub)
        b = ipcw_fit_cluster(sub.records, TAU)
        assert a.cluster_id == b.cluster_id == 2
        assert_allclose(a.beta, b.beta)

    def test_failure_recorded(self):
        data = self.make()
        recs = data.records + [SubjectRecord(4, 1.0, 0, 0), SubjectRecord(4, 2.0, 0, 1),
                               SubjectRecord(4, 3.0, 0, 0), SubjectRecord(4, 4.0, 0, 1)]
        fits, failures = ipcw_fit_all(Dataset.from_records(recs, TAU))
        assert [f.cluster_id for f in fits] == [1, 2, 3]
        assert list(failures) == [4]
