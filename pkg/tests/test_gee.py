import numpy as np
import pytest
from numpy.testing import assert_allclose

from rermst.errors import DomainError, IdentifiabilityError, SaturationError, SingularDesignError
from rermst.gee import (
    IDENTITY,
    LOG,
    PHI_MIN,
    GeeOptions,
    fit_fixed_effect,
    gauss_hermite,
    marginal_mean,
    marginal_mean_jacobian,
    solve_gee,
    working_covariance,
)


def clustered_linear(seed, clusters=30, size=20, sigma_v=0.8, beta=(1.0, 0.5)):
    rng = np.random.default_rng(seed)
    cluster = np.repeat(np.arange(1, clusters + 1), size)
    g = rng.integers(0, 2, cluster.size).astype(float)
    X = np.column_stack([np.ones_like(g), g])
    v = rng.normal(0, sigma_v, clusters)[cluster - 1]
    y = X @ np.array(beta) + v + rng.normal(0, 1, cluster.size)
    return y, X, cluster


def central_difference(f, theta, h=1e-6):
    theta = np.asarray(theta, dtype=float)
    out = np.empty(theta.size)
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h
        out[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


class TestLinks:
    def test_derivatives(self):
        eta = np.linspace(-2, 2, 9)
        assert_allclose(IDENTITY.h_prime(eta), 1.0)
        assert_allclose(LOG.h_prime(eta), np.exp(eta))

    def test_log_saturates(self):
        with pytest.raises(SaturationError):
            LOG.h(np.array([800.0]))


class TestQuadrature:
    def test_normalised_and_symmetric(self):
        rule = gauss_hermite(20)
        assert_allclose(rule.weights.sum(), 1.0, rtol=1e-14)
        assert_allclose(np.sort(rule.nodes), -np.sort(rule.nodes)[::-1], atol=1e-12)

    def test_second_moment(self):
        rule = gauss_hermite(20)
        assert_allclose(rule.weights @ rule.nodes ** 2, 1.0, rtol=1e-12)


class TestMarginalMean:
    def test_identity_exact(self):
        assert marginal_mean([1.0, 1.0], [1.5, 0.5, 0.7]) == pytest.approx(2.0, abs=1e-15)

    def test_lognormal_closed_form(self):
        assert_allclose(marginal_mean([1.0], [1.0, 0.3], "log"), np.exp(1.045), rtol=1e-8)
        assert round(float(np.exp(1.045)), 5) == 2.8434

    @pytest.mark.parametrize("link", ["identity", "log"])
    def test_zero_sigma(self, link):
        x = np.array([1.0, 0.4])
        beta = np.array([0.3, -1.2])
        expected = x @ beta if link == "identity" else np.exp(x @ beta)
        assert_allclose(marginal_mean(x, [*beta, 0.0], link), expected, rtol=1e-14)

    def test_lognormal_grid(self):
        eta = np.linspace(-3, 3, 25)
        x = eta[:, None]
        for sigma_v in np.linspace(0, 1, 11):
            assert_allclose(marginal_mean(x, [1.0, sigma_v], "log"),
                            np.exp(eta + sigma_v ** 2 / 2), rtol=1e-8)

    def test_rows(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0]])
        theta = [0.2, 0.3, 0.5]
        assert_allclose(marginal_mean(X, theta, "log"),
                        [marginal_mean(row, theta, "log") for row in X])

    def test_negative_sigma(self):
        with pytest.raises(DomainError):
            marginal_mean([1.0], [0.0, -0.1])


class TestJacobian:
    def test_identity(self):
        x = np.array([1.0, 2.0, -0.5])
        assert_allclose(marginal_mean_jacobian(x, [0.1, 0.2, 0.3, 0.9]), [*x, 0.0], atol=1e-14)

    def test_log_zero_sigma(self):
        x = np.array([1.0, 0.5])
        beta = np.array([0.2, 0.4])
        assert_allclose(marginal_mean_jacobian(x, [*beta, 0.0], "log"),
                        [*(x * np.exp(x @ beta)), 0.0], atol=1e-14)

    def test_log_closed_form(self):
        J = marginal_mean_jacobian([1.0], [1.0, 0.3], "log")
        assert_allclose(J, [np.exp(1.045), 0.3 * np.exp(1.045)], rtol=1e-8)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("link", ["identity", "log"])
    def test_finite_differences(self, seed, link):
        rng = np.random.default_rng(seed)
        x = np.concatenate([[1.0], rng.normal(0, 1, 2)])
        theta = np.concatenate([rng.normal(0, 0.5, 3), [rng.uniform(0.05, 1.0)]])
        fd = central_difference(lambda t: marginal_mean(x, t, link), theta)
        assert_allclose(marginal_mean_jacobian(x, theta, link), fd, atol=1e-6)


class TestWorkingCovariance:
    def test_first_iteration(self):
        assert working_covariance() == 1.0

    def test_degenerate_guard(self):
        assert working_covariance(np.zeros(5), n_params=2) == PHI_MIN

    def test_formula(self):
        assert working_covariance(np.array([1.0, -1.0]), n_params=1) == pytest.approx(2.0)

    def test_too_few_observations(self):
        with pytest.raises(IdentifiabilityError):
            working_covariance(np.array([1.0, -1.0]), n_params=2)

    def test_unknown_mode(self):
        with pytest.raises(DomainError):
            working_covariance(np.ones(3), mode="exchangeable")


class TestFixedEffect:
    def test_ols(self):
        rng = np.random.default_rng(0)
        X = np.column_stack([np.ones(50), rng.normal(size=50)])
        y = X @ [1.0, 2.0] + rng.normal(size=50)
        beta, _ = fit_fixed_effect(y, X)
        assert_allclose(beta, np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-12)

    def test_hc0(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(40), rng.integers(0, 2, 40)])
        y = rng.normal(size=40)
        beta, se = fit_fixed_effect(y, X)
        r = y - X @ beta
        bread = np.linalg.inv(X.T @ X)
        cov = bread @ (X.T * r ** 2) @ X @ bread
        assert_allclose(se, np.sqrt(np.diag(cov)), rtol=1e-12)

    def test_constant_response_is_degenerate(self):
        X = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1]])
        with pytest.raises(SingularDesignError):
            fit_fixed_effect(np.full(6, 5.0), X)


class TestSolveGee:
    def test_reduces_to_least_squares(self):
        rng = np.random.default_rng(3)
        cluster = np.repeat([1, 2, 3, 4], 50)
        g = rng.integers(0, 2, 200).astype(float)
        X = np.column_stack([np.ones(200), g])
        y = np.minimum(rng.exponential(np.exp(1 + 0.5 * g)), 5.0)
        fit = solve_gee(None, "identity", y=y, X=X, cluster=cluster)
        assert fit.converged
        assert_allclose(fit.beta, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-6)

    def test_single_cluster(self):
        y, X, _ = clustered_linear(0, clusters=1)
        with pytest.raises(IdentifiabilityError):
            solve_gee(None, y=y, X=X, cluster=np.ones(y.size, int))

    def test_rank_deficient(self):
        y, X, cluster = clustered_linear(0, clusters=3)
        X = np.column_stack([X, 2 * X[:, 1]])
        with pytest.raises(SingularDesignError):
            solve_gee(None, y=y, X=X, cluster=cluster)

    def test_recovers_sigma_v(self):
        y, X, cluster = clustered_linear(5, clusters=200, size=20, sigma_v=0.8)
        fit = solve_gee(None, y=y, X=X, cluster=cluster)
        assert fit.converged
        assert abs(fit.sigma_v - 0.8) < 0.1
        assert_allclose(fit.beta, [1.0, 0.5], atol=0.15)

    def test_residual_small_when_converged(self):
        y, X, cluster = clustered_linear(6)
        fit = solve_gee(None, y=y, X=X, cluster=cluster)
        assert fit.converged and fit.residual_norm < 1e-6
        assert fit.sigma_v >= 0

    def test_permutation_invariance(self):
        y, X, cluster = clustered_linear(7)
        fit = solve_gee(None, y=y, X=X, cluster=cluster)
        perm = np.random.default_rng(1).permutation(y.size)
        again = solve_gee(None, y=y[perm], X=X[perm], cluster=cluster[perm])
        assert_allclose(again.beta, fit.beta, atol=1e-10)
        assert_allclose(again.sigma_v, fit.sigma_v, atol=1e-10)
        assert_allclose(again.se_beta, fit.se_beta, atol=1e-10)

    def test_doubling(self):
        y, X, cluster = clustered_linear(8)
        fit = solve_gee(None, y=y, X=X, cluster=cluster)
        double = solve_gee(None, y=2 * y, X=X, cluster=cluster)
        assert_allclose(double.beta, 2 * fit.beta, rtol=1e-8)
        assert_allclose(double.sigma_v, 2 * fit.sigma_v, rtol=1e-6)

    def test_homogeneous_clusters_project_to_zero(self):
        y, X, cluster = clustered_linear(9, clusters=40, sigma_v=0.0)
        # remove between-cluster variation entirely
        for c in np.unique(cluster):
            m = cluster == c
            y[m] -= y[m].mean() - (X[m] @ [1.0, 0.5]).mean()
        fit = solve_gee(None, y=y, X=X, cluster=cluster)
        assert fit.converged
        assert fit.sigma_v == 0.0

    def test_log_link(self):
        rng = np.random.default_rng(10)
        clusters, size = 60, 30
        cluster = np.repeat(np.arange(1, clusters + 1), size)
        g = rng.integers(0, 2, cluster.size).astype(float)
        X = np.column_stack([np.ones_like(g), g])
        v = rng.normal(0, 0.4, clusters)[cluster - 1]
        y = np.exp(X @ [0.5, 0.3] + v) * rng.gamma(10, 0.1, cluster.size)
        fit = solve_gee(None, "log", GeeOptions(link="log"), y=y, X=X, cluster=cluster)
        assert fit.converged and fit.residual_norm < 1e-6
        assert_allclose(fit.beta[1], 0.3, atol=0.1)
        assert abs(fit.sigma_v - 0.4) < 0.15

    def test_options_respected(self):
        y, X, cluster = clustered_linear(11)
        fit = solve_gee(None, y=y, X=X, cluster=cluster, options=GeeOptions(max_iter=1))
        assert fit.iterations <= 1
