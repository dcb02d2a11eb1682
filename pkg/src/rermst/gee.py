"""Marginal-mean estimating equations for a random-intercept RMST model.

The marginal mean of a subject with linear predictor ``eta`` is

    M(theta) = integral of h(eta + sigma_v * u) phi(u) du

with ``phi`` the standard normal density, evaluated by probabilists'
Gauss-Hermite quadrature. The regression block of the estimating equation is
``sum_i D_i' V_i^{-1} (y_i - M_i) = 0`` with ``D_i = dM_i/dbeta`` and an
independence working covariance ``V_i = phi_hat * I``.

A random intercept enters the marginal mean either not at all (identity link)
or only through ``beta_0 + sigma_v**2 / 2`` (log link), so the first-moment
row for ``sigma_v`` carries no information. ``sigma_v`` is instead pinned by
the second-moment equation on within-cluster residual cross-products,

    sum_i sum_{j != k} [(y_ij - M_ij)(y_ik - M_ik) - Cov_theta(Y_ij, Y_ik)] = 0,

where ``Cov_theta`` is again a quadrature integral.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ConvergenceError,
    DomainError,
    IdentifiabilityError,
    SaturationError,
    SingularDesignError,
)

_EXP_LIMIT = 700.0


@dataclass(frozen=True)
class LinkSpec:
    kind: str
    h: Callable[[np.ndarray], np.ndarray]
    h_prime: Callable[[np.ndarray], np.ndarray]


def _checked_exp(eta):
    eta = np.asarray(eta, dtype=float)
    if eta.size and eta.max() > _EXP_LIMIT:
        raise SaturationError(
            f"log link overflow: linear predictor {eta.max():.4g} exceeds {_EXP_LIMIT}"
        )
    return np.exp(eta)


IDENTITY = LinkSpec("identity", lambda eta: np.asarray(eta, dtype=float),
                    lambda eta: np.ones_like(np.asarray(eta, dtype=float)))
LOG = LinkSpec("log", _checked_exp, _checked_exp)
LINKS = {"identity": IDENTITY, "log": LOG}


def get_link(link) -> LinkSpec:
    if isinstance(link, LinkSpec):
        return link
    try:
        return LINKS[link]
    except KeyError:
        raise DomainError(f"unknown link '{link}'; expected one of {sorted(LINKS)}") from None


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray


def gauss_hermite(n_nodes: int = 20) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule with weights summing to one."""
    if n_nodes < 1:
        raise DomainError("need at least one quadrature node")
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    return QuadratureRule(nodes, weights / weights.sum())


DEFAULT_RULE = gauss_hermite(20)


def _split_theta(theta):
    theta = np.asarray(theta, dtype=float)
    return theta[:-1], float(theta[-1])


def marginal_mean(x, theta, link="identity", rule: QuadratureRule = DEFAULT_RULE):
    """Marginal mean for one covariate vector or each row of a design matrix.

    ``theta`` is ``(beta..., sigma_v)``.
    """
    link = get_link(link)
    beta, sigma_v = _split_theta(theta)
    if sigma_v < 0:
        raise DomainError("sigma_v must be nonnegative")
    x = np.asarray(x, dtype=float)
    eta = x @ beta
    if link.kind == "identity":
        return eta
    grid = np.add.outer(eta, sigma_v * rule.nodes)
    return link.h(grid) @ rule.weights


def marginal_mean_jacobian(x, theta, link="identity", rule: QuadratureRule = DEFAULT_RULE):
    """Derivative of :func:`marginal_mean` w.r.t. ``(beta, sigma_v)``.

    For a single covariate vector returns a vector of length ``len(theta)``;
    for a design matrix returns one row per subject.
    """
    link = get_link(link)
    beta, sigma_v = _split_theta(theta)
    if sigma_v < 0:
        raise DomainError("sigma_v must be nonnegative")
    x = np.asarray(x, dtype=float)
    eta = x @ beta
    grid = np.add.outer(eta, sigma_v * rule.nodes)
    hp = link.h_prime(grid)
    d_beta = (hp @ rule.weights)[..., None] * x
    d_sigma = hp @ (rule.weights * rule.nodes)
    return np.concatenate([d_beta, np.asarray(d_sigma)[..., None]], axis=-1)


PHI_MIN = 1e-10


def working_covariance(residuals=None, n_params: int = 0, mode: str = "independence"):
    """Scalar dispersion of the independence working covariance.

    Without residuals (first iteration) the working covariance is the
    identity. Otherwise ``phi = sum r^2 / (N - n_params)``, floored at
    ``PHI_MIN``. ``V_i = phi * I`` for every cluster.
    """
    if mode != "independence":
        raise DomainError(f"unsupported working covariance '{mode}'")
    if residuals is None:
        return 1.0
    r = np.asarray(residuals, dtype=float).ravel()
    dof = r.size - n_params
    if dof <= 0:
        raise IdentifiabilityError(
            f"{r.size} observations cannot support {n_params} parameters"
        )
    return max(float(r @ r) / dof, PHI_MIN)


@dataclass
class GeeOptions:
    link: str = "identity"
    n_nodes: int = 20
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 20
    sigma_floor: float = 0.01
    residual_tol: float = 1e-6


@dataclass(eq=False)
class GeeFit:
    beta: np.ndarray
    sigma_v: float
    se_beta: np.ndarray
    iterations: int
    converged: bool
    residual_norm: float
    dispersion: float
    link: str
    history: list = field(default_factory=list, repr=False)

    @property
    def sigma_v_sq(self):
        return self.sigma_v ** 2

    @property
    def theta(self):
        return np.append(self.beta, self.sigma_v)


class _Problem:
    """Per-cluster bookkeeping shared by the estimating functions."""

    def __init__(self, y, X, cluster, link, rule):
        self.y = np.asarray(y, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.link = link
        self.rule = rule
        ids, inverse = np.unique(cluster, return_inverse=True)
        self.n_clusters = len(ids)
        self.inverse = inverse
        sizes = np.bincount(inverse)
        self.pairs = float(np.sum(sizes * (sizes - 1.0)))
        self.n = len(self.y)

    def cluster_sum(self, values):
        return np.bincount(self.inverse, weights=values, minlength=self.n_clusters)

    def residual(self, theta):
        return self.y - marginal_mean(self.X, theta, self.link, self.rule)

    def beta_equation(self, theta, phi=1.0):
        """Average of D' V^{-1} (y - M) over subjects (regression rows)."""
        D = marginal_mean_jacobian(self.X, theta, self.link, self.rule)[:, :-1]
        return D.T @ self.residual(theta) / (phi * self.n)

    def pair_covariance_total(self, theta):
        """sum_i sum_{j != k} Cov(Y_ij, Y_ik) under the random intercept."""
        beta, sigma_v = _split_theta(theta)
        if self.link.kind == "identity":
            return sigma_v ** 2 * self.pairs
        eta = self.X @ beta
        grid = self.link.h(np.add.outer(eta, sigma_v * self.rule.nodes))
        m = grid @ self.rule.weights
        # per cluster and node: (sum h)^2 - sum h^2
        sums = np.stack([self.cluster_sum(grid[:, q]) for q in range(grid.shape[1])], axis=1)
        squares = np.stack([self.cluster_sum(grid[:, q] ** 2) for q in range(grid.shape[1])], axis=1)
        second = float(((sums ** 2 - squares) @ self.rule.weights).sum())
        first = float((self.cluster_sum(m) ** 2 - self.cluster_sum(m * m)).sum())
        return second - first

    def pair_residual_total(self, theta):
        r = self.residual(theta)
        return float((self.cluster_sum(r) ** 2 - self.cluster_sum(r * r)).sum())

    def sigma_equation(self, theta):
        return (self.pair_residual_total(theta) - self.pair_covariance_total(theta)) / self.pairs

    def equations(self, theta, phi=1.0):
        return np.append(self.beta_equation(theta, phi), self.sigma_equation(theta))

    def jacobian(self, theta, phi=1.0):
        """Fisher-type block for beta rows, central differences for the sigma row."""
        p = len(theta)
        J = np.empty((p, p))
        D = marginal_mean_jacobian(self.X, theta, self.link, self.rule)
        J[:-1] = -(D[:, :-1].T @ D) / (phi * self.n)
        step = 1e-6
        for k in range(p):
            hi = np.array(theta, dtype=float)
            lo = hi.copy()
            h = step * max(1.0, abs(hi[k]))
            hi[k] += h
            lo[k] -= h
            if k == p - 1 and lo[k] < 0:
                lo[k] = theta[k]
                J[-1, k] = (self.sigma_equation(hi) - self.sigma_equation(lo)) / (hi[k] - lo[k])
            else:
                J[-1, k] = (self.sigma_equation(hi) - self.sigma_equation(lo)) / (2 * h)
        return J


SE_RTOL = 1e-8


def fit_fixed_effect(y, X, link="identity", max_iter: int = 100, tol: float = 1e-10,
                     check_se: bool = True):
    """Fixed-effect regression of ``y`` on ``X`` by Fisher scoring.

    Returns ``(beta, se)`` with heteroscedasticity-robust (HC0) standard
    errors. With the identity link this is ordinary least squares. A fit with
    a numerically zero standard error (e.g. every response equal) raises
    :class:`SingularDesignError` unless ``check_se`` is false.
    """
    link = get_link(link)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < p or np.linalg.matrix_rank(X) < p:
        raise SingularDesignError(f"design with {n} rows is rank deficient (p={p})")
    if link.kind == "identity":
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
    else:
        mean_y = y.mean()
        if mean_y <= 0:
            raise DomainError("log link needs a positive mean response")
        beta = np.zeros(p)
        beta[0] = np.log(mean_y)
        for _ in range(max_iter):
            mu = link.h(X @ beta)
            D = mu[:, None] * X
            step = np.linalg.solve(D.T @ D, D.T @ (y - mu))
            beta = beta + step
            if np.max(np.abs(step)) < tol:
                break
        else:
            raise ConvergenceError("fixed-effect log-link regression did not converge")
    eta = X @ beta
    D = link.h_prime(eta)[:, None] * X
    r = y - link.h(eta)
    bread = np.linalg.inv(D.T @ D)
    meat = (D * (r ** 2)[:, None]).T @ D
    cov = bread @ meat @ bread
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if check_se and np.any(se <= SE_RTOL * max(1.0, float(np.max(np.abs(y))))):
        raise SingularDesignError("degenerate fit: a standard error is numerically zero")
    return beta, se


def _initial_sigma(problem: _Problem, beta, floor):
    r = problem.y - get_link(problem.link).h(problem.X @ beta)
    sizes = np.bincount(problem.inverse)
    means = problem.cluster_sum(r) / sizes
    return max(float(np.sqrt(np.var(means, ddof=1))), floor)


def solve_gee(pseudo, link="identity", options: GeeOptions | None = None, *,
              y=None, X=None, cluster=None) -> GeeFit:
    """Solve the random-intercept estimating equations.

    ``pseudo`` is a :class:`~rermst.pseudo.PseudoDataset` (or ``None`` when the
    arrays ``y``, ``X``, ``cluster`` are passed directly).

    Each outer iteration refreshes the working dispersion from the current
    residuals (identity on the first pass) and takes a damped Gauss-Newton
    step on the stacked equations; negative ``sigma_v`` iterates are projected
    to zero. Stops when ``max |theta_new - theta_old| < tol``.

    ``residual_norm`` is the max-norm of the per-subject averaged regression
    rows and, unless ``sigma_v`` sits on its zero bound, the per-pair averaged
    second-moment row.
    """
    options = options or GeeOptions(link=link if isinstance(link, str) else link.kind)
    link = get_link(link)
    if pseudo is not None:
        y, X, cluster = pseudo.response, pseudo.design(), pseudo.cluster
    problem = _Problem(y, X, cluster, link, gauss_hermite(options.n_nodes))
    if problem.n_clusters < 2:
        raise IdentifiabilityError("the random-effect variance needs at least two clusters")
    if problem.pairs <= 0:
        raise IdentifiabilityError("no cluster has two or more subjects")
    p = X.shape[1]
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError("design matrix is rank deficient")

    beta0, _ = fit_fixed_effect(problem.y, problem.X, link, check_se=False)
    theta = np.append(beta0, _initial_sigma(problem, beta0, options.sigma_floor))
    phi = working_covariance()
    history = []
    converged = False

    def active_norm(eq, th):
        eq = np.array(eq)
        if th[-1] == 0.0 and eq[-1] < 0:
            eq[-1] = 0.0  # bound constraint active (KKT)
        return float(np.max(np.abs(eq)))

    it = 0
    for it in range(1, options.max_iter + 1):
        eq = problem.equations(theta, phi)
        norm = active_norm(eq, theta)
        J = problem.jacobian(theta, phi)
        free = np.ones(len(theta), dtype=bool)
        if theta[-1] == 0.0 and eq[-1] <= 0:
            free[-1] = False
        step = np.zeros_like(theta)
        try:
            step[free] = -np.linalg.solve(J[np.ix_(free, free)], eq[free])
        except np.linalg.LinAlgError:
            step[free] = -np.linalg.lstsq(J[np.ix_(free, free)], eq[free], rcond=None)[0]
        if theta[-1] == 0.0 and eq[-1] > 0:
            step[-1] = max(step[-1], options.sigma_floor)

        scale = 1.0
        for _ in range(options.max_halvings + 1):
            cand = theta + scale * step
            cand[-1] = max(cand[-1], 0.0)
            try:
                cand_norm = active_norm(problem.equations(cand, phi), cand)
            except SaturationError:
                cand_norm = np.inf
            if cand_norm < norm or norm == 0.0:
                break
            scale *= 0.5
        change = float(np.max(np.abs(cand - theta)))
        theta = cand
        phi = working_covariance(problem.residual(theta), p + 1)
        history.append((it, change, cand_norm))
        if change < options.tol:
            converged = True
            break

    eq = problem.equations(theta, phi)
    residual_norm = active_norm(eq, theta)
    converged = converged and residual_norm < options.residual_tol

    beta = theta[:-1]
    se = _sandwich_se(problem, theta, phi)
    return GeeFit(beta, float(theta[-1]), se, it, converged, residual_norm, phi,
                  link.kind, history)


def _sandwich_se(problem: _Problem, theta, phi):
    """Cluster-robust A^{-1} B A^{-T} for the regression coefficients."""
    D = marginal_mean_jacobian(problem.X, theta, problem.link, problem.rule)[:, :-1] / phi
    r = problem.residual(theta)
    A = D.T @ D * phi
    scores = np.stack(
        [problem.cluster_sum(D[:, k] * r) for k in range(D.shape[1])], axis=1
    )
    B = scores.T @ scores
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("information matrix is singular") from exc
    cov = Ainv @ B @ Ainv.T
    return np.sqrt(np.clip(np.diag(cov), 0.0, None))
