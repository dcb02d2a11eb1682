"""Per-cluster inverse-probability-of-censoring-weighted RMST regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, PositivityError, SingularDesignError
from .gee import SE_RTOL, get_link
from .survival import Dataset, SubjectRecord, censoring_km


@dataclass(eq=False)
class ClusterFit:
    cluster_id: int
    beta: np.ndarray
    se: np.ndarray
    n: int
    n_events: int
    n_censored: int
    residual_norm: float = 0.0


def known_restricted_time(y, delta, tau):
    """Indicator that min(T, tau) is observed: an event, or follow-up reaching tau."""
    y = np.asarray(y, dtype=float)
    return np.maximum(np.asarray(delta, dtype=np.int64), (y >= tau).astype(np.int64))


def ipcw_weights(y, delta, tau):
    """``known / G(y-)`` with ``G`` the censoring Kaplan-Meier curve of the sample."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=np.int64)
    known = known_restricted_time(y, delta, tau)
    G = censoring_km(y, delta).left_limit(y)
    bad = (known == 1) & (G <= 0)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise PositivityError(f"censoring survival is zero just before subject {j} (y={y[j]:.6g})")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(known == 1, known / G, 0.0)
    return w, known


def fit_weighted(y, X, w, link="identity", max_iter: int = 100, tol: float = 1e-12):
    """Root of ``mean(w * x * (y - h(x'beta))) = 0`` with a sandwich covariance.

    Weights are treated as known. Returns ``(beta, se, residual_norm)``.
    """
    link = get_link(link)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float)
    n, p = X.shape
    used = w > 0
    if used.sum() < p or np.linalg.matrix_rank(X[used]) < p:
        raise SingularDesignError("weighted design is rank deficient")
    Xw = X * w[:, None]
    if link.kind == "identity":
        beta = np.linalg.solve(Xw.T @ X, Xw.T @ y)
    else:
        mean_y = np.sum(w * y) / np.sum(w)
        if mean_y <= 0:
            raise DomainError("log link needs a positive weighted mean response")
        beta = np.zeros(p)
        beta[0] = np.log(mean_y)
        for _ in range(max_iter):
            mu = link.h(X @ beta)
            A = (Xw * mu[:, None]).T @ X
            step = np.linalg.solve(A, Xw.T @ (y - mu))
            beta = beta + step
            if np.max(np.abs(step)) < tol * max(1.0, np.max(np.abs(beta))):
                break
        else:
            raise ConvergenceError("IPCW Newton iteration did not converge")
    eta = X @ beta
    r = y - link.h(eta)
    eq = Xw.T @ r / n
    A = (Xw * link.h_prime(eta)[:, None]).T @ X / n
    meat = (X * ((w * r) ** 2)[:, None]).T @ X / n
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("IPCW information matrix is singular") from exc
    cov = Ainv @ meat @ Ainv.T / n
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return beta, se, float(np.max(np.abs(eq)))


def ipcw_fit_arrays(y, delta, X, tau, link="identity", cluster_id: int = 0) -> ClusterFit:
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=np.int64)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < p + 1:
        raise SingularDesignError(f"cluster {cluster_id}: {n} subjects for {p} coefficients")
    w, known = ipcw_weights(y, delta, tau)
    if known.sum() == 0:
        raise PositivityError(f"cluster {cluster_id}: no subject has a known restricted time")
    beta, se, res = fit_weighted(y, X, w, link)
    if np.any(se <= SE_RTOL * max(1.0, float(np.max(np.abs(y))))):
        raise SingularDesignError(f"cluster {cluster_id}: degenerate standard errors")
    n_events = int(known.sum())
    return ClusterFit(cluster_id, beta, se, n, n_events, n - n_events, res)


def ipcw_fit_cluster(cluster_records: list[SubjectRecord] | Dataset, tau: float | None = None,
                     link="identity") -> ClusterFit:
    """Fit one cluster; accepts a list of records or a single-cluster Dataset."""
    if isinstance(cluster_records, Dataset):
        data = cluster_records
    else:
        if not cluster_records:
            raise DomainError("empty cluster")
        data = Dataset.from_records(cluster_records, tau)
    ids = data.cluster_ids
    cid = int(ids[0]) if len(ids) == 1 else 0
    return ipcw_fit_arrays(data.y, data.delta, data.design(), data.tau if tau is None else tau,
                           link, cid)


def ipcw_fit_all(data: Dataset, link="identity"):
    """Fit each cluster; returns ``(fits, failures)`` with failures as {id: error}."""
    fits, failures = [], {}
    X = data.design()
    for cid, idx in data.cluster_indices():
        try:
            fits.append(ipcw_fit_arrays(data.y[idx], data.delta[idx], X[idx], data.tau, link, cid))
        except (ArithmeticError, ValueError) as exc:
            failures[cid] = exc
    return fits, failures
