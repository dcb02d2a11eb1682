"""Between-cluster variance, pooled means and empirical-Bayes shrinkage."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .errors import DomainError, IdentifiabilityError


@dataclass(frozen=True)
class ShrinkageEntry:
    cluster_id: int
    raw: float
    raw_se: float
    eb: float
    ci_low: float
    ci_high: float
    alpha: float

    @property
    def half_width(self):
        return 0.5 * (self.ci_high - self.ci_low)


@dataclass
class PooledResult:
    sigma_v_sq: float
    q_statistic: float
    c_value: float
    pooled_fixed: float
    pooled_random: float
    center: float
    per_cluster: list[ShrinkageEntry]
    excluded: list[int] = field(default_factory=list)

    def entry(self, cluster_id):
        for e in self.per_cluster:
            if e.cluster_id == cluster_id:
                return e
        raise KeyError(cluster_id)


def z_value(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return float(norm.ppf(1 - alpha / 2))


def _unpack(estimates):
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 2 or est.shape[1] != 2:
        raise DomainError("estimates must be (estimate, standard error) pairs")
    return est[:, 0], est[:, 1]


def estimate_sigma_v(estimates: Sequence[tuple[float, float]]):
    """Moment estimator of the between-cluster variance.

    Returns ``(sigma_v_sq, Q, c, pooled_fixed)`` where ``pooled_fixed`` is the
    inverse-variance weighted mean and ``sigma_v_sq = max(0, (Q - (I-1)) / c)``.
    """
    b, se = _unpack(estimates)
    if len(b) < 2:
        raise IdentifiabilityError("between-cluster variance needs at least two clusters")
    if np.any(se <= 0):
        raise DomainError("standard errors must be positive")
    w = se ** -2.0
    pooled = float(np.sum(w * b) / np.sum(w))
    q = float(np.sum(w * (b - pooled) ** 2))
    c = float(np.sum(w) - np.sum(w ** 2) / np.sum(w))
    k = len(b)
    sigma_v_sq = 0.0 if q < k - 1 else max(0.0, (q - (k - 1)) / c)
    return sigma_v_sq, q, c, pooled


def pooled_random_mean(estimates, sigma_v_sq: float) -> float:
    b, se = _unpack(estimates)
    if sigma_v_sq < 0:
        raise DomainError("sigma_v_sq must be nonnegative")
    w = 1.0 / (se ** 2 + sigma_v_sq)
    return float(np.sum(w * b) / np.sum(w))


def shrink_cluster(raw: float, raw_var: float, center: float, sigma_v_sq: float,
                   alpha: float = 0.05, cluster_id: int = 0) -> ShrinkageEntry:
    """Shrink ``raw`` toward ``center`` with weight ``raw_var / (raw_var + sigma_v_sq)``.

    The adjusted interval has half-width
    ``z * sqrt(raw_var * sigma_v_sq / (raw_var + sigma_v_sq))``.
    """
    if raw_var < 0 or sigma_v_sq < 0:
        raise DomainError("variances must be nonnegative")
    z = z_value(alpha)
    total = raw_var + sigma_v_sq
    if total == 0:
        lam, half = 0.0, 0.0
    else:
        lam = raw_var / total
        half = z * np.sqrt(raw_var * sigma_v_sq / total)
    eb = raw + lam * (center - raw)
    return ShrinkageEntry(cluster_id, float(raw), float(np.sqrt(raw_var)), float(eb),
                          float(eb - half), float(eb + half), alpha)


def _split_refits(per_cluster_refits, cluster_ids):
    if cluster_ids is None:
        cluster_ids = list(range(1, len(per_cluster_refits) + 1))
    kept, ids, excluded = [], [], []
    for cid, fit in zip(cluster_ids, per_cluster_refits):
        if fit is None or not np.all(np.isfinite(fit)) or fit[1] <= 0:
            excluded.append(cid)
        else:
            kept.append(tuple(fit))
            ids.append(cid)
    return kept, ids, excluded


def pv_method_pooling(gee_fit, per_cluster_refits, alpha: float = 0.05,
                      cluster_ids=None, coef: int = 1) -> PooledResult:
    """Shrink within-cluster pseudo-value estimates toward the overall GEE estimate.

    ``per_cluster_refits`` holds ``(estimate, se)`` pairs, or ``None`` for a
    cluster whose refit failed; failed clusters are listed in ``excluded``.
    The shrinkage variance is the squared overall standard error and the
    between-cluster variance is the squared GEE ``sigma_v``.
    """
    kept, ids, excluded = _split_refits(per_cluster_refits, cluster_ids)
    center = float(gee_fit.beta[coef])
    raw_var = float(gee_fit.se_beta[coef]) ** 2
    sigma_v_sq = float(gee_fit.sigma_v) ** 2
    entries = [shrink_cluster(b, raw_var, center, sigma_v_sq, alpha, cid)
               for cid, (b, _) in zip(ids, kept)]
    # report per-cluster raw SEs, not the shared shrinkage variance
    entries = [ShrinkageEntry(e.cluster_id, e.raw, se, e.eb, e.ci_low, e.ci_high, alpha)
               for e, (_, se) in zip(entries, kept)]
    if len(kept) >= 2:
        _, q, c, fixed = estimate_sigma_v(kept)
        random_mean = pooled_random_mean(kept, sigma_v_sq)
    elif kept:
        q, c, fixed, random_mean = 0.0, 0.0, kept[0][0], kept[0][0]
    else:
        q, c, fixed, random_mean = np.nan, np.nan, np.nan, np.nan
    return PooledResult(sigma_v_sq, q, c, fixed, random_mean, center, entries, excluded)


def ipcw_method_pooling(fits, alpha: float = 0.05, coef: int = 1, excluded=()) -> PooledResult:
    """Second stage of the two-stage IPCW method.

    ``fits`` are the successful :class:`~rermst.ipcw.ClusterFit` objects;
    ``None`` entries are treated as failures and recorded in ``excluded``.
    """
    good = [f for f in fits if f is not None]
    excluded = list(excluded)
    if len(good) < 2:
        raise IdentifiabilityError(f"{len(good)} successful cluster fit(s); at least 2 required")
    est = [(float(f.beta[coef]), float(f.se[coef])) for f in good]
    sigma_v_sq, q, c, fixed = estimate_sigma_v(est)
    center = pooled_random_mean(est, sigma_v_sq)
    entries = [shrink_cluster(b, se ** 2, center, sigma_v_sq, alpha, f.cluster_id)
               for f, (b, se) in zip(good, est)]
    return PooledResult(sigma_v_sq, q, c, fixed, center, center, entries, excluded)
