"""Within-cluster jackknife pseudo-values for the restricted mean.

The pseudo-value of subject j in a cluster of size n is
``n * m - (n - 1) * m_(-j)`` where ``m`` is the Kaplan-Meier RMST of the
cluster and ``m_(-j)`` the RMST with subject j left out. Values are never
clamped to ``[0, tau]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClusterTooSmallError, DomainError
from .survival import Dataset, SubjectRecord, event_table, kaplan_meier, rmst


@dataclass(frozen=True, eq=False)
class PseudoValueSet:
    cluster_id: int
    values: np.ndarray
    cluster_rmst: float
    loo_rmst: np.ndarray


@dataclass(frozen=True, eq=False)
class PseudoDataset:
    """A dataset whose response column holds pseudo-values."""

    data: Dataset
    response: np.ndarray

    @property
    def cluster(self):
        return self.data.cluster

    def design(self):
        return self.data.design()


def _restricted(y, delta, tau):
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=np.int64)
    beyond = y > tau
    return np.where(beyond, tau, y), np.where(beyond, 0, delta)


def loo_rmst_naive(y, delta, tau) -> np.ndarray:
    """Leave-one-out RMST by refitting the product-limit curve n times."""
    y, delta = _restricted(y, delta, tau)
    n = len(y)
    out = np.empty(n)
    keep = np.ones(n, dtype=bool)
    for j in range(n):
        keep[j] = False
        out[j] = rmst(kaplan_meier(y[keep], delta[keep]), tau)
        keep[j] = True
    return out


def loo_rmst_fast(y, delta, tau) -> np.ndarray:
    """Leave-one-out RMST for every subject in O(n log n).

    Removing subject j lowers the risk set by one at every distinct time up to
    y_j (and the event count at y_j if j had an event); factors after y_j are
    unchanged. With prefix integrals of the reduced-risk-set curve and suffix
    integrals of the conditional curve, each leave-one-out area is a constant
    number of lookups.
    """
    y, delta = _restricted(y, delta, tau)
    if len(y) < 2:
        raise DomainError("leave-one-out needs at least two subjects")
    t, n, d, _ = event_table(y, delta)
    k = len(t)
    widths = np.diff(np.append(t, tau))  # [t_k, t_{k+1}) with t_{K+1} = tau
    lead = t[0]  # [0, t_1) where every curve equals 1

    with np.errstate(divide="ignore", invalid="ignore"):
        reduced = np.where(n > 1, 1.0 - d / (n - 1.0), 0.0)
    # prefix[k] = product over l < k of reduced factors
    prefix = np.concatenate([[1.0], np.cumprod(reduced)])
    # before[k] = integral over [0, t_k) of the reduced-risk-set curve
    before = np.concatenate([[lead], lead + np.cumsum(prefix[1:k] * widths[: k - 1])])

    full = 1.0 - d / n
    # after[k] = integral over [t_k, tau] of prod_{k < l, t_l <= s} full_l
    after = np.empty(k)
    acc = 0.0
    for idx in range(k - 1, -1, -1):
        acc = widths[idx] + (full[idx + 1] * acc if idx + 1 < k else 0.0)
        after[idx] = acc

    pos = np.searchsorted(t, y)
    n_j = n[pos] - 1.0
    d_j = d[pos] - delta
    with np.errstate(divide="ignore", invalid="ignore"):
        own = np.where(n_j > 0, 1.0 - d_j / n_j, 1.0)
    return before[pos] + prefix[pos] * own * after[pos]


def pseudo_values(y, delta, tau, method: str = "fast") -> tuple[np.ndarray, float, np.ndarray]:
    """Return ``(pseudo_values, full_rmst, loo_rmst)`` for one cluster."""
    y, delta = _restricted(y, delta, tau)
    n = len(y)
    full = rmst(kaplan_meier(y, delta), tau)
    if method == "fast":
        loo = loo_rmst_fast(y, delta, tau)
    elif method == "naive":
        loo = loo_rmst_naive(y, delta, tau)
    else:
        raise DomainError(f"unknown pseudo-value method '{method}'")
    return n * full - (n - 1) * loo, full, loo


def cluster_pseudo_values(cluster_records: list[SubjectRecord], tau: float,
                          method: str = "fast") -> PseudoValueSet:
    if not cluster_records:
        raise DomainError("empty cluster")
    cid = cluster_records[0].cluster_id
    if len(cluster_records) < 2:
        raise ClusterTooSmallError(cid, len(cluster_records), 2)
    y = [r.y for r in cluster_records]
    delta = [r.delta for r in cluster_records]
    values, full, loo = pseudo_values(y, delta, tau, method)
    return PseudoValueSet(cid, values, full, loo)


def pseudo_complete_dataset(data: Dataset, method: str = "fast") -> PseudoDataset:
    """Replace every response by its within-cluster pseudo-value."""
    response = np.empty(len(data))
    for cid, idx in data.cluster_indices():
        if len(idx) < 2:
            raise ClusterTooSmallError(cid, len(idx), 2)
        response[idx] = pseudo_values(data.y[idx], data.delta[idx], data.tau, method)[0]
    return PseudoDataset(data, response)
