"""Restriction preprocessing, Kaplan-Meier curves and RMST integration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's restricted observation."""

    cluster_id: int
    y: float
    delta: int
    group: int
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented clustered survival data restricted at ``tau``.

    ``covariates`` has one row per subject and one column per extra covariate
    (possibly zero columns). ``cluster_labels`` maps each distinct cluster id,
    in sorted order, to a display label.
    """

    cluster: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    group: np.ndarray
    covariates: np.ndarray
    tau: float
    cluster_labels: tuple[str, ...] | None = None
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.y)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if n else cov.reshape(0, 0)
        object.__setattr__(self, "cluster", np.asarray(self.cluster, dtype=np.int64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.int64))
        object.__setattr__(self, "group", np.asarray(self.group, dtype=float))
        object.__setattr__(self, "covariates", cov)
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        for name in ("cluster", "delta", "group"):
            if len(getattr(self, name)) != n:
                raise DomainError(f"column '{name}' has wrong length")
        if cov.shape[0] != n:
            raise DomainError("covariate matrix has wrong number of rows")
        if n and (self.y.min() < 0 or self.y.max() > self.tau):
            raise DomainError("observed times must lie in [0, tau]")
        if n and not np.isin(self.delta, (0, 1)).all():
            raise DomainError("event indicator must be 0 or 1")
        labels = self.cluster_labels
        if labels is not None and len(labels) != len(self.cluster_ids):
            raise DomainError("one label per cluster required")

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], tau: float, **kwargs) -> "Dataset":
        records = list(records)
        p1 = len(records[0].covariates) if records else 0
        cov = np.array([r.covariates for r in records], dtype=float).reshape(len(records), p1)
        return cls(
            cluster=np.array([r.cluster_id for r in records], dtype=np.int64),
            y=np.array([r.y for r in records], dtype=float),
            delta=np.array([r.delta for r in records], dtype=np.int64),
            group=np.array([r.group for r in records], dtype=float),
            covariates=cov,
            tau=tau,
            **kwargs,
        )

    def __len__(self):
        return len(self.y)

    @property
    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(int(c), float(y), int(d), int(g), tuple(float(v) for v in x))
            for c, y, d, g, x in zip(self.cluster, self.y, self.delta, self.group, self.covariates)
        ]

    @property
    def cluster_ids(self) -> np.ndarray:
        return np.unique(self.cluster)

    @property
    def cluster_sizes(self) -> dict[int, int]:
        ids, counts = np.unique(self.cluster, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def label(self, cluster_id: int) -> str:
        if self.cluster_labels is None:
            return str(cluster_id)
        idx = int(np.searchsorted(self.cluster_ids, cluster_id))
        return self.cluster_labels[idx]

    def design(self) -> np.ndarray:
        """Intercept, group indicator, then covariates."""
        return np.column_stack([np.ones(len(self)), self.group, self.covariates])

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.cluster[mask], self.y[mask], self.delta[mask], self.group[mask],
            self.covariates[mask], self.tau, None, self.covariate_names,
        )

    def cluster_indices(self) -> list[tuple[int, np.ndarray]]:
        """(cluster id, row indices) pairs in ascending cluster order."""
        order = np.argsort(self.cluster, kind="stable")
        ids, starts = np.unique(self.cluster[order], return_index=True)
        bounds = np.append(starts, len(order))
        return [(int(ids[k]), order[bounds[k]:bounds[k + 1]]) for k in range(len(ids))]


@dataclass(frozen=True, eq=False)
class StepSurvival:
    """Right-continuous nonincreasing step function with S(0) = 1.

    Values past the last jump are carried forward.
    """

    jump_times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.jump_times, t, side="right")
        return np.concatenate([[1.0], self.values])[k]

    def left_limit(self, t):
        """S(t-), the value just before ``t``."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.jump_times, t, side="left")
        return np.concatenate([[1.0], self.values])[k]


def restrict(raw_time: float, raw_censor_time: float | None, tau: float) -> tuple[float, int]:
    """Return ``(min(T, C, tau), I(T <= min(C, tau)))``; a missing C means no censoring."""
    if raw_time < 0 or (raw_censor_time is not None and raw_censor_time < 0):
        raise DomainError("times must be nonnegative")
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    c = np.inf if raw_censor_time is None else float(raw_censor_time)
    bound = min(c, tau)
    return float(min(raw_time, bound)), int(raw_time <= bound)


def restrict_arrays(raw_time, raw_censor_time, tau):
    """Vectorised :func:`restrict`; ``raw_censor_time`` may contain ``inf``."""
    t = np.asarray(raw_time, dtype=float)
    c = np.asarray(raw_censor_time, dtype=float)
    if (t < 0).any() or (c < 0).any():
        raise DomainError("times must be nonnegative")
    bound = np.minimum(c, tau)
    return np.minimum(t, bound), (t <= bound).astype(np.int64)


def _as_samples(time, event):
    if event is None:
        pairs = list(time)
        if not pairs:
            raise DomainError("empty sample")
        time, event = zip(*pairs)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=np.int64)
    if time.size == 0:
        raise DomainError("empty sample")
    if time.shape != event.shape:
        raise DomainError("time and event arrays differ in length")
    if (time < 0).any():
        raise DomainError("times must be nonnegative")
    return time, event


def event_table(time, event):
    """Distinct times with at-risk counts and event counts.

    Returns ``(times, n_at_risk, n_events, n_censored)``; the risk set at a time
    includes everyone observed at or after it.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=np.int64)
    order = np.argsort(time, kind="stable")
    ts = time[order]
    es = event[order]
    times, first = np.unique(ts, return_index=True)
    n_at_risk = len(ts) - first
    n_events = np.add.reduceat(es, first)
    counts = np.diff(np.append(first, len(ts)))
    return times, n_at_risk, n_events, counts - n_events


def kaplan_meier(time, event=None) -> StepSurvival:
    """Product-limit estimate of the event-time survival curve.

    Accepts either two parallel arrays or a single sequence of ``(y, delta)``
    pairs. Jumps occur only at event times.
    """
    time, event = _as_samples(time, event)
    times, n, d, _ = event_table(time, event)
    keep = d > 0
    values = np.cumprod(1.0 - d[keep] / n[keep])
    return StepSurvival(times[keep], values)


def censoring_km(time, event=None) -> StepSurvival:
    """Product-limit estimate of the censoring-time survival curve.

    At tied times events are removed from the risk set before censorings, so
    the censoring jump at ``t`` uses ``n(t) - d(t)`` as its denominator.
    """
    time, event = _as_samples(time, event)
    times, n, d, c = event_table(time, event)
    keep = c > 0
    values = np.cumprod(1.0 - c[keep] / (n[keep] - d[keep]))
    return StepSurvival(times[keep], values)


def rmst(surv: StepSurvival, tau: float) -> float:
    """Exact area under ``surv`` on ``[0, tau]``."""
    if tau < 0:
        raise DomainError("tau must be nonnegative")
    inside = surv.jump_times < tau
    knots = np.concatenate([[0.0], surv.jump_times[inside], [tau]])
    levels = np.concatenate([[1.0], surv.values[inside]])
    return float(np.dot(levels, np.diff(knots)))


def rmst_from_samples(time: Sequence[float], event: Sequence[int], tau: float) -> float:
    return rmst(kaplan_meier(time, event), tau)
