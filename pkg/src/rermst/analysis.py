"""End-to-end analysis of a clustered dataset by either method."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConvergenceError
from .gee import GeeOptions, fit_fixed_effect, solve_gee
from .ipcw import ipcw_fit_all
from .pooling import ipcw_method_pooling, pv_method_pooling, z_value
from .pseudo import pseudo_complete_dataset
from .survival import Dataset


@dataclass
class ClusterRow:
    cluster: str
    n: int
    n_events: int
    n_censored: int
    estimate: float
    ci_low: float
    ci_high: float
    eb_estimate: float
    eb_ci_low: float
    eb_ci_high: float


@dataclass
class Overall:
    estimate: float
    se: float
    ci_low: float
    ci_high: float


@dataclass
class AnalysisReport:
    method: str
    tau: float
    link: str
    alpha: float
    overall: Overall
    sigma_v_sq: float
    per_cluster: list[ClusterRow] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["overall"] = Overall(**d["overall"])
        d["per_cluster"] = [ClusterRow(**row) for row in d["per_cluster"]]
        return cls(**d)


def _counts(data: Dataset, idx):
    events = int(data.delta[idx].sum())
    return len(idx), events, len(idx) - events


def _rows(data, entries_by_id, raw_by_id, z, alpha):
    rows = []
    for cid, idx in data.cluster_indices():
        n, ev, ce = _counts(data, idx)
        label = data.label(cid)
        if cid in entries_by_id:
            e = entries_by_id[cid]
            b, se = raw_by_id[cid]
            rows.append(ClusterRow(label, n, ev, ce, b, b - z * se, b + z * se,
                                   e.eb, e.ci_low, e.ci_high))
        else:
            nan = float("nan")
            rows.append(ClusterRow(label, n, ev, ce, nan, nan, nan, nan, nan, nan))
    return rows


def analyze_pv(data: Dataset, link="identity", alpha: float = 0.05,
               options: GeeOptions | None = None) -> AnalysisReport:
    pseudo = pseudo_complete_dataset(data)
    fit = solve_gee(pseudo, link, options or GeeOptions(link=link))
    if not fit.converged:
        raise ConvergenceError(
            f"GEE did not converge after {fit.iterations} iterations "
            f"(residual {fit.residual_norm:.3g})"
        )
    X = data.design()
    ids, refits = [], []
    for cid, idx in data.cluster_indices():
        ids.append(cid)
        try:
            b, se = fit_fixed_effect(pseudo.response[idx], X[idx], link)
            refits.append((float(b[1]), float(se[1])))
        except (ArithmeticError, ValueError):
            refits.append(None)
    pooled = pv_method_pooling(fit, refits, alpha, ids)
    z = z_value(alpha)
    est, se = float(fit.beta[1]), float(fit.se_beta[1])
    raw = {cid: r for cid, r in zip(ids, refits) if r is not None}
    entries = {e.cluster_id: e for e in pooled.per_cluster}
    return AnalysisReport(
        "pv", data.tau, fit.link, alpha, Overall(est, se, est - z * se, est + z * se),
        pooled.sigma_v_sq, _rows(data, entries, raw, z, alpha),
        [data.label(c) for c in pooled.excluded],
    )


def analyze_ipcw(data: Dataset, link="identity", alpha: float = 0.05) -> AnalysisReport:
    fits, failures = ipcw_fit_all(data, link)
    pooled = ipcw_method_pooling(fits, alpha, excluded=list(failures))
    z = z_value(alpha)
    ses = np.array([f.se[1] for f in fits])
    se = 1.0 / math.sqrt(float(np.sum(1.0 / (ses ** 2 + pooled.sigma_v_sq))))
    est = pooled.pooled_random
    raw = {f.cluster_id: (float(f.beta[1]), float(f.se[1])) for f in fits}
    entries = {e.cluster_id: e for e in pooled.per_cluster}
    kind = link if isinstance(link, str) else link.kind
    return AnalysisReport(
        "ipcw", data.tau, kind, alpha, Overall(est, se, est - z * se, est + z * se),
        pooled.sigma_v_sq, _rows(data, entries, raw, z, alpha),
        [data.label(c) for c in failures],
    )


def analyze(data: Dataset, method: str = "pv", link="identity", alpha: float = 0.05,
            **kwargs) -> AnalysisReport:
    if method == "pv":
        return analyze_pv(data, link, alpha, **kwargs)
    if method == "ipcw":
        return analyze_ipcw(data, link, alpha)
    raise ValueError(f"unknown method {method!r}")
