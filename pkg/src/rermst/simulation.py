"""Data generation, calibration and Monte Carlo evaluation.

Event times follow ``T = exp(beta' x + v_i) * eps`` with ``eps ~ Exp(1)`` and
a cluster effect ``v_i ~ N(0, sigma_v^2)``. Model 1 has only the group
indicator; model 2 adds ``x2 ~ N(1, 0.5^2)`` and ``x3 ~ Bernoulli(1/2)``.

Two censoring mechanisms are available:

``flag`` (default)
    each subject is independently marked censored with probability
    ``censor_prob`` and is then censored at its own event time, so ``y`` is
    always ``min(T, tau)``.
``exponential``
    independent ``C ~ Exp(rate)``; the rate is calibrated so that
    ``P(C < min(T, tau)) = censor_prob``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import CalibrationError, DomainError, HarnessError
from .gee import GeeOptions, fit_fixed_effect, solve_gee
from .ipcw import ipcw_fit_all, ipcw_fit_arrays
from .pooling import estimate_sigma_v, ipcw_method_pooling, z_value
from .pseudo import pseudo_complete_dataset, pseudo_values
from .survival import Dataset

MODEL_BETA = {
    1: (1.0, 0.5),
    2: (1.0, 0.5, 0.1, -0.5),
}
WORKERS_ENV = "RERMST_WORKERS"


@dataclass(frozen=True)
class SimConfig:
    model: int = 1
    method: str = "pv"
    sigma_v: float = 0.3
    censor_prob: float = 0.1
    clusters: int = 5
    n_total: int = 400
    tau: float = 5.0
    reps: int = 1000
    seed: int = 20240501
    reference_mode: bool = False
    censoring: str = "flag"
    censor_rate: float | None = None
    link: str = "identity"
    alpha: float = 0.05
    literal_ci: bool = False
    coefficients: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.model not in MODEL_BETA:
            raise DomainError(f"model must be 1 or 2, got {self.model}")
        if self.method not in ("pv", "ipcw"):
            raise DomainError(f"method must be 'pv' or 'ipcw', got {self.method!r}")
        if not 0 < self.censor_prob < 1:
            raise DomainError("censor_prob must lie in (0, 1)")
        if self.censoring not in ("flag", "exponential"):
            raise DomainError(f"unknown censoring mechanism {self.censoring!r}")
        if self.clusters < 1 or self.n_total < self.clusters:
            raise DomainError("need at least one subject per cluster")
        if self.reps < 1:
            raise DomainError("reps must be positive")
        if self.sigma_v < 0 or not self.tau > 0:
            raise DomainError("sigma_v must be nonnegative and tau positive")
        if self.coefficients is not None and len(self.coefficients) != len(MODEL_BETA[self.model]):
            raise DomainError(f"model {self.model} needs {len(MODEL_BETA[self.model])} coefficients")

    @property
    def beta(self):
        """True coefficients; ``coefficients`` overrides the model defaults."""
        return MODEL_BETA[self.model] if self.coefficients is None else tuple(self.coefficients)

    @property
    def true_sigma_v_sq(self):
        return 0.0 if self.reference_mode else self.sigma_v ** 2


@dataclass
class TrueValueRecord:
    model: int
    method: str
    censor_prob: float
    n_calibration: int
    beta1_bar: float
    se: float = float("nan")
    censoring: str = "flag"
    censor_rate: float | None = None


@dataclass
class SimMetrics:
    bias_beta1: float
    mse_beta1: float
    coverage_beta1: float
    coverage_mcse: float
    ci_length_beta1: float
    bias_sigma_v_sq: float
    mse_sigma_v_sq: float
    reps_used: int
    failures: int
    partial_failures: int = 0
    mean_beta1: float = float("nan")
    mean_sigma_v_sq: float = float("nan")
    sd_sigma_v_sq: float = float("nan")


def cluster_sizes(n_total: int, clusters: int) -> np.ndarray:
    """Even split; the remainder goes to the lowest-indexed clusters."""
    base, extra = divmod(n_total, clusters)
    return np.array([base + (k < extra) for k in range(clusters)], dtype=np.int64)


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for replicate ``index``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _draw_subjects(config: SimConfig, rng, n, cluster):
    """Raw event times and design columns (cluster effects included)."""
    if config.reference_mode:
        v = np.zeros(config.clusters)
    else:
        v = rng.normal(0.0, config.sigma_v, size=config.clusters)
    group = (rng.random(n) < 0.5).astype(float)
    beta = config.beta
    eta = beta[0] + beta[1] * group
    covs = np.empty((n, 0))
    if config.model == 2:
        x2 = rng.normal(1.0, 0.5, size=n)
        x3 = (rng.random(n) < 0.5).astype(float)
        eta = eta + beta[2] * x2 + beta[3] * x3
        covs = np.column_stack([x2, x3])
    eps = -np.log1p(-rng.random(n))  # inverse CDF of Exp(1)
    T = np.exp(eta + v[cluster - 1]) * eps
    return T, group, covs


def simulate_raw(config: SimConfig, rng, n=None, single_cluster=False):
    """Draw one dataset and keep the latent event and censoring information.

    Returns a dict with ``T``, ``censored`` (the censoring mechanism fired
    before ``min(T, tau)``), ``y``, ``delta``, ``group``, ``covariates`` and
    ``cluster``.
    """
    n = config.n_total if n is None else n
    if single_cluster:
        cluster = np.ones(n, dtype=np.int64)
        config = replace(config, clusters=1)
    else:
        cluster = np.repeat(np.arange(1, config.clusters + 1), cluster_sizes(n, config.clusters))
    T, group, covs = _draw_subjects(config, rng, n, cluster)
    u = rng.random(n)
    tau = config.tau
    if config.censoring == "flag":
        flag = u < config.censor_prob
        y = np.minimum(T, tau)
        delta = ((T <= tau) & ~flag).astype(np.int64)
        censored = flag & (T < tau)
    else:
        rate = config.censor_rate
        if rate is None:
            raise CalibrationError("exponential censoring needs a calibrated censor_rate")
        C = -np.log1p(-u) / rate
        bound = np.minimum(C, tau)
        y = np.minimum(T, bound)
        delta = (T <= bound).astype(np.int64)
        censored = C < np.minimum(T, tau)
    return dict(T=T, censored=censored, y=y, delta=delta, group=group,
                covariates=covs, cluster=cluster)


def generate_dataset(config: SimConfig, rng, **kwargs) -> Dataset:
    raw = simulate_raw(config, rng, **kwargs)
    names = ("x2", "x3") if config.model == 2 else ()
    return Dataset(raw["cluster"], raw["y"], raw["delta"], raw["group"], raw["covariates"],
                   config.tau, covariate_names=names)


def calibrate_censoring_rate(config: SimConfig, target: float | None = None,
                             n: int = 200_000, seed: int = 0,
                             lo: float = 1e-6, hi: float = 1e3, tol: float = 0.005) -> float:
    """Exponential censoring rate giving ``P(C < min(T, tau)) = target``.

    The probability is marginal over the cluster effect, so every calibration
    subject gets its own draw of ``v``. Bisection on log-rate with common
    random numbers keeps the censored fraction monotone in the rate.
    """
    target = config.censor_prob if target is None else target
    if not 0 < target < 1:
        raise DomainError("target must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    T, _, _ = _draw_subjects(replace(config, clusters=n, n_total=n), rng, n, np.arange(1, n + 1))
    e = -np.log1p(-rng.random(n))
    restricted = np.minimum(T, config.tau)

    def frac(rate):
        return float(np.mean(e / rate < restricted))

    f_lo, f_hi = frac(lo), frac(hi)
    if not f_lo <= target <= f_hi:
        raise CalibrationError(
            f"target {target} outside attainable range [{f_lo:.4f}, {f_hi:.4f}] "
            f"for rates in [{lo:g}, {hi:g}]"
        )
    a, b = math.log(lo), math.log(hi)
    for _ in range(200):
        mid = 0.5 * (a + b)
        if frac(math.exp(mid)) < target:
            a = mid
        else:
            b = mid
        if b - a < 1e-12:
            break
    rate = math.exp(0.5 * (a + b))
    if abs(frac(rate) - target) > tol:
        raise CalibrationError(f"calibrated fraction {frac(rate):.4f} misses target {target}")
    return rate


def prepare_config(config: SimConfig, seed: int | None = None) -> SimConfig:
    """Fill in the exponential censoring rate when it is needed and missing."""
    if config.censoring == "exponential" and config.censor_rate is None:
        rate = calibrate_censoring_rate(config, seed=config.seed if seed is None else seed)
        return replace(config, censor_rate=rate)
    return config


def _lhs(rng, m):
    """Latin hypercube sample of ``m`` uniforms: one draw per stratum, shuffled."""
    return (rng.permutation(m) + rng.random(m)) / m


def draw_calibration_sample(config: SimConfig, rng, n_per_group: int):
    """Reference-mode sample with exactly ``n_per_group`` subjects per arm.

    Every univariate draw (event-time noise, covariates, censoring) is Latin
    hypercube stratified within each arm and the flag mechanism censors
    exactly ``round(censor_prob * n_per_group)`` subjects per arm. This keeps
    the Monte Carlo error of the calibrated value well below that of simple
    random sampling at the same size.
    """
    from scipy.stats import norm

    beta = config.beta
    parts = []
    for g in (0.0, 1.0):
        m = n_per_group
        eta = np.full(m, beta[0] + beta[1] * g)
        covs = np.empty((m, 0))
        if config.model == 2:
            x2 = 1.0 + 0.5 * norm.ppf(_lhs(rng, m))
            x3 = (rng.permutation(m) < m // 2).astype(float)
            eta = eta + beta[2] * x2 + beta[3] * x3
            covs = np.column_stack([x2, x3])
        T = np.exp(eta) * -np.log1p(-_lhs(rng, m))
        if config.censoring == "flag":
            flag = rng.permutation(m) < round(config.censor_prob * m)
            y = np.minimum(T, config.tau)
            delta = ((T <= config.tau) & ~flag).astype(np.int64)
        else:
            C = -np.log1p(-_lhs(rng, m)) / config.censor_rate
            bound = np.minimum(C, config.tau)
            y, delta = np.minimum(T, bound), (T <= bound).astype(np.int64)
        parts.append((y, delta, np.full(m, g), covs))
    y, delta, group, covs = (np.concatenate(c) for c in zip(*parts))
    return y, delta, group, covs


def calibrate_true_beta(model: int = 1, method: str = "pv", censor_prob: float = 0.1,
                        n_per_group: int = 100_000, seed: int = 12345,
                        censoring: str = "flag", link: str = "identity",
                        config: SimConfig | None = None) -> TrueValueRecord:
    """Large-sample value of the group coefficient targeted by each method.

    A stratified reference-mode sample (no cluster effect) with
    ``n_per_group`` subjects per arm is analysed as a single cluster and the
    fitted group coefficient is recorded.
    """
    if config is None:
        config = SimConfig(model=model, method=method, censor_prob=censor_prob,
                           censoring=censoring, link=link, seed=seed)
    config = replace(config, reference_mode=True, clusters=1)
    config = prepare_config(config, seed=seed + 1)
    rng = np.random.default_rng(seed)
    y, delta, group, covs = draw_calibration_sample(config, rng, n_per_group)
    X = np.column_stack([np.ones(len(y)), group, covs])
    if config.method == "pv":
        pv = pseudo_values(y, delta, config.tau)[0]
        beta, se = fit_fixed_effect(pv, X, config.link)
    else:
        fit = ipcw_fit_arrays(y, delta, X, config.tau, config.link)
        beta, se = fit.beta, fit.se
    return TrueValueRecord(config.model, config.method, config.censor_prob, n_per_group,
                           float(beta[1]), float(se[1]), config.censoring, config.censor_rate)


def overall_ci(pooled_fixed: float, ses, alpha: float = 0.05, literal: bool = False):
    """Interval around the inverse-variance pooled mean.

    The half-width is ``z * (sum se^-2)^(-1/2)``. With ``literal=True`` the
    precision sum itself is used as the half-width multiplier, which is not
    dimensionally meaningful and exists for comparison only.
    """
    ses = np.asarray(ses, dtype=float)
    if ses.size == 0 or np.any(ses <= 0):
        raise DomainError("standard errors must be positive")
    z = z_value(alpha)
    precision = float(np.sum(ses ** -2.0))
    half = z * precision if literal else z / math.sqrt(precision)
    return pooled_fixed - half, pooled_fixed + half


def fit_replicate(config: SimConfig, data: Dataset):
    """Fit the configured method to one dataset.

    Returns ``(beta1, sigma_v_sq, ci_low, ci_high, n_cluster_failures)``;
    raises on a failed fit.
    """
    X = data.design()
    if config.method == "pv":
        pseudo = pseudo_complete_dataset(data)
        fit = solve_gee(pseudo, config.link, GeeOptions(link=config.link))
        if not fit.converged:
            raise HarnessError("GEE did not converge")
        refits, fails = [], 0
        for _, idx in data.cluster_indices():
            try:
                b, se = fit_fixed_effect(pseudo.response[idx], X[idx], config.link)
                refits.append((b[1], se[1]))
            except (ArithmeticError, ValueError):
                fails += 1
        refits = [r for r in refits if r[1] > 0]
        if len(refits) < 2:
            raise HarnessError("fewer than two usable cluster refits")
        _, _, _, pooled = estimate_sigma_v(refits)
        lo, hi = overall_ci(pooled, [s for _, s in refits], config.alpha, config.literal_ci)
        return float(fit.beta[1]), fit.sigma_v ** 2, lo, hi, fails
    fits, failures = ipcw_fit_all(data, config.link)
    pooled = ipcw_method_pooling(fits, config.alpha, excluded=list(failures))
    lo, hi = overall_ci(pooled.pooled_fixed, [f.se[1] for f in fits], config.alpha,
                        config.literal_ci)
    return pooled.pooled_fixed, pooled.sigma_v_sq, lo, hi, len(failures)


def run_replicate(config: SimConfig, index: int):
    rng = replicate_rng(config.seed, index)
    data = generate_dataset(config, rng)
    try:
        return fit_replicate(config, data)
    except (ArithmeticError, ValueError):
        return None


def _run_chunk(args):
    config, indices = args
    return [run_replicate(config, i) for i in indices]


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_replicates(config: SimConfig, workers: int | None = None):
    workers = default_workers() if workers is None else max(1, workers)
    indices = list(range(config.reps))
    if workers == 1:
        return _run_chunk((config, indices))
    chunks = [indices[k::workers] for k in range(workers)]
    out = [None] * config.reps
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk, res in zip(chunks, pool.map(_run_chunk, [(config, c) for c in chunks])):
            for i, r in zip(chunk, res):
                out[i] = r
    return out


def summarize(results, true_beta1: float, true_sigma_v_sq: float, max_failure_rate=0.2):
    ok = [r for r in results if r is not None]
    failures = len(results) - len(ok)
    if not ok or failures / len(results) > max_failure_rate:
        raise HarnessError(f"{failures} of {len(results)} replicates failed")
    n = len(ok)
    b = [r[0] for r in ok]
    s = [r[1] for r in ok]
    err_b = [x - true_beta1 for x in b]
    err_s = [x - true_sigma_v_sq for x in s]
    bias_b = math.fsum(err_b) / n
    mse_b = math.fsum(e * e for e in err_b) / n
    bias_s = math.fsum(err_s) / n
    mse_s = math.fsum(e * e for e in err_s) / n
    cover = sum(1 for r in ok if r[2] <= true_beta1 <= r[3]) / n
    length = math.fsum(r[3] - r[2] for r in ok) / n
    mean_s = math.fsum(s) / n
    sd_s = math.sqrt(math.fsum((x - mean_s) ** 2 for x in s) / max(n - 1, 1))
    slack = 1e-12 * max(1.0, mse_b)
    assert mse_b >= bias_b ** 2 - slack and mse_s >= bias_s ** 2 - slack
    return SimMetrics(
        bias_beta1=bias_b, mse_beta1=mse_b, coverage_beta1=cover,
        coverage_mcse=math.sqrt(cover * (1 - cover) / n), ci_length_beta1=length,
        bias_sigma_v_sq=bias_s, mse_sigma_v_sq=mse_s, reps_used=n, failures=failures,
        partial_failures=sum(1 for r in ok if r[4] > 0),
        mean_beta1=math.fsum(b) / n, mean_sigma_v_sq=mean_s, sd_sigma_v_sq=sd_s,
    )


def run_monte_carlo(config: SimConfig, true_values: TrueValueRecord | float,
                    workers: int | None = None) -> SimMetrics:
    """Evaluate bias, MSE, coverage and CI length over ``config.reps`` replicates."""
    config = prepare_config(config)
    truth = true_values.beta1_bar if isinstance(true_values, TrueValueRecord) else float(true_values)
    results = run_replicates(config, workers)
    return summarize(results, truth, config.true_sigma_v_sq)


def result_row(config: SimConfig, metrics: SimMetrics, truth: float) -> dict:
    """One row in the layout of the simulation tables."""
    return {
        "model": config.model,
        "method": config.method,
        "clusters": config.clusters,
        "censor_prob": config.censor_prob,
        "n_total": config.n_total,
        "reps": config.reps,
        "seed": config.seed,
        "censoring": config.censoring,
        "reference_mode": config.reference_mode,
        "true_beta1": truth,
        **asdict(metrics),
    }
