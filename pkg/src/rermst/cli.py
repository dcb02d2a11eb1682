"""Command-line entry point: ``rermst analyze | simulate | calibrate``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import dataio, simulation
from .analysis import analyze
from .errors import NumericalError, ValidationError
from .gee import GeeOptions

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2
FULL_SCALE_REPS = 10000


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage problems as exit status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _csv_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# Defaults live here so that a config file can fill any flag left unset.
DEFAULTS = {
    "analyze": dict(method="pv", link="identity", cluster_col="cluster", time_col="time",
                    event_col="event", group_col="group", covariate_cols=(), alpha=0.05,
                    nodes=20, tol=1e-8, max_iter=100),
    "simulate": dict(model=1, method="pv", clusters=5, n_total=400, censoring=0.1, reps=1000,
                     seed=20240501, sigma_v=0.3, tau=5.0, link="identity", alpha=0.05,
                     censoring_mechanism="flag", n_calibration=100000, calibration_seed=12345,
                     reference=False, literal_ci=False, full_scale=False),
    "calibrate": dict(model=1, method="pv", censoring=0.1, seed=12345, n_per_group=100000,
                      tau=5.0, link="identity", censoring_mechanism="flag"),
}
REQUIRED = {"analyze": ("input", "tau")}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rermst", description="Random-effect RMST models for clustered data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value file mirroring the flags")

    a = sub.add_parser("analyze", help="fit a clustered dataset")
    common(a)
    a.add_argument("--input", help="CSV with one subject per row")
    a.add_argument("--tau", type=float, help="restriction time (required)")
    a.add_argument("--method", choices=("pv", "ipcw"))
    a.add_argument("--link", choices=("identity", "log"))
    a.add_argument("--cluster-col")
    a.add_argument("--time-col")
    a.add_argument("--event-col")
    a.add_argument("--group-col")
    a.add_argument("--covariate-cols", type=_csv_list, help="comma-separated names")
    a.add_argument("--alpha", type=float)
    a.add_argument("--nodes", type=int, help="Gauss-Hermite nodes (PV method)")
    a.add_argument("--tol", type=float, help="GEE convergence tolerance")
    a.add_argument("--max-iter", type=int, help="GEE iteration limit")
    a.add_argument("--output", help="forest CSV path; a JSON mirror is written beside it")

    s = sub.add_parser("simulate", help="Monte Carlo evaluation of one design cell")
    common(s)
    s.add_argument("--model", type=int, choices=(1, 2))
    s.add_argument("--method", choices=("pv", "ipcw"))
    s.add_argument("--clusters", type=int)
    s.add_argument("--n-total", type=int)
    s.add_argument("--censoring", type=float, help="censoring probability")
    s.add_argument("--censoring-mechanism", choices=("flag", "exponential"))
    s.add_argument("--reps", type=int)
    s.add_argument("--full-scale", action="store_true", default=None,
                   help=f"{FULL_SCALE_REPS} replicates")
    s.add_argument("--seed", type=int)
    s.add_argument("--sigma-v", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--link", choices=("identity", "log"))
    s.add_argument("--alpha", type=float)
    s.add_argument("--reference", action="store_true", default=None,
                   help="drop the cluster effect")
    s.add_argument("--literal-ci", action="store_true", default=None,
                   help="precision-sum half-width, for comparison only")
    s.add_argument("--true-beta", type=float, help="skip calibration and use this value")
    s.add_argument("--n-calibration", type=int, help="subjects per group for calibration")
    s.add_argument("--calibration-seed", type=int)
    s.add_argument("--workers", type=int, help=f"default from ${simulation.WORKERS_ENV}")
    s.add_argument("--output", help="result CSV path; a JSON mirror is written beside it")

    c = sub.add_parser("calibrate", help="large-sample true value of the group coefficient")
    common(c)
    c.add_argument("--model", type=int, choices=(1, 2))
    c.add_argument("--method", choices=("pv", "ipcw"))
    c.add_argument("--censoring", type=float)
    c.add_argument("--censoring-mechanism", choices=("flag", "exponential"))
    c.add_argument("--seed", type=int)
    c.add_argument("--n-per-group", type=int)
    c.add_argument("--tau", type=float)
    c.add_argument("--link", choices=("identity", "log"))
    c.add_argument("--output", help="JSON path; printed to stdout when omitted")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _convert(action, text):
    if action.nargs == 0:
        return _bool(text)
    value = action.type(text) if action.type else text
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"invalid value {text!r} for {action.dest}")
    return value


def resolve(parser, ns) -> argparse.Namespace:
    """Fill unset flags from the config file, then from DEFAULTS."""
    sub = _subparser(parser, ns.command)
    config = dataio.read_config_file(ns.config) if ns.config else {}
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(config) - set(actions))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for dest, action in actions.items():
        if getattr(ns, dest) is not None:
            continue
        if dest in config:
            try:
                setattr(ns, dest, _convert(action, config[dest]))
            except ValueError as exc:
                raise UsageError(f"config key {dest}: {exc}") from exc
        else:
            setattr(ns, dest, DEFAULTS[ns.command].get(dest))
    missing = [d for d in REQUIRED.get(ns.command, ()) if getattr(ns, d) is None]
    if missing:
        sub.error("the following arguments are required: "
                  + ", ".join("--" + m.replace("_", "-") for m in missing))
    return ns


def _emit_json(payload, path=None):
    text = json.dumps(payload, indent=2, default=dataio._json_default)
    if path:
        try:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        except OSError as exc:
            raise ValidationError(f"cannot write {path}: {exc}") from exc
    else:
        print(text)


def cmd_analyze(ns):
    data = dataio.parse_dataset_csv(
        ns.input, ns.tau, cluster_col=ns.cluster_col, time_col=ns.time_col,
        event_col=ns.event_col, group_col=ns.group_col, covariate_cols=ns.covariate_cols,
    )
    if ns.method == "pv":
        options = GeeOptions(link=ns.link, n_nodes=ns.nodes, tol=ns.tol, max_iter=ns.max_iter)
        report = analyze(data, "pv", ns.link, ns.alpha, options=options)
    else:
        report = analyze(data, "ipcw", ns.link, ns.alpha)
    if ns.output:
        dataio.emit_forest_data(report, ns.output)
    else:
        _emit_json(report.to_dict())


def _sim_config(ns) -> simulation.SimConfig:
    if ns.full_scale:
        if ns.reps not in (DEFAULTS["simulate"]["reps"], FULL_SCALE_REPS):
            raise UsageError("--full-scale conflicts with --reps")
        ns.reps = FULL_SCALE_REPS
    return simulation.SimConfig(
        model=ns.model, method=ns.method, sigma_v=ns.sigma_v, censor_prob=ns.censoring,
        clusters=ns.clusters, n_total=ns.n_total, tau=ns.tau, reps=ns.reps, seed=ns.seed,
        reference_mode=ns.reference, censoring=ns.censoring_mechanism, link=ns.link,
        alpha=ns.alpha, literal_ci=ns.literal_ci,
    )


def cmd_simulate(ns):
    config = _sim_config(ns)
    if ns.true_beta is not None:
        truth = ns.true_beta
    else:
        truth = simulation.calibrate_true_beta(
            config.model, config.method, config.censor_prob, n_per_group=ns.n_calibration,
            seed=ns.calibration_seed, config=config,
        ).beta1_bar
    metrics = simulation.run_monte_carlo(config, truth, workers=ns.workers)
    row = simulation.result_row(config, metrics, truth)
    if ns.output:
        dataio.write_rows([row], ns.output)
    else:
        _emit_json([row])


def cmd_calibrate(ns):
    record = simulation.calibrate_true_beta(
        ns.model, ns.method, ns.censoring, n_per_group=ns.n_per_group, seed=ns.seed,
        censoring=ns.censoring_mechanism, link=ns.link,
        config=simulation.SimConfig(model=ns.model, method=ns.method, censor_prob=ns.censoring,
                                    tau=ns.tau, censoring=ns.censoring_mechanism, link=ns.link),
    )
    _emit_json(asdict(record), ns.output)


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "calibrate": cmd_calibrate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        ns = resolve(parser, ns)
        COMMANDS[ns.command](ns)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
