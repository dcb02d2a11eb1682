"""CSV ingestion and serialisation of reports and simulation results."""

from __future__ import annotations

import csv
import json
import math
import warnings
from pathlib import Path

import numpy as np

from .analysis import AnalysisReport
from .errors import ParseError, ValidationError
from .survival import Dataset

FOREST_COLUMNS = (
    "cluster", "n", "events", "censored", "estimate", "ci_low", "ci_high",
    "eb_estimate", "eb_ci_low", "eb_ci_high",
)


def fmt(x) -> str:
    """17 significant digits, enough to round-trip a double."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _number(text, what, line):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what} {text!r}", line) from None
    if math.isnan(value):
        raise ParseError(f"missing {what}", line)
    return value


def parse_dataset_csv(path, tau: float, *, cluster_col="cluster", time_col="time",
                      event_col="event", group_col="group", covariate_cols=()) -> Dataset:
    """Read one subject per row and restrict follow-up at ``tau``.

    Times beyond ``tau`` are set to ``tau`` with the event indicator cleared.
    Cluster labels are kept as text and numbered by first appearance.
    """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    covariate_cols = tuple(covariate_cols)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        seen = set()
        for h in header:
            if h in seen:
                raise ParseError(f"duplicate column {h!r}", 1)
            seen.add(h)
        required = (cluster_col, time_col, event_col, group_col) + covariate_cols
        missing = [c for c in required if c not in seen]
        if missing:
            raise ParseError(f"missing required column(s): {', '.join(missing)}", 1)
        unknown = [h for h in header if h not in required]
        if unknown:
            warnings.warn(f"ignoring unknown column(s): {', '.join(unknown)}")
        pos = {h: k for k, h in enumerate(header)}

        labels, ids = {}, []
        ys, ds, gs, xs = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line)
            label = row[pos[cluster_col]].strip()
            if not label:
                raise ParseError("empty cluster label", line)
            t = _number(row[pos[time_col]], "time", line)
            if t < 0:
                raise ParseError(f"negative time {t}", line)
            ev = _number(row[pos[event_col]], "event", line)
            if ev not in (0.0, 1.0):
                raise ParseError(f"event must be 0 or 1, got {row[pos[event_col]].strip()}", line)
            g = _number(row[pos[group_col]], "group", line)
            if g not in (0.0, 1.0):
                raise ParseError(f"group must be 0 or 1, got {row[pos[group_col]].strip()}", line)
            x = [_number(row[pos[c]], f"covariate {c}", line) for c in covariate_cols]
            ids.append(labels.setdefault(label, len(labels) + 1))
            if t > tau:
                t, ev = tau, 0.0
            ys.append(t)
            ds.append(int(ev))
            gs.append(g)
            xs.append(x)
    if not ys:
        raise ParseError("no data rows", 2)
    cov = np.array(xs, dtype=float).reshape(len(ys), len(covariate_cols))
    return Dataset(np.array(ids), np.array(ys), np.array(ds), np.array(gs), cov, tau,
                   cluster_labels=tuple(labels), covariate_names=covariate_cols)


def write_dataset_csv(data: Dataset, path, *, cluster_col="cluster", time_col="time",
                      event_col="event", group_col="group"):
    names = data.covariate_names or tuple(f"x{k + 2}" for k in range(data.covariates.shape[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([cluster_col, time_col, event_col, group_col, *names])
        for c, y, d, g, x in zip(data.cluster, data.y, data.delta, data.group, data.covariates):
            w.writerow([data.label(int(c)), fmt(y), int(d), fmt(g), *(fmt(v) for v in x)])
    return names


def forest_rows(report: AnalysisReport) -> list[dict]:
    rows = [
        dict(cluster=r.cluster, n=r.n, events=r.n_events, censored=r.n_censored,
             estimate=r.estimate, ci_low=r.ci_low, ci_high=r.ci_high,
             eb_estimate=r.eb_estimate, eb_ci_low=r.eb_ci_low, eb_ci_high=r.eb_ci_high)
        for r in report.per_cluster
    ]
    o = report.overall
    rows.append(dict(
        cluster="OVERALL",
        n=sum(r.n for r in report.per_cluster),
        events=sum(r.n_events for r in report.per_cluster),
        censored=sum(r.n_censored for r in report.per_cluster),
        estimate=o.estimate, ci_low=o.ci_low, ci_high=o.ci_high,
        eb_estimate=o.estimate, eb_ci_low=o.ci_low, eb_ci_high=o.ci_high,
    ))
    return rows


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def json_mirror_path(path) -> Path:
    return Path(path).with_suffix(".json")


def emit_forest_data(report: AnalysisReport, path):
    """Write the forest-plot CSV and a JSON mirror next to it.

    The JSON file holds the full report plus the same forest rows. Returns
    ``(csv_path, json_path)``.
    """
    path = Path(path)
    rows = forest_rows(report)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FOREST_COLUMNS)
            for row in rows:
                w.writerow([row["cluster"]] + [fmt(row[c]) for c in FOREST_COLUMNS[1:]])
        jpath = json_mirror_path(path)
        if jpath == path:
            jpath = path.with_name(path.name + ".json")
        payload = {"report": report.to_dict(), "forest": rows}
        jpath.write_text(json.dumps(payload, indent=2, default=_json_default))
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc
    return path, jpath


def read_forest_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            parsed = {"cluster": row["cluster"]}
            for c in FOREST_COLUMNS[1:4]:
                parsed[c] = int(row[c])
            for c in FOREST_COLUMNS[4:]:
                parsed[c] = float(row[c])
            out.append(parsed)
        return out


def write_rows(rows: list[dict], path):
    """CSV plus JSON mirror for simulation result rows."""
    path = Path(path)
    cols = list(rows[0])
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in rows:
                w.writerow([row[c] if isinstance(row[c], str) else
                            ("" if row[c] is None else fmt(row[c])) for c in cols])
        jpath = json_mirror_path(path)
        if jpath == path:
            jpath = path.with_name(path.name + ".json")
        jpath.write_text(json.dumps(rows, indent=2, default=_json_default))
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc
    return path, jpath


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use dashes or underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {line!r}", line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
