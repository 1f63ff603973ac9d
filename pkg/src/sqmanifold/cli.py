"""``sqml`` command line: run experiment configs and summarize their results.

Exit codes: 0 success, 1 configuration error (schema or violated hypothesis),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np
import yaml
from scipy import stats

from . import __version__
from .experiments import KINDS, check_feasible, closed_form_budget
from .routines import HypothesisError

log = logging.getLogger("sqml")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
EMPTY_MARKER = "# empty: no records"

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "sqml experiment configuration",
    "type": "object",
    "required": ["kind", "params", "seeds"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": sorted(KINDS)},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["sphere"]},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "tilt": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                "frame": {"enum": ["random", "canonical"]},
                "through_origin": {"type": "boolean"},
                "center": {"type": "array", "items": {"type": "number"}},
            },
        },
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 2},
                "d": {"type": "integer", "minimum": 1},
                "rch": {"type": "number", "exclusiveMinimum": 0},
                "f_min": {"type": "number", "exclusiveMinimum": 0},
                "f_max": {"type": "number", "exclusiveMinimum": 0},
                "L": {"type": "number", "minimum": 0},
                "R": {"type": "number", "exclusiveMinimum": 0},
                "alpha": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "k": {"type": "integer", "minimum": 2},
                "rank": {"type": "integer", "minimum": 1},
                "q": {"type": "integer", "minimum": 1},
                "frame_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
        },
        "tau": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "eps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "noise": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "adversary": {"enum": ["exact", "rounding", "worst-sign"]},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "probes": {"type": "integer", "minimum": 1},
        "output": {"type": "string"},
        "constants": {"type": "object", "additionalProperties": {"type": "number"}},
        "clutter": {
            "type": "object",
            "required": ["beta"],
            "additionalProperties": False,
            "properties": {
                "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "half_width": {"type": "number", "exclusiveMinimum": 0},
                "bank_size": {"type": "integer", "minimum": 100},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Read a YAML (or JSON) config and validate it against the schema."""
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config schema violation at {where}: {exc.message}") from exc
    p = cfg["params"]
    if cfg["kind"] in ("estimate-fixed", "estimate-ball", "routine-bench") and not {"n", "d"} <= set(p):
        raise ConfigError("estimation kinds need params.n and params.d")
    if "n" in p and "d" in p and not p["d"] < p["n"]:
        raise ConfigError("need d < n")
    if cfg["kind"] == "estimate-ball" and "R" not in p:
        raise ConfigError("estimate-ball needs params.R")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _finite(obj):
    """Replace non-finite floats by strings so every numeric field stays finite."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _run_one(args):
    cfg, seed = args
    return KINDS[cfg["kind"]](cfg, seed)


def thread_count() -> int:
    raw = os.environ.get("SQML_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SQML_THREADS must be an integer, got {raw!r}") from None


def execute(cfg: dict, out_dir: Path) -> list[dict]:
    """Run every seed of ``cfg`` and write results.jsonl, timings.jsonl, summary.csv, long.csv."""
    check_feasible(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    jobs = [(cfg, s) for s in cfg["seeds"]]
    workers = min(thread_count(), len(jobs)) if jobs else 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(j) for j in jobs]
    records, timings = [], []
    # single writer: results are collected in seed order regardless of completion order
    for out in outputs:
        for rec in out.records:
            records.append(_finite({"schema_version": SCHEMA_VERSION, "kind": cfg["kind"], "config_hash": digest,
                                    "code_version": __version__, "config": cfg, **rec}))
        for t in out.timings:
            timings.append({"config_hash": digest, **_finite(t)})
    with open(out_dir / "results.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    with open(out_dir / "timings.jsonl", "w") as fh:
        for t in timings:
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    write_summary(records, out_dir / "summary.csv")
    write_long(records, out_dir / "long.csv")
    return records


_KEYS = ("seed", "tau", "eps", "noise", "k", "constant")


def _row_keys(rec: dict) -> dict:
    return {k: rec[k] for k in _KEYS if k in rec}


def write_summary(records: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        if not records:
            fh.write(EMPTY_MARKER + "\n")
            return
        metric_names = sorted({m for r in records for m in r.get("metrics", {})})
        key_names = [k for k in _KEYS if any(k in r for r in records)]
        w = csv.writer(fh)
        w.writerow(["config_hash", "kind"] + key_names + metric_names)
        for r in records:
            w.writerow([r["config_hash"], r["kind"]] + [r.get(k, "") for k in key_names]
                       + [r["metrics"].get(m, "") for m in metric_names])


def write_long(records: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        if not records:
            fh.write(EMPTY_MARKER + "\n")
            return
        w = csv.writer(fh)
        w.writerow(["config_hash", "kind", "seed", "tau", "eps", "group", "metric", "value"])
        for r in records:
            group = r.get("constant", r.get("noise", ""))
            for m, v in sorted(r.get("metrics", {}).items()):
                w.writerow([r["config_hash"], r["kind"], r.get("seed", ""), r.get("tau", ""), r.get("eps", ""),
                            group, m, v])


# --- report ------------------------------------------------------------------------------
def slope_fit(x, y) -> tuple[float, float]:
    """Least-squares slope of log y against log x, with its standard error."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 2 or np.ptp(lx) == 0:
        return math.nan, math.nan
    fit = stats.linregress(lx, ly)
    return float(fit.slope), float(fit.stderr) if len(lx) > 2 else 0.0


def load_records(directory: Path) -> list[dict]:
    path = directory / "results.jsonl"
    if not path.exists():
        raise ConfigError(f"no results.jsonl in {directory}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report_tables(records: list[dict]) -> dict[str, list[list]]:
    """Per-kind tables as lists of rows (first row is the header)."""
    tables: dict[str, list[list]] = {}
    by_kind: dict[str, list[dict]] = {}
    for r in records:
        for field in ("kind", "config_hash", "metrics"):
            if field not in r:
                raise ConfigError(f"record is missing field {field!r}")
        by_kind.setdefault(r["kind"], []).append(r)
    for kind, recs in sorted(by_kind.items()):
        if kind in ("estimate-fixed", "estimate-ball"):
            rows = [["seed", "tau", "slope", "stderr", "expected", "max_hausdorff_over_eps", "budget_ratio"]]
            groups: dict = {}
            for r in recs:
                groups.setdefault((r["seed"], r["tau"]), []).append(r)
            for (seed, tau), g in sorted(groups.items()):
                g = sorted(g, key=lambda r: -r["eps"])
                slope, err = slope_fit([1.0 / r["eps"] for r in g], [r["metrics"]["queries_used"] for r in g])
                ratios = []
                for r in g:
                    budget = closed_form_budget(r, r["config"])
                    if budget:
                        ratios.append(r["metrics"]["seed_queries"] / budget)
                d = r["config"]["params"]["d"]
                rows.append([seed, tau, slope, err, d / 2.0,
                             max(r["metrics"]["hausdorff_over_eps"] for r in g),
                             max(ratios) if ratios else ""])
            tables[kind] = rows
        elif kind == "routine-bench":
            rows = [["seed", "tau", "eps", "projection_ratio", "tangent_ratio", "projection_budget_ratio",
                     "tangent_budget_ratio"]]
            for r in recs:
                m = r["metrics"]
                rows.append([r["seed"], r["tau"], r["eps"], m["projection_error"] / m["projection_precision"],
                             m["tangent_angle"] / m["tangent_precision"],
                             m["projection_queries"] / m["projection_budget"],
                             m["tangent_queries"] / m["tangent_budget"]])
            tables[kind] = rows
        elif kind == "matrix-recovery":
            rows = [["noise", "runs", "max_error", "median_error", "max_error_over_noise"]]
            groups = {}
            for r in recs:
                groups.setdefault(r["noise"], []).append(r["metrics"])
            for xi, ms in sorted(groups.items()):
                errs = [m["frobenius_error"] for m in ms]
                rows.append([xi, len(ms), max(errs), float(np.median(errs)),
                             max(m["error_over_noise"] for m in ms)])
            tables[kind] = rows
        elif kind == "lecam":
            rows = [["tau", "tv", "tv_bound", "tv_ratio", "hausdorff", "hausdorff_bound"]]
            for r in recs:
                m = r["metrics"]
                rows.append([r["tau"], m["tv"], m["tv_bound"], m["tv_ratio"], m["hausdorff"], m["hausdorff_bound"]])
            tables[kind] = rows
        elif kind == "packing-bound":
            rows = [["tau", "slope_vs_inverse_eps", "stderr"]]
            groups = {}
            for r in recs:
                groups.setdefault(r["tau"], []).append(r)
            for tau, g in sorted(groups.items()):
                slope, err = slope_fit([1.0 / r["eps"] for r in g], [r["metrics"]["fixed_point_bound"] for r in g])
                rows.append([tau, slope, err])
            tables[kind] = rows
        elif kind == "calibrate":
            rows = [["constant", "k", "max_value"]]
            groups = {}
            for r in recs:
                groups.setdefault((r["constant"], r.get("k", "")), []).append(r["metrics"]["value"])
            for (name, k), vals in sorted(groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
                rows.append([name, k, max(vals)])
            tables[kind] = rows
    return tables


def write_report(directory: Path, stream=None) -> dict:
    stream = sys.stdout if stream is None else stream
    records = load_records(directory)
    tables = report_tables(records)
    if not tables:
        print(EMPTY_MARKER, file=stream)
        (directory / "report.csv").write_text(EMPTY_MARKER + "\n")
        return tables
    for kind, rows in tables.items():
        path = directory / f"report_{kind}.csv"
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        print(f"== {kind} ==", file=stream)
        if len(rows) == 1:
            print(EMPTY_MARKER, file=stream)
        for row in rows:
            print("  ".join(f"{v:.4g}" if isinstance(v, float) else str(v) for v in row), file=stream)
    return tables


# --- entry point -------------------------------------------------------------------------
def _output_dir(cfg: dict, override: str | None) -> Path:
    return Path(override or cfg.get("output") or "sqml-results")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sqml", description="Statistical-query manifold estimation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output")
    p_rep = sub.add_parser("report", help="summarize a results directory")
    p_rep.add_argument("directory")
    p_cal = sub.add_parser("calibrate", help="run a config as a calibration sweep")
    p_cal.add_argument("config")
    p_cal.add_argument("-o", "--output")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            write_report(Path(args.directory))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "calibrate":
            cfg["kind"] = "calibrate"
        records = execute(cfg, _output_dir(cfg, args.output))
        print(f"{len(records)} records written to {_output_dir(cfg, args.output)}")
        return EXIT_OK
    except (ConfigError, HypothesisError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 -- any failure during a run maps to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
