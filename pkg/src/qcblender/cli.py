"""Command line: qcb {covering,branch,geometry,blender,sphere,report}.

A run merges defaults, the optional --config file (TOML or JSON), the
experiment flags and --set overrides, validates the result against the
schema and writes summary.json (deterministic), metadata.json (timestamps,
threads, runtime) and CSV tables into the output directory. Exit codes:
0 all checks pass, 1 a check failed, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import jsonschema

from . import __version__
from .covering import _plain
from .parallel import set_threads

SCHEMA_VERSION = 1
KINDS = ("covering", "branch", "geometry", "blender", "sphere")

DEFAULTS = {
    "covering": {"dim": 2, "auto_tune": True, "t": None, "r": None, "t_range": [0.05, 0.5],
                 "r_range": [0.05, 0.5], "grid_per_axis": 41, "perturbation": 1e-3},
    "branch": {"dim": 2, "n_seeds": 100, "n_steps": 10000, "tie_break": "max-margin", "t_range": [0.05, 0.5],
               "r_range": [0.3, 1.0], "grid_per_axis": 41, "positive_fraction": 0.99},
    "geometry": {"dim": 2, "probes": ["key_lemma", "roundness", "distortion"], "n_seeds": 100, "n_terms": 1000,
                 "kappa": 4.0, "lambda_hi": 0.9, "C": 1.0, "alpha": 1.0, "window": [50, 500, 1000],
                 "plateau_tol": 0.05, "xi": 1e-3, "similarity_scale": 2.0, "similarity_steps": 20,
                 "negative_steps": 5, "blender_epsilon": 0.1, "blender_branches": 10,
                 "blender_ns": [10, 25, 50, 75, 100, 125, 150, 175, 200], "blender_ratio_tol": 1.1,
                 "distortion_steps": 30, "distortion_R": 0.1},
    "blender": {"dim": 2, "epsilon": 0.1, "probes": ["assumptions", "hutchinson", "ergodicity"],
                "t_range": [0.05, 0.5], "r_range": [0.1, 0.5], "grid_per_axis": 41, "perturbation": 1e-3,
                "n_points": 1000000, "rho_factor": 0.05, "seed_radius_factor": 0.01, "ergodic_steps": 60,
                "ergodic_particles": 20000, "ergodic_threshold": 0.99, "minimality_steps": 100,
                "minimality_starts": 100, "cloud_csv_points": 10000},
    "sphere": {"dim": 2, "probes": ["derivative", "normal_form", "scan"], "fd_samples": 10000, "fd_tol": 1e-6,
               "normal_form_dim": 3, "normal_form_samples": 100, "normal_form_kappa": 1.1, "n_rotations": 2,
               "rotation_seed": 7, "grid_samples": 1000, "max_word_len": 12, "refinement": 4},
}

_POS_INT = {"type": "integer", "minimum": 1}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_RANGE = {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2}
_DIM = {"type": "integer", "minimum": 2, "maximum": 5}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


PARAM_SCHEMAS = {
    "covering": _obj({"dim": _DIM, "auto_tune": {"type": "boolean"}, "t": {"type": ["number", "null"]},
                      "r": {"type": ["number", "null"]}, "t_range": _RANGE, "r_range": _RANGE,
                      "grid_per_axis": {"type": "integer", "minimum": 2}, "perturbation": _NONNEG}),
    "branch": _obj({"dim": _DIM, "n_seeds": _POS_INT, "n_steps": _POS_INT,
                    "tie_break": {"enum": ["max-margin", "first-index", "seeded-random"]}, "t_range": _RANGE,
                    "r_range": _RANGE, "grid_per_axis": {"type": "integer", "minimum": 2},
                    "positive_fraction": {"type": "number", "minimum": 0, "maximum": 1}}),
    "geometry": _obj({"dim": _DIM, "probes": {"type": "array", "minItems": 1, "uniqueItems": True,
                                              "items": {"enum": ["key_lemma", "roundness", "distortion"]}},
                      "n_seeds": _POS_INT, "n_terms": {"type": "integer", "minimum": 2}, "kappa": {"type": "number",
                                                                                                "minimum": 1},
                      "lambda_hi": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}, "C": _POS,
                      "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                      "window": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 3,
                                 "maxItems": 3},
                      "plateau_tol": _POS, "xi": _POS, "similarity_scale": {"type": "number", "exclusiveMinimum": 1},
                      "similarity_steps": _POS_INT, "negative_steps": _POS_INT,
                      "blender_epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.25},
                      "blender_branches": _POS_INT,
                      "blender_ns": {"type": "array", "items": _POS_INT, "minItems": 1},
                      "blender_ratio_tol": _POS, "distortion_steps": _POS_INT, "distortion_R": _POS}),
    "blender": _obj({"dim": _DIM, "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.25},
                     "probes": {"type": "array", "minItems": 1, "uniqueItems": True,
                                "items": {"enum": ["assumptions", "hutchinson", "ergodicity", "minimality"]}},
                     "t_range": _RANGE, "r_range": _RANGE, "grid_per_axis": {"type": "integer", "minimum": 2},
                     "perturbation": _NONNEG, "n_points": _POS_INT, "rho_factor": _POS,
                     "seed_radius_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                     "ergodic_steps": _POS_INT, "ergodic_particles": _POS_INT,
                     "ergodic_threshold": {"type": "number", "minimum": 0, "maximum": 1},
                     "minimality_steps": _POS_INT, "minimality_starts": _POS_INT,
                     "cloud_csv_points": {"type": "integer", "minimum": 0}}),
    "sphere": _obj({"dim": {"type": "integer", "minimum": 1, "maximum": 4},
                    "probes": {"type": "array", "minItems": 1, "uniqueItems": True,
                               "items": {"enum": ["derivative", "normal_form", "scan"]}},
                    "fd_samples": _POS_INT, "fd_tol": _POS, "normal_form_dim": {"type": "integer", "minimum": 2},
                    "normal_form_samples": _POS_INT, "normal_form_kappa": {"type": "number", "exclusiveMinimum": 1},
                    "n_rotations": _POS_INT, "rotation_seed": {"type": ["integer", "null"], "minimum": 0},
                    "grid_samples": _POS_INT, "max_word_len": _POS_INT, "refinement": _POS_INT}),
}

CONFIG_SCHEMA = {
    "type": "object",
    "description": "seed is a u64 master seed; sub-task k draws from SeedSequence(entropy=seed, spawn_key=(k,)) "
                   "with the counters of qcblender.experiments.SEED_KEYS, and per-item streams spawn from a task "
                   "seed the same way, never from OS entropy.",
    "properties": {"experiment": {"enum": list(KINDS)},
                   "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
                   "out": {"type": "string"}, "params": {"type": "object"}},
    "required": ["experiment", "seed", "params"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def _load_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        return json.loads(raw.decode())
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(raw.decode())


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def validate(config):
    errors = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
              for e in jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(config)]
    if not errors:
        ps = PARAM_SCHEMAS[config["experiment"]]
        errors = [f"params/{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
                  for e in jsonschema.Draft202012Validator(ps).iter_errors(config["params"])]
    if errors:
        raise ConfigError("; ".join(sorted(errors)))


def build_config(kind, file_config=None, overrides=None, seed=None):
    """Merge defaults < config file < flags, then validate."""
    cfg = {"experiment": kind, "seed": 0, "params": dict(DEFAULTS[kind])}
    if file_config:
        if "experiment" in file_config and file_config["experiment"] != kind:
            raise ConfigError(f"config is for {file_config['experiment']!r}, not {kind!r}")
        extra = set(file_config) - {"experiment", "seed", "params", "out"}
        if extra:
            raise ConfigError(f"<root>: unknown keys {sorted(extra)}")
        cfg["params"].update(file_config.get("params", {}))
        if "seed" in file_config:
            cfg["seed"] = file_config["seed"]
        if "out" in file_config:
            cfg["out"] = file_config["out"]
    cfg["params"].update(overrides or {})
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def config_hash(cfg):
    body = {"experiment": cfg["experiment"], "seed": cfg["seed"], "params": cfg["params"]}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def dumps(obj):
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _cell(v):
    if isinstance(v, float) or (hasattr(v, "dtype") and getattr(v.dtype, "kind", "") == "f"):
        return format(float(v), ".17g")
    return v if isinstance(v, str) else str(int(v)) if isinstance(v, (bool, int)) or hasattr(v, "dtype") else str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def run(cfg, out_dir, threads=1):
    """Execute a validated config; returns (exit code, summary dict)."""
    from .experiments import RUNNERS

    set_threads(threads)
    os.makedirs(out_dir, exist_ok=True)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    outcome = RUNNERS[cfg["experiment"]](cfg["params"], cfg["seed"])
    elapsed = time.perf_counter() - t0
    failed = {k: v for k, v in outcome.checks.items() if not v["passed"]}
    summary = {"schema_version": SCHEMA_VERSION, "experiment": cfg["experiment"], "seed": cfg["seed"],
               "version": __version__, "config_hash": config_hash(cfg), "params": cfg["params"],
               "checks": outcome.checks, "passed": not failed, "results": outcome.results,
               "tables": sorted(f"{n}.csv" for n in outcome.tables)}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(dumps(summary))
    for name, obj in outcome.files.items():
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(dumps(obj))
    for name, (header, rows) in outcome.tables.items():
        write_csv(os.path.join(out_dir, f"{name}.csv"), header, rows)
    meta = {"started": started.isoformat(), "finished": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": elapsed, "threads": threads, "python": sys.version.split()[0]}
    with open(os.path.join(out_dir, "metadata.json"), "w") as fh:
        fh.write(dumps(meta))
    return (1 if failed else 0), summary


# -------------------------------------------------------------------- report

def _scalars(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_scalars(v, key + "."))
        elif isinstance(v, (int, float, str, bool)) or v is None:
            out[key] = v
    return out


def report(paths, out_dir):
    """Aggregate summaries: one markdown and CSV table per experiment kind."""
    if not paths:
        raise ConfigError("no summary files matched")
    summaries = []
    for p in paths:
        with open(p) as fh:
            summaries.append((p, json.load(fh)))
    versions = {s.get("schema_version") for _, s in summaries}
    if len(versions) != 1:
        raise ConfigError(f"mixed schema versions {sorted(map(str, versions))}")
    os.makedirs(out_dir, exist_ok=True)
    by_kind = {}
    for p, s in summaries:
        by_kind.setdefault(s["experiment"], []).append((p, s))
    lines = ["# qcb report", ""]
    for kind in sorted(by_kind):
        items = by_kind[kind]
        check_names = sorted({c for _, s in items for c in s["checks"]})
        header = ["summary", "seed", "version", "config_hash", "passed"] + check_names
        rows = [[os.path.relpath(p), s["seed"], s["version"], s["config_hash"][:12], s["passed"]]
                + [s["checks"].get(c, {}).get("passed", "") for c in check_names] for p, s in items]
        write_csv(os.path.join(out_dir, f"{kind}.csv"), header, rows)
        lines += [f"## {kind}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(str(v) for v in r) + " |" for r in rows]
        lines.append("")
        if kind == "branch":
            import numpy as np
            ks = np.array([s["results"]["greedy_max_kappa"] for _, s in items])
            qs = [0.0, 0.1, 0.5, 0.9, 1.0]
            vals = np.quantile(ks, qs)
            seeds = ",".join(str(s["seed"]) for _, s in items[:5]) + ("..." if len(items) > 5 else "")
            hashes = sorted({s["config_hash"][:12] for _, s in items})
            write_csv(os.path.join(out_dir, "branch_kappa_distribution.csv"), ["quantile", "greedy_max_kappa"],
                      [[q, v] for q, v in zip(qs, vals)])
            lines += ["### greedy max kappa distribution", "",
                      f"seeds {seeds}; version {items[0][1]['version']}; config {','.join(hashes)}", "",
                      "| quantile | greedy_max_kappa |", "|---|---|"]
            lines += [f"| {q:g} | {v:.6g} |" for q, v in zip(qs, vals)]
            lines.append("")
    with open(os.path.join(out_dir, "report.md"), "w") as fh:
        fh.write("\n".join(lines))
    return by_kind


# ---------------------------------------------------------------------- args

def _add_common(sp):
    sp.add_argument("--config", help="TOML or JSON config file")
    sp.add_argument("--seed", type=int, help="master seed (u64)")
    sp.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    sp.add_argument("--out", help="output directory (QCB_OUT overrides)")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a parameter; VALUE is parsed as JSON when possible")


def parser():
    ap = argparse.ArgumentParser(prog="qcb", description="quasi-conformal blender experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind)
        _add_common(sp)
        sp.add_argument("--dim", type=int)
        if kind == "covering":
            sp.add_argument("--auto-tune", action="store_true", default=None)
            sp.add_argument("--t", type=float)
            sp.add_argument("--r", type=float)
            sp.add_argument("--grid", type=int, dest="grid_per_axis")
        if kind == "branch":
            sp.add_argument("--n-seeds", type=int)
            sp.add_argument("--n-steps", type=int)
            sp.add_argument("--tie-break")
        if kind in ("blender", "geometry"):
            sp.add_argument("--epsilon", type=float)
        if kind in ("blender", "geometry", "sphere"):
            sp.add_argument("--probe", action="append", dest="probes")
        if kind == "sphere":
            sp.add_argument("--scan", action="store_true")
    rp = sub.add_parser("report")
    rp.add_argument("summaries", nargs="+", help="summary files or glob patterns")
    rp.add_argument("--out", help="output directory (QCB_OUT overrides)")
    return ap


def _overrides(kind, a):
    ov = {}
    for key in ("dim", "t", "r", "grid_per_axis", "n_seeds", "n_steps", "tie_break", "probes"):
        v = getattr(a, key, None)
        if v is not None:
            ov[key] = v
    if getattr(a, "auto_tune", None):
        ov["auto_tune"] = True
    if getattr(a, "epsilon", None) is not None:
        ov["epsilon" if kind == "blender" else "blender_epsilon"] = a.epsilon
    if getattr(a, "scan", False):
        ov["probes"] = sorted(set(ov.get("probes", [])) | {"scan"})
    for item in a.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = _parse_value(v)
    return ov


def _fail(code, payload):
    sys.stderr.write(dumps(payload))
    return code


def main(argv=None):
    a = parser().parse_args(argv)
    env_out = os.environ.get("QCB_OUT")
    if a.command == "report":
        paths = sorted({p for pat in a.summaries for p in (glob.glob(pat) or [])})
        try:
            report(paths, env_out or a.out or "qcb_report")
        except ConfigError as exc:
            return _fail(2, {"error": "report", "message": str(exc)})
        return 0
    try:
        file_cfg = _load_file(a.config) if a.config else None
        cfg = build_config(a.command, file_cfg, _overrides(a.command, a), a.seed)
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(2, {"error": "invalid configuration", "message": str(exc)})
    if a.threads < 1:
        return _fail(2, {"error": "invalid configuration", "message": "--threads must be >= 1"})
    out_dir = env_out or a.out or cfg.get("out") or os.path.join("qcb_out", a.command)
    try:
        code, summary = run(cfg, out_dir, a.threads)
    except Exception as exc:  # construction and precondition errors surface as check failures
        return _fail(1, {"error": type(exc).__name__, "message": str(exc)})
    failed = {k: v for k, v in summary["checks"].items() if not v["passed"]}
    if failed:
        return _fail(1, {"failed_checks": failed, "summary": os.path.join(out_dir, "summary.json")})
    sys.stdout.write(dumps({"passed": True, "checks": sorted(summary["checks"]),
                            "summary": os.path.join(out_dir, "summary.json")}))
    return code


if __name__ == "__main__":
    sys.exit(main())
