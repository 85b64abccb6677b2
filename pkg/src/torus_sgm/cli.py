"""Command line front end: ``torus-sgm run | verify | emit-plotdata | print-config-schema``.

Exit statuses
    0  success
    1  a verify suite had failing checks
    2  configuration error (bad config file, invalid input, unstable step)
    3  a PDE solve diverged
    4  score training diverged
    5  any other library failure (simulation, regression)
"""

import argparse
import csv
import datetime
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._jit import JIT_ENABLED
from .config import ConfigError, config_schema, load_config
from .errors import (ConfigurationError, InvalidInputError, SolverDivergedError, TorusSGMError,
                     TrainingDivergedError)

REPORT_SCHEMA = "torus-sgm-report/1"
OUT_ENV = "TORUS_SGM_OUT"

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER, EXIT_TRAINING, EXIT_OTHER = 0, 1, 2, 3, 4, 5

log = logging.getLogger("torus_sgm")


def exit_code_for(err):
    if isinstance(err, (ConfigError, ConfigurationError, InvalidInputError)):
        return EXIT_CONFIG
    if isinstance(err, SolverDivergedError):
        return EXIT_SOLVER
    if isinstance(err, TrainingDivergedError):
        return EXIT_TRAINING
    return EXIT_OTHER


def build_hash():
    """sha256 over the package sources, in sorted file order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def environment_stamp():
    return {"version": __version__, "build_hash": build_hash(), "python": platform.python_version(),
            "numpy": np.__version__, "jit": bool(JIT_ENABLED)}


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become the strings 'nan', 'inf', '-inf'."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if np.isfinite(x):
            return x
        return "nan" if np.isnan(x) else ("inf" if x > 0 else "-inf")
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return str(obj)


def payload_bytes(report):
    """Canonical serialisation of everything except the timestamp."""
    body = {k: v for k, v in report.items() if k != "timestamp"}
    return json.dumps(to_jsonable(body), sort_keys=True, separators=(",", ":")).encode()


def default_out_dir(cfg):
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{cfg.kind}-seed{cfg.seed}"


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(to_jsonable(report), sort_keys=True, indent=1) + "\n")
    tmp.replace(path)
    return path


def run(config_path, out=None, seed=None, workers=1):
    """Run one experiment and write ``report.json``; returns (exit status, report path)."""
    from .experiments import run_experiment

    try:
        cfg = load_config(config_path, seed=seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG, None
    out_dir = Path(out) if out else default_out_dir(cfg)
    report = {
        "schema": REPORT_SCHEMA,
        "config": cfg.model_dump(mode="json"),
        "environment": environment_stamp(),
        "status": "ok",
        "failure": None,
        "records": [],
        "fits": {},
        "series": {},
        "log": [],
    }
    code = EXIT_OK
    try:
        res = run_experiment(cfg, workers=max(1, int(workers)))
        report.update(records=res.records, fits=res.fits, series=res.series, log=res.log)
    except (TorusSGMError, ConfigError) as err:
        code = exit_code_for(err)
        report["status"] = "failed"
        report["failure"] = {"type": type(err).__name__, "message": str(err), "exit_code": code}
        suggestion = getattr(err, "suggestion", None)
        if suggestion is not None:
            report["failure"]["suggestion"] = suggestion
        trace = getattr(err, "trace", None)
        if trace is not None:
            report["failure"]["trace"] = list(trace)
        report["records"] = list(getattr(err, "partial_results", []) or [])
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
    report["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    path = write_report(report, out_dir)
    print(str(path))
    return code, path


def verify(suite):
    from .verify import SUITES, run_suite

    names = SUITES if suite == "all" else (suite,)
    results = [run_suite(n) for n in names]
    ok = all(r["passed"] for r in results)
    print(json.dumps(to_jsonable({"passed": ok, "suites": results}), sort_keys=True, indent=1))
    return EXIT_OK if ok else EXIT_VERIFY


def emit_plotdata(report_path, selectors=(), out=None):
    """One CSV per selected series; returns the list of written paths.

    Raises ``KeyError`` naming the available series if a selector is unknown.
    """
    report = json.loads(Path(report_path).read_text())
    available = sorted(report.get("series", {}))
    chosen = list(selectors) or available
    unknown = [s for s in chosen if s not in available]
    if unknown:
        raise KeyError(f"unknown series {unknown}; available: {available}")
    out_dir = Path(out) if out else Path(report_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    env = report.get("environment", {})
    cfg = report.get("config", {})
    written = []
    for name in chosen:
        s = report["series"][name]
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="") as f:
            f.write(f"# series: {name}\n")
            f.write("# units: " + ", ".join(f"{c}[{u or '-'}]" for c, u in zip(s["columns"], s["units"])) + "\n")
            f.write(f"# provenance: kind={cfg.get('kind')} seed={cfg.get('seed')} "
                    f"version={env.get('version')} build={env.get('build_hash', '')[:12]}\n")
            w = csv.writer(f)
            w.writerow(s["columns"])
            for row in s["rows"]:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        written.append(path)
    return written


def _parser():
    p = argparse.ArgumentParser(prog="torus-sgm", description="Score-based generative modelling on the flat torus.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a TOML config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help=f"output directory (default: config output_dir, then ${OUT_ENV}/<kind>-seed<seed>)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--workers", type=int, default=1)
    v = sub.add_parser("verify", help="run a built-in check suite")
    v.add_argument("--suite", default="all", choices=("all", "identities", "kernels", "metrics", "pde", "certificates"))
    e = sub.add_parser("emit-plotdata", help="write CSV files for report series")
    e.add_argument("report")
    e.add_argument("selectors", nargs="*", help="series names (default: all)")
    e.add_argument("--out")
    sub.add_parser("print-config-schema", help="print the JSON schema of experiment configs")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run":
        if args.seed is not None and not 0 <= args.seed < 2**64:
            print("config error: seed must be in [0, 2^64)", file=sys.stderr)
            return EXIT_CONFIG
        return run(args.config, args.out, args.seed, args.workers)[0]
    if args.command == "verify":
        return verify(args.suite)
    if args.command == "emit-plotdata":
        try:
            for path in emit_plotdata(args.report, args.selectors, args.out):
                print(str(path))
        except KeyError as err:
            print(err.args[0], file=sys.stderr)
            return EXIT_CONFIG
        except (OSError, json.JSONDecodeError) as err:
            print(f"cannot read report: {err}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    print(json.dumps(config_schema(), indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
