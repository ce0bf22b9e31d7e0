"""Command line front end: ``bdq run | report | validate-config``.

Exit codes: 0 all checks pass, 1 some check failed, 2 the configuration
does not parse, 3 the run raised.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .gff import save_ensemble

EXIT_OK, EXIT_FAIL, EXIT_PARSE, EXIT_FAULT = 0, 1, 2, 3

DATA_DICTIONARY = """\
Files written by a bdq run
==========================

manifest.json
    config        echo of every configuration value after defaults
    code_version  package version and a digest of the package sources
    environment   python, numpy, scipy, platform, worker count
    status        "incomplete" while running, then "complete" or "failed"
    wall_clock_s  elapsed seconds (the only non-deterministic field)
    checks        list of {name, value, se, tolerance, pass}
    exit_code     0 pass, 1 check failure, 3 runtime fault

checks.csv
    name       check identifier
    value      measured quantity (dimensionless unless the check says otherwise)
    se         one standard error of value; 0 for deterministic quantities
    tolerance  human-readable acceptance rule
    pass       true or false

sweep.csv  (long format, one row per measured point)
    experiment  experiment id
    parameter   point label, e.g. "L=16:lhs" or "hbar=0.5:value"
    value       estimate
    se          one standard error

<table>.csv
    experiment-specific tables; column names are listed in the header row.
    Field values are in lattice units (a sets length); energies and values
    of log-partition type quantities are dimensionless.

<name>.bdqe
    binary noise ensembles: 52-byte little-endian header
    (magic "BDQE", L, a, m, n_t, seed, n_samples) followed by float64
    standard normals of shape (n_samples, n_t, L, L) in C order.
"""


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def code_version() -> dict:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"package": __version__, "source_sha256": h.hexdigest()}


def environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "platform": platform.platform(), "machine": platform.machine(),
            "workers": os.environ.get("BDQ_WORKERS", "1")}


def run_dir_for(cfg: RunConfig) -> Path:
    digest = hashlib.sha256(cfg.text.encode()).hexdigest()[:10]
    return Path(cfg.output) / f"{cfg.experiment}-seed{cfg.seed}-{digest}"


def _write_manifest(path: Path, manifest: dict) -> None:
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_run(path: str, output: str | None = None) -> int:
    try:
        cfg = load_config(path)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    if output:
        cfg.output = output
    out = run_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.echo(), "code_version": code_version(), "environment": environment(),
                "status": "incomplete", "checks": [], "wall_clock_s": None, "exit_code": None}
    _write_manifest(out, manifest)
    _atomic_write(out / "data_dictionary.txt", DATA_DICTIONARY)
    start = time.perf_counter()
    from .experiments import run_experiment

    try:
        res = run_experiment(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        manifest.update(status="failed", error=str(e), exit_code=EXIT_PARSE,
                        wall_clock_s=time.perf_counter() - start)
        _write_manifest(out, manifest)
        return EXIT_PARSE
    except Exception as e:  # noqa: BLE001 - any fault ends the run with exit 3
        traceback.print_exc()
        manifest.update(status="failed", error=f"{type(e).__name__}: {e}", exit_code=EXIT_FAULT,
                        wall_clock_s=time.perf_counter() - start)
        _write_manifest(out, manifest)
        return EXIT_FAULT

    for t in res.tables:
        _atomic_write(out / f"{t.name}.csv", _csv_text(t.header, t.rows))
    _atomic_write(out / "checks.csv", _csv_text(["name", "value", "se", "tolerance", "pass"],
                                                [[c.name, c.value, c.se, c.tolerance, c.passed] for c in res.checks]))
    _atomic_write(out / "sweep.csv", _csv_text(["experiment", "parameter", "value", "se"],
                                               [[cfg.experiment, p, v, s] for p, v, s in res.sweep]))
    for name, spec, n_t, seed, data in res.ensembles:
        save_ensemble(out / f"{name}.bdqe", spec, n_t, seed, data)
    code = EXIT_OK if res.passed else EXIT_FAIL
    manifest.update(status="complete", checks=[c.as_dict() for c in res.checks], exit_code=code,
                    wall_clock_s=time.perf_counter() - start)
    _write_manifest(out, manifest)
    n_pass = sum(c.passed for c in res.checks)
    print(f"{cfg.experiment}: {n_pass}/{len(res.checks)} checks passed -> {out}")
    for c in res.checks:
        if not c.passed:
            print(f"  FAIL {c.name}: value={c.value:.6g} se={c.se:.3g} ({c.tolerance})")
    return code


def cmd_validate(path: str) -> int:
    try:
        cfg = load_config(path)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    print(json.dumps(cfg.echo(), indent=2, sort_keys=True))
    return EXIT_OK


def _collect(dirs) -> list[tuple[str, dict | None, str]]:
    found = []
    for d in dirs:
        d = Path(d)
        cands = [d] if (d / "manifest.json").exists() else sorted(p.parent for p in d.glob("*/manifest.json"))
        if not cands:
            found.append((str(d), None, "missing manifest"))
        for c in cands:
            try:
                m = json.loads((c / "manifest.json").read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                found.append((str(c), None, f"unreadable manifest: {e}"))
                continue
            found.append((str(c), m, "" if m.get("status") == "complete" else f"status {m.get('status')}"))
    return found


def cmd_report(dirs, output: str | None = None) -> int:
    runs = _collect(dirs)
    if not runs:
        print("error: no run directories given", file=sys.stderr)
        return EXIT_FAIL
    summary, long_rows, lines = [], [], []
    any_fail = False
    for path, m, problem in runs:
        if m is None or problem:
            any_fail = True
            exp = m["config"]["experiment"] if m else ""
            summary.append([path, exp, 0, 0, "false", problem])
            lines.append(f"FLAG  {path}: {problem}")
            continue
        checks = m["checks"]
        n_pass = sum(1 for c in checks if c["pass"])
        ok = n_pass == len(checks)
        any_fail |= not ok
        exp = m["config"]["experiment"]
        summary.append([path, exp, n_pass, len(checks), "true" if ok else "false", ""])
        lines.append(f"{'PASS' if ok else 'FAIL'}  {exp:<17} {n_pass}/{len(checks)}  {path}")
        for c in checks:
            if not c["pass"]:
                lines.append(f"      failed {c['name']}: {c['tolerance']}")
        sweep = Path(path) / "sweep.csv"
        if sweep.exists():
            with open(sweep, newline="", encoding="utf-8") as fh:
                long_rows.extend(list(csv.reader(fh))[1:])
    dest = Path(output) if output else Path(".")
    dest.mkdir(parents=True, exist_ok=True)
    _atomic_write(dest / "summary.csv", _csv_text(["run", "experiment", "passed", "checks", "pass", "flag"], summary))
    _atomic_write(dest / "sweeps_long.csv", _csv_text(["experiment", "parameter", "value", "se"], long_rows))
    text = "\n".join(lines) + "\n"
    _atomic_write(dest / "summary.txt", text)
    print(text, end="")
    return EXIT_FAIL if any_fail else EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bdq", description="Variational field theory experiments on the lattice.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run the experiment named in a config file")
    r.add_argument("config")
    r.add_argument("--output", help="override [run] output")
    v = sub.add_parser("validate-config", help="parse a config and print it with defaults filled in")
    v.add_argument("config")
    rep = sub.add_parser("report", help="merge finished runs into a summary")
    rep.add_argument("dirs", nargs="+")
    rep.add_argument("--output", help="directory for summary files (default: current)")
    args = ap.parse_args(argv)
    if args.cmd == "run":
        return cmd_run(args.config, args.output)
    if args.cmd == "validate-config":
        return cmd_validate(args.config)
    return cmd_report(args.dirs, args.output)


if __name__ == "__main__":
    sys.exit(main())
