"""Command line entry point.

``gradflow run <spec-file>`` integrates one configured flow and writes
``traj.csv``, ``report.json`` and ``manifest.json`` under
``<output-dir>/<run-id>/``. ``gradflow verify <suite>`` runs the property
suites. ``gradflow sweep <spec-file> --param <name> --values <csv>`` runs
one flow per value and collects ``sweep.csv``.

Exit codes: 0 when the toolkit completed (negative verdicts are reported
as data), 1 on a runtime failure, 2 on invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__, analysis, config, flow, verify
from .config import ConfigError, RunSpec

log = logging.getLogger("gradflow")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

SWEEP_HEADER = ["value", "run_id", "status", "theta", "c", "length", "converged",
                "final_energy", "exact_error"]


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by strings so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True,
                               default=_json_default) + "\n")


def manifest(spec: RunSpec) -> dict:
    return {"toolkit": "gradflow", "version": __version__, "seed": spec.seed,
            "prng": "numpy.random.PCG64", "numpy": np.__version__,
            "python": platform.python_version(), "spec": spec.to_dict()}


def exact_error(spec: RunSpec, traj: flow.Trajectory) -> float | None:
    """Max nodal error against ``exp(-t) u0`` for unforced quadratic runs."""
    if spec.energy["name"] != "quadratic" or spec.flow["forcing"] is not None:
        return None
    E = spec.build_energy()
    u0 = spec.initial_state(E)
    err = 0.0
    for k, s in zip(traj.recorded, traj.states):
        err = max(err, float(np.max(np.abs(s - math.exp(-traj.times[k]) * u0))))
    return err


def execute(spec: RunSpec) -> dict:
    """Run the flow and the analyses of ``spec``; returns a summary dict.

    Raises :class:`flow.FlowError` after writing partial artifacts.
    """
    root = Path(spec.output_dir) / spec.run_id
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "manifest.json", manifest(spec))
    E = spec.build_energy()
    u0 = spec.initial_state(E)
    fl = spec.flow
    cfg = flow.FlowConfig(fl["tau"], fl["t_end"], forcing=spec.forcing(E),
                          prox_tol=fl["prox_tol"], record_every=fl["record_every"],
                          certify=fl["certify"], slopes=fl["slopes"])
    try:
        traj = flow.run(E, u0, cfg)
    except flow.FlowError as exc:
        flow.write_trajectory(exc.partial, spec.output_dir, spec.run_id, spec.write_states)
        (root / "error.log").write_text(
            f"{exc}\n\n" + "".join(traceback.format_exception(exc)))
        raise
    flow.write_trajectory(traj, spec.output_dir, spec.run_id, spec.write_states)
    report = analysis.analysis_report(traj, E, spec.analysis)
    report["run"] = {"energy": E.name, "steps": traj.n_steps, "tau": traj.tau,
                     "final_energy": traj.energies[-1],
                     "final_slope": traj.slopes[-1]}
    err = exact_error(spec, traj)
    if err is not None:
        report["run"]["exact_error"] = err
    write_json(root / "report.json", report)
    return report


def cmd_run(args) -> int:
    try:
        spec = config.load(args.spec, args.output_dir, args.seed_override)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = execute(spec)
    except Exception as exc:  # noqa: BLE001 - reported through the exit code
        print(f"run {spec.run_id} failed: {exc}", file=sys.stderr)
        root = Path(spec.output_dir) / spec.run_id
        if not (root / "error.log").exists():
            root.mkdir(parents=True, exist_ok=True)
            (root / "error.log").write_text("".join(traceback.format_exception(exc)))
        return EXIT_RUNTIME
    kl = report.get("kl", {})
    omega = report.get("omega", {})
    print(f"run {spec.run_id}: {report['run']['steps']} steps, "
          f"E_final={report['run']['final_energy']:.6g}, theta={kl.get('theta')}, "
          f"converged={omega.get('converged')}")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.suite != "all" and args.suite not in verify.SUITES:
        print(f"unknown suite {args.suite!r}; choose from "
              f"{sorted(verify.SUITES) + ['all']}", file=sys.stderr)
        return EXIT_CONFIG
    seed = 0 if args.seed_override is None else args.seed_override
    results = verify.run_suite(args.suite, seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError:
                raise ConfigError("--values", f"{tok!r} is not a number") from None
    return out


def _sweep_one(job: tuple) -> dict:
    value, spec_dict = job
    spec = RunSpec(**spec_dict)
    row = {"value": value, "run_id": spec.run_id}
    try:
        report = execute(spec)
    except Exception as exc:  # noqa: BLE001 - one failed sub-run does not stop the sweep
        return {**row, "status": f"error: {exc}"}
    kl = report.get("kl") or {}
    length = report.get("length") or {}
    omega = report.get("omega") or {}
    return {**row, "status": "ok", "theta": kl.get("theta"), "c": kl.get("c"),
            "length": length.get("total"), "converged": omega.get("converged"),
            "final_energy": report["run"]["final_energy"],
            "exact_error": report["run"].get("exact_error")}


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def cmd_sweep(args) -> int:
    try:
        values = _parse_values(args.values)
        if not values:
            raise ConfigError("--values", "empty value list")
        try:
            raw = yaml.safe_load(Path(args.spec).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(str(args.spec), f"YAML syntax error: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "run file must be a mapping")
        base = raw.get("run_id", "sweep")
        out_dir = args.output_dir or raw.get("output_dir", "runs")
        sweep_root = Path(out_dir) / str(base)
        specs = []
        # validate every sub-run before launching any
        for i, v in enumerate(values):
            sub = config.set_param(raw, args.param, v)
            sub["run_id"] = f"{args.param.replace('.', '_')}_{i:03d}"
            specs.append(config.resolve(sub, str(sweep_root), args.seed_override))
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    jobs = [(v, s.to_dict()) for v, s in zip(values, specs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    sweep_root.mkdir(parents=True, exist_ok=True)
    with open(sweep_root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in SWEEP_HEADER])
    for r in rows:
        print(f"{args.param}={r['value']}: {r['status']} theta={r.get('theta')} "
              f"length={r.get('length')} converged={r.get('converged')}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradflow", description=__doc__.splitlines()[0])
    parser.add_argument("--output-dir", default=None, help="root directory for run artifacts")
    parser.add_argument("--jobs", type=int, default=1, help="parallel sub-runs for sweep")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace the seed given in the run file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="integrate one configured flow")
    p.add_argument("spec", help="YAML run file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("suite", help="metric, subgradient, prox, flow, analysis or all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="one run per parameter value")
    p.add_argument("spec", help="YAML run file used as a template")
    p.add_argument("--param", required=True, help="dotted field, e.g. flow.tau or energy.p")
    p.add_argument("--values", required=True, help="comma separated numbers")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
