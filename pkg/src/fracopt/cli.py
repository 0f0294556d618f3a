"""Command line interface: ``fracopt run`` and ``fracopt report``.

Exit codes: 0 success, 2 invalid input (configuration, trace file or
output path), 3 numerical failure.
"""

import argparse
import datetime
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .afem import TRACE_COLUMNS, fit_rate, format_row, parse_trace, run_afem
from .config import format_config, parse_config
from .errors import (ClosureOverflow, FracoptError, InsufficientData, MaxIterations,
                     NonConvergence, NotPositiveDefinite, ParseError, ValidationError)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (NonConvergence, MaxIterations, NotPositiveDefinite, ClosureOverflow,
                    np.linalg.LinAlgError, FloatingPointError)
RATE_TARGET = -1.0 / 3.0
RATE_BAND = (-0.43, -0.23)
CONTRIBUTIONS = ("total", "E_V", "E_P", "E_Z", "E_Lambda")


@dataclass
class RunManifest:
    """What a run read, wrote and how it ended."""

    config: str
    started: str
    finished: str = ""
    status: str = "running"
    error: str = ""
    version: str = __version__
    artifacts: dict = field(default_factory=dict)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_control(path, quad, base):
    """Plain-text cellwise control dump: one ``Z Lambda`` pair per triangle."""
    with open(path, "w") as fh:
        fh.write(f"triangles {base.n_triangles}\n")
        for z, lam in zip(quad.Z, quad.Lambda):
            fh.write(f"{float(z)!r} {float(lam)!r}\n")


def run(config_path, out_dir, jobs=1, enforce_grading=False, vtk=False, timings=False,
        log=print, observer=None):
    """Execute one adaptive run and write its artifacts.

    Returns ``(manifest, trace)``.
    """
    cfg = parse_config(config_path)
    if enforce_grading:
        cfg.enforce_grading = True
    cfg.record_time = bool(timings)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir!r}: {exc.strerror}") from exc

    manifest = RunManifest(config=format_config(cfg), started=_now())
    trace_path = os.path.join(out_dir, "trace.csv")
    manifest_path = os.path.join(out_dir, "manifest.json")
    try:
        fh = open(trace_path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {trace_path!r}: {exc.strerror}") from exc
    manifest.artifacts["trace"] = trace_path

    def on_row(row):
        fh.write(format_row(row))
        fh.flush()
        log(f"iter {row['iter']:3d}  nT={row['nT_base']:7d}  M={row['M']:4d}  "
            f"total={row['total']:.4e}  as_iters={row['as_iters']}")

    with fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        try:
            trace = run_afem(cfg, jobs=jobs, on_row=on_row, observer=observer)
        except Exception as exc:
            manifest.status = "failed"
            manifest.error = f"{type(exc).__name__}: {exc}"
            manifest.finished = _now()
            manifest.write(manifest_path)
            raise

    final = trace.final
    base = final["mesh"].base
    mesh_path = os.path.join(out_dir, "mesh.txt")
    control_path = os.path.join(out_dir, "control.txt")
    base.dump(mesh_path)
    write_control(control_path, final["quad"], base)
    manifest.artifacts.update(mesh=mesh_path, control=control_path)
    if vtk:
        vtk_path = os.path.join(out_dir, "solution.vtk")
        system = final["system"]
        trace_v = np.zeros(base.n_vertices)
        trace_v[system.free] = system.space.to_grid(final["quad"].V)[:, 0]
        base.write_vtk(vtk_path,
                       cell_data={"Z": final["quad"].Z, "Lambda": final["quad"].Lambda,
                                  "indicator": final["estimate"].element_indicators(base)},
                       point_data={"trace_V": trace_v})
        manifest.artifacts["vtk"] = vtk_path
    manifest.status = "ok"
    manifest.finished = _now()
    manifest.artifacts["manifest"] = manifest_path
    manifest.write(manifest_path)
    return manifest, trace


def rate_table(rows, window=5):
    """Fitted slopes per contribution and the overall verdict.

    Contributions that vanish identically over the window are reported as
    not applicable (``None``) and do not enter the verdict. A contribution
    that is zero on only part of the window has no slope (``nan``) and
    fails the verdict.
    """
    if not rows:
        raise InsufficientData("trace has no rows")
    results = {"total": fit_rate(rows, window, "total")}
    for name in CONTRIBUTIONS[1:]:
        vals = np.array([r[name] for r in rows[-window:]], dtype=float)
        if np.all(vals == 0.0):
            results[name] = None
        elif np.all(vals > 0.0):
            results[name] = fit_rate(rows, window, name)
        else:
            results[name] = float("nan")
    slopes = [v for v in results.values() if v is not None]
    verdict = all(RATE_BAND[0] <= v <= RATE_BAND[1] for v in slopes)
    return results, verdict


def format_report(results, verdict, window):
    lines = [f"fitted slope vs #T_Y over the last {window} iterations "
             f"(target {RATE_TARGET:.4f}, accepted {RATE_BAND[0]} .. {RATE_BAND[1]})"]
    for name, v in results.items():
        if v is None:
            shown = "n/a (identically zero)"
        elif np.isnan(v):
            shown = "undefined (zero on part of the window)"
        else:
            shown = f"{v:+.4f}"
        lines.append(f"  {name:<9s} {shown}")
    lines.append(f"verdict: {'PASS' if verdict else 'FAIL'}")
    return "\n".join(lines) + "\n"


def report(trace_path, out=None, window=5):
    with open(trace_path, newline="") as fh:
        rows = parse_trace(fh.read())
    results, verdict = rate_table(rows, window)
    text = format_report(results, verdict, window)
    if out is not None:
        with open(out, "w") as fh:
            fh.write(text)
    return text, results, verdict


def build_parser():
    parser = argparse.ArgumentParser(prog="fracopt",
                                     description="Adaptive sparse control of fractional diffusion.")
    parser.add_argument("--version", action="version", version=f"fracopt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the adaptive loop for one configuration")
    p_run.add_argument("config")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--jobs", type=int, default=1, help="estimator worker threads")
    p_run.add_argument("--enforce-grading", action="store_true",
                       help="raise M until the grading condition holds")
    p_run.add_argument("--vtk", action="store_true", help="also write solution.vtk")
    p_run.add_argument("--timings", action="store_true",
                       help="fill the seconds column (makes trace.csv run-dependent)")
    p_run.add_argument("--quiet", action="store_true")

    p_rep = sub.add_parser("report", help="fit convergence rates of a trace")
    p_rep.add_argument("trace")
    p_rep.add_argument("--out", default=None, help="also write the table to this file")
    p_rep.add_argument("--window", type=int, default=5)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    err = sys.stderr
    try:
        if args.command == "run":
            if args.jobs < 1:
                raise ValidationError("--jobs must be at least 1")
            logger = (lambda *a, **k: None) if args.quiet else print
            manifest, _ = run(args.config, args.out, jobs=args.jobs,
                              enforce_grading=args.enforce_grading, vtk=args.vtk,
                              timings=args.timings, log=logger)
            if not args.quiet:
                print(f"wrote {manifest.artifacts['trace']}")
        else:
            text, _, _ = report(args.trace, args.out, args.window)
            sys.stdout.write(text)
    except (ParseError, ValidationError, InsufficientData) as exc:
        print(f"fracopt: invalid input: {exc}", file=err)
        return EXIT_INVALID
    except NUMERICAL_ERRORS as exc:
        print(f"fracopt: numerical failure: {type(exc).__name__}: {exc}", file=err)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"fracopt: {exc}", file=err)
        return EXIT_INVALID
    except FracoptError as exc:
        print(f"fracopt: {type(exc).__name__}: {exc}", file=err)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
