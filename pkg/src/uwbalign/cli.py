"""Command-line entry point: ``uwbalign <subcommand> ...``.

Machine-readable JSON goes to stdout (or ``--out``); logs go to stderr.
Exit codes: 0 success, 2 input error, 3 solver non-convergence,
4 singular or unobservable configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from uwbalign import FORMAT_VERSION, __version__
from uwbalign import fim as fimlib
from uwbalign import gat, sim, vro
from uwbalign.geometry import AffineTransform7
from uwbalign.measurement import Dataset, dumps, transform_from_json

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3
EXIT_SINGULAR = 4

logger = logging.getLogger("uwbalign")


class InputError(Exception):
    pass


def _emit(doc, out: str | None) -> None:
    text = dumps(doc, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_json(path: str) -> dict:
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
        return json.loads(text)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path}: {exc}") from exc


def _load_dataset(path: str) -> Dataset:
    try:
        return Dataset.from_json_dict(_read_json(path))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _estimate_doc(est: gat.GatEstimate, runtime_ms: float) -> dict:
    return {
        "t": est.A.t.tolist(),
        "R": est.A.R.ravel().tolist(),
        "s": est.A.s,
        "sigma": [float(x) if np.isfinite(x) else None for x in est.sigma],
        "max_sigma": float(est.max_sigma) if np.isfinite(est.max_sigma) else None,
        "status": est.status.value,
        "class": est.singular_class.value if est.singular_class is not None else None,
        "unobservable_index": est.unobservable_index,
        "method": est.method,
        "iterations": est.iterations,
        "runtime_ms": runtime_ms,
    }


# --- subcommands -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.kind == "drift":
        _emit(sim.scenario_drift(n_keyframes=args.n if args.n else 60, seed=args.seed, sigma_r=args.sigma_r), args.out)
        return EXIT_OK
    if args.kind == "random-walk":
        cfg = sim.McConfig(
            R_m=(args.R_m,), trials=1, sigma_r=args.sigma_r, sigma_o=args.sigma_o, seed=args.seed, n_samples=args.n or 200
        )
        ds = sim.draw_trial(cfg, 0, 0)
    else:
        ds = sim.scenario_singular(args.kind, seed=args.seed, n=args.n or 40, sigma_r=args.sigma_r, noisy=args.noisy)
    if args.csv:
        Path(args.csv).write_text(ds.to_csv())
    _emit(ds.to_json_dict(), args.out)
    return EXIT_OK


def cmd_solve_gat(args) -> int:
    ds = _load_dataset(args.inp)
    d0 = args.d0 if args.d0 is not None else ds.d0
    if args.method != "nls" and d0 is None:
        raise InputError("--d0 is required (the dataset has no d0 field)")
    if d0 is not None and d0 < 0:
        raise InputError("--d0 must be non-negative")
    if ds.valid.sum() < 7:
        raise InputError(f"need at least 7 range samples, got {int(ds.valid.sum())}")
    try:
        est, ms = gat.timed(
            gat.estimate_gat,
            ds,
            args.method,
            d0=d0,
            seed=args.seed,
            n_starts=args.n_starts,
            accept=args.accept_sigma,
            singular=args.singular_sigma,
        )
    except gat.QcqpError as exc:
        logger.error("%s", exc)
        _emit({"status": "failed", "error": str(exc)}, args.out)
        return EXIT_NONCONVERGED
    _emit(_estimate_doc(est, ms), args.out)
    if est.status == gat.GatStatus.SINGULAR:
        return EXIT_SINGULAR
    if est.iterations >= gat.NLS_MAX_ITER and est.status != gat.GatStatus.ACCEPTED:
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_analyze_fim(args) -> int:
    ds = _load_dataset(args.inp)
    if args.theta is not None:
        A = AffineTransform7.from_theta(args.theta)
        source = "flag"
    elif args.transform is not None:
        try:
            A = transform_from_json(_read_json(args.transform))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed transform: {exc}") from exc
        source = "file"
    elif ds.truth is not None:
        A = ds.truth
        source = "truth"
    else:
        raise InputError("no transform: pass --theta or --transform, or include 'truth' in the dataset")
    sigma_r = args.sigma_r if args.sigma_r is not None else (ds.sigma_r if ds.sigma_r > 0 else 1.0)
    if sigma_r <= 0:
        raise InputError("--sigma-r must be positive")
    report = fimlib.fim(ds, A.theta(), sigma_r)
    doc = report.to_json_dict()
    doc["evaluated_at"] = source
    _emit(doc, args.out)
    return EXIT_OK if report.singular_class == fimlib.SingularClass.OBSERVABLE else EXIT_SINGULAR


def cmd_run_vro(args) -> int:
    doc = sim.scenario_drift(seed=args.seed) if args.inp is None else _read_json(args.inp)
    if args.window < 1 or args.drift_threshold <= 0 or args.epsilon_r < 0:
        raise InputError("--window >= 1, --drift-threshold > 0 and --epsilon-r >= 0 are required")
    try:
        graph, summary = sim.run_vro(
            doc, seed=args.seed, drift_threshold=args.drift_threshold, window=args.window, epsilon_r=args.epsilon_r
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    rows = sim.pose_rows(graph)
    if args.poses:
        lines = ["i,px,py,pz,vx,vy,vz"] + [",".join([str(r[0]), *map(repr, r[1:])]) for r in rows]
        Path(args.poses).write_text("\n".join(lines) + "\n")
    else:
        summary["poses"] = rows
    _emit(summary, args.out)
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    try:
        cfg = sim.McConfig(
            R_m=tuple(args.R_m),
            trials=args.trials,
            sigma_r=args.sigma_r,
            sigma_o=args.sigma_o,
            methods=tuple(args.methods),
            seed=args.seed,
            n_samples=args.n,
            n_starts=args.n_starts,
            workers=args.workers,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    results = sim.run_montecarlo(cfg)
    summary = sim.summarize(results)
    summary["config"] = {
        "R_m": list(cfg.R_m),
        "trials": cfg.trials,
        "sigma_r": cfg.sigma_r,
        "sigma_o": cfg.sigma_o,
        "methods": list(cfg.methods),
        "seed": cfg.seed,
        "n_samples": cfg.n_samples,
        "n_starts": cfg.n_starts,
    }
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(sim.results_csv(results))
        (out / "summary.json").write_text(dumps(summary, indent=2) + "\n")
        (out / "plot.tsv").write_text(sim.plot_data_tsv(summary))
    _emit(summary, args.out)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="uwbalign", description="Range-aided alignment of up-to-scale odometry.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"uwbalign {__version__} (format {FORMAT_VERSION})")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic dataset or scenario", formatter_class=fmt)
    s.add_argument("--kind", default="random-walk", choices=["random-walk", *sim.SINGULAR_KINDS, "drift"], help="what to generate")
    s.add_argument("--R-m", dest="R_m", type=float, default=2.0, help="random-walk radius (m)")
    s.add_argument("--n", type=int, default=None, help="samples; None means 200 walk, 40 singular, 60 drift")
    s.add_argument("--sigma-r", type=float, default=0.1, help="range noise std (m)")
    s.add_argument("--sigma-o", type=float, default=0.001, help="odometry noise std")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--noisy", action="store_true", help="add range noise to singular scenarios")
    s.add_argument("--csv", default=None, help="also write the k,ox,oy,oz,n,d CSV here")
    s.add_argument("--out", default=None, help="output file; stdout if omitted")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("solve-gat", help="estimate the similarity transform", formatter_class=fmt)
    s.add_argument("--in", dest="inp", required=True, help="dataset JSON ('-' for stdin)")
    s.add_argument("--method", default="qcqp+nls", choices=["qcqp", "nls", "qcqp+nls"], help="estimator")
    s.add_argument("--d0", type=float, default=None, help="distance world origin to start (m); None uses the dataset d0")
    s.add_argument("--seed", type=int, default=0, help="seed for the QCQP random starts")
    s.add_argument("--n-starts", type=int, default=8, help="QCQP multi-starts")
    s.add_argument("--accept-sigma", type=float, default=gat.ACCEPT_SIGMA, help="accept when every std error is below this")
    s.add_argument("--singular-sigma", type=float, default=gat.SINGULAR_SIGMA, help="singular when any std error exceeds this")
    s.add_argument("--out", default=None, help="output file; stdout if omitted")
    s.set_defaults(func=cmd_solve_gat)

    s = sub.add_parser("analyze-fim", help="Fisher information and observability report", formatter_class=fmt)
    s.add_argument("--in", dest="inp", required=True, help="dataset JSON")
    s.add_argument("--theta", type=float, nargs=7, default=None, metavar="X", help="tx ty tz vx vy vz s")
    s.add_argument("--transform", default=None, help="JSON {s, R, t} to evaluate at")
    s.add_argument("--sigma-r", type=float, default=None, help="range noise std; None uses the dataset value")
    s.add_argument("--out", default=None, help="output file; stdout if omitted")
    s.set_defaults(func=cmd_analyze_fim)

    s = sub.add_parser("run-vro", help="drift check, pose-graph correction, loop gating", formatter_class=fmt)
    s.add_argument("--in", dest="inp", default=None, help="scenario JSON; None uses the built-in drift scene")
    s.add_argument("--drift-threshold", type=float, default=vro.DRIFT_THRESHOLD, help="meters")
    s.add_argument("--window", type=int, default=vro.WINDOW, help="recent keyframes P")
    s.add_argument("--epsilon-r", type=float, default=0.5, help="loop-closure range tolerance (m)")
    s.add_argument("--seed", type=int, default=0, help="measurement noise seed")
    s.add_argument("--poses", default=None, help="write per-keyframe poses CSV here")
    s.add_argument("--out", default=None, help="output file; stdout if omitted")
    s.set_defaults(func=cmd_run_vro)

    s = sub.add_parser("montecarlo", help="Monte-Carlo comparison of estimators", formatter_class=fmt)
    s.add_argument("--R-m", dest="R_m", type=float, nargs="+", default=[1.0, 2.0, 3.0, 4.0, 5.0], help="walk radii (m)")
    s.add_argument("--trials", type=int, default=100, help="trials per radius")
    s.add_argument("--sigma-r", type=float, default=0.1, help="range noise std (m)")
    s.add_argument("--sigma-o", type=float, default=0.001, help="odometry noise std")
    s.add_argument("--methods", nargs="+", default=list(sim.METHODS), choices=list(sim.METHODS), help="estimators to compare")
    s.add_argument("--n", type=int, default=200, help="samples per trajectory")
    s.add_argument("--n-starts", type=int, default=8, help="QCQP multi-starts")
    s.add_argument("--seed", type=int, default=0, help="base seed")
    s.add_argument("--workers", type=int, default=1, help="worker processes")
    s.add_argument("--out-dir", default=None, help="write results.csv, summary.json, plot.tsv here")
    s.add_argument("--out", default=None, help="output file; stdout if omitted")
    s.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except vro.GaugeError as exc:
        logger.error("%s", exc)
        return EXIT_SINGULAR


if __name__ == "__main__":
    sys.exit(main())
