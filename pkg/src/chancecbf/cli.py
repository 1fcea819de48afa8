"""Command-line interface: ``synth``, ``simulate``, ``verify``, ``invariant``, ``plot``.

Exit codes: 0 success, 1 usage or input error, 2 infeasible synthesis,
3 numerical failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ChanceCBFError, Infeasible, MissingData, NonFinite, NumericalFailure
from .geometry import FaceDistance, distance_to_faces
from .plot import ordered_polygon, plot_run_dir
from .scenario import Controller, Scenario, config_hash, load_controller, load_scenario, synthesize
from .simulate import (
    SimConfig,
    invariant_set_estimate,
    rollout_batch,
    trajectory_to_csv,
    verify_chance_field,
    violation_stats,
)
from .solvers import INFEASIBLE, OPTIMAL, verify_lyapunov
from .systems import position_of

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4

log = logging.getLogger("chancecbf")


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"level": record.levelname, "logger": record.name, "message": record.getMessage()}
        if isinstance(record.args, dict):
            out.update(record.args)
        return json.dumps(out, sort_keys=True)


class _PlainFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        text = f"{record.levelname} {record.getMessage()}"
        if isinstance(record.args, dict):
            text += " " + " ".join(f"{k}={v}" for k, v in sorted(record.args.items()))
        return text


def _configure_logging(json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else _PlainFormatter())
    root = logging.getLogger("chancecbf")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "jsonschema"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def manifest(scn: Scenario, command: str, **inputs) -> dict:
    """Reproducibility record: hash over the scenario plus every override."""
    cfg = {"scenario": scn.raw, "command": command, **inputs}
    return {"command": command, "config_hash": config_hash(cfg), "inputs": inputs, "versions": _versions()}


def _write_json_atomic(path: Path, obj) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _sim_config(scn: Scenario, args, sigma: float) -> SimConfig:
    seed = scn.sim.seed if args.seed is None else args.seed
    runs = scn.sim.runs if args.runs is None else args.runs
    return SimConfig(dt=scn.sim.dt, horizon=scn.sim.horizon, sigma_scale=sigma, seed=seed, runs=runs)


def _sigmas(scn: Scenario, args) -> list[float]:
    return list(args.sigma) if args.sigma else list(scn.sigma_scale)


def _sigma_tag(sigma: float) -> str:
    return repr(float(sigma))


def _geometry(scn: Scenario) -> dict:
    """Planar drawing data: ordered polygon, exit segment, target."""
    if scn.sys.n_x == 4:
        pos = np.unique(np.round(position_of(scn.polytope.vertices), 12), axis=0)
    else:
        pos = np.unique(np.round(scn.polytope.vertices[:, :2], 12), axis=0)
    geo = {"task": scn.task, "polygon": ordered_polygon(pos).tolist(), "exit_segment": None, "x_ref": None}
    if scn.exit_face is not None:
        row = scn.polytope.face_index(scn.exit_face)
        fd = FaceDistance.of(scn.polytope)
        on_face = np.abs(distance_to_faces(fd, scn.polytope.vertices)[:, row]) <= 1e-9
        ends = np.unique(np.round(position_of(scn.polytope.vertices[on_face]), 12), axis=0)
        geo["exit_segment"] = [ends[0].tolist(), ends[-1].tolist()]
    if scn.x_ref is not None:
        geo["x_ref"] = position_of(scn.x_ref).tolist() if scn.sys.n_x == 4 else scn.x_ref.tolist()
    return geo


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    scn = load_scenario(args.scenario)
    try:
        res = synthesize(scn)
    except NumericalFailure as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except Infeasible as exc:
        log.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE
    log.info("synthesis finished", {"status": res.status, "kkt": res.kkt_residual,
                                    "iterations": res.iterations})
    if res.status == INFEASIBLE:
        log.error("synthesis is infeasible; no controller written")
        return EXIT_INFEASIBLE
    if res.status != OPTIMAL:
        log.error("solver stopped with status %s; no controller written", res.status)
        return EXIT_NUMERICAL
    out = Controller.from_result(res, scn).to_json()
    out["manifest"] = manifest(scn, "synth")
    _write_json_atomic(Path(args.out), out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario)
    ctrl = load_controller(args.controller)
    ctrl.check(scn)
    if scn.x0.shape[0] == 0:
        raise MissingData("scenario lists no initial states (x0)")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    watched = scn.watched_faces()
    summary = {"task": scn.task, "levels": []}
    sigmas = _sigmas(scn, args)
    for sigma in sigmas:
        cfg = _sim_config(scn, args, sigma)
        trajs = rollout_batch(scn.sys, ctrl.K, scn.x0, scn.polytope, scn.noise, cfg,
                              x_ref=ctrl.x_ref, exit_face=scn.exit_face, faces=watched)
        tag = _sigma_tag(sigma)
        for n, tr in enumerate(trajs):
            i, j = divmod(n, cfg.runs)
            if j < args.max_csv:
                trajectory_to_csv(tr, scn.polytope, out_dir / f"traj_s{tag}_x{i}_r{j}.csv")
        stats = violation_stats(trajs)
        summary["levels"].append({
            "sigma": sigma,
            "runs_per_x0": cfg.runs,
            "stats": stats.to_json(),
            "runs": [
                {"x0": divmod(n, cfg.runs)[0], "run": divmod(n, cfg.runs)[1],
                 "violations": [[int(f), float(t)] for f, t in tr.violation_events],
                 "exit": None if tr.exit_event is None else [int(tr.exit_event[0]), float(tr.exit_event[1])]}
                for n, tr in enumerate(trajs)
            ],
        })
        log.info("simulated", {"sigma": sigma, "violation_run_fraction": stats.violation_run_fraction})
    _write_json_atomic(out_dir / "geometry.json", _geometry(scn))
    _write_json_atomic(out_dir / "summary.json", summary)
    m = manifest(scn, "simulate", controller=ctrl.to_json(), sigma=sigmas,
                 seed=_sim_config(scn, args, 0.0).seed, runs=_sim_config(scn, args, 0.0).runs,
                 max_csv=args.max_csv)
    _write_json_atomic(out_dir / "manifest.json", m)
    return EXIT_OK


def _sample_points(scn: Scenario, n_random: int, shrink: float, seed: int) -> np.ndarray:
    """Vertices pulled toward the Chebyshev centre plus uniform interior samples."""
    poly = scn.polytope
    centre, _ = poly.chebyshev_center()
    pts = [centre + (1.0 - shrink) * (v - centre) for v in poly.vertices]
    rng = np.random.default_rng(seed)
    lo, hi = poly.vertices.min(axis=0), poly.vertices.max(axis=0)
    while len(pts) < len(poly.vertices) + n_random:
        x = rng.uniform(lo, hi)
        if np.all(poly.A @ x < poly.b):
            pts.append(x)
    return np.array(pts)


def cmd_verify(args) -> int:
    scn = load_scenario(args.scenario)
    ctrl = load_controller(args.controller)
    ctrl.check(scn)
    seed = scn.sim.seed if args.seed is None else args.seed
    sigma = args.sigma[0] if args.sigma else max(scn.sigma_scale)
    pts = _sample_points(scn, scn.verify.points, scn.verify.shrink, seed)
    field = verify_chance_field(scn.sys, ctrl.K, scn.polytope, scn.noise, pts,
                                samples_per_point=scn.verify.samples_per_point, seed=seed,
                                alpha=scn.params.alpha, x_ref=ctrl.x_ref, faces=scn.watched_faces(),
                                sigma_scale=sigma)
    report = {"sigma": sigma, "families": {"cbf": {"passed": field.passed, **field.to_json()}}}
    if ctrl.P is not None:
        beta = float(np.atleast_1d(scn.params.beta_V)[0])
        max_eig = verify_lyapunov(ctrl.P, scn.sys.A, scn.sys.B, ctrl.K, beta)
        report["families"]["lyapunov"] = {"passed": bool(max_eig < 0), "max_eig": max_eig}
    passed = all(f["passed"] for f in report["families"].values())
    report["passed"] = passed
    report["manifest"] = manifest(scn, "verify", controller=ctrl.to_json(), sigma=sigma, seed=seed)
    if args.out:
        _write_json_atomic(Path(args.out), report)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    log.info("verification", {"passed": passed, "flagged": len(field.flagged)})
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_invariant(args) -> int:
    scn = load_scenario(args.scenario)
    ctrl = load_controller(args.controller)
    ctrl.check(scn)
    if scn.task != "equilibrium":
        log.error("the invariant set is defined for the equilibrium task only")
        return EXIT_USAGE
    inv = invariant_set_estimate(scn.sys, ctrl.K, scn.polytope, ctrl.x_ref,
                                 grid_resolution=scn.invariant.grid_resolution,
                                 threshold=scn.invariant.threshold, dt=scn.sim.dt,
                                 horizon=scn.sim.horizon, faces=scn.watched_faces())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / ".invariant.csv.tmp"
    inv.to_csv(tmp)
    os.replace(tmp, out_dir / "invariant.csv")
    _write_json_atomic(out_dir / "invariant.json", {"area_fraction": inv.area_fraction,
                                                    "grid_resolution": scn.invariant.grid_resolution,
                                                    "threshold": scn.invariant.threshold})
    if not (out_dir / "geometry.json").exists():
        _write_json_atomic(out_dir / "geometry.json", _geometry(scn))
    log.info("invariant set", {"area_fraction": inv.area_fraction})
    return EXIT_OK


def cmd_plot(args) -> int:
    for p in plot_run_dir(args.out):
        log.info("wrote %s", p)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chancecbf", description="Chance-constrained CBF controller synthesis.")
    parser.add_argument("--json-logs", action="store_true", help="emit log records as JSON lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, controller=True, out_help="output path"):
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        if controller:
            p.add_argument("--controller", required=True, help="controller JSON written by synth")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--json-logs", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="synthesize a controller")
    common(p, controller=False, out_help="controller JSON to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="closed-loop rollouts for each noise level")
    common(p, out_help="output directory")
    p.add_argument("--seed", type=int, help="base seed (run j uses seed + j)")
    p.add_argument("--runs", type=int, help="runs per initial state and noise level")
    p.add_argument("--sigma", type=float, nargs="+", help="noise multipliers (default: scenario list)")
    p.add_argument("--max-csv", type=int, default=5, help="trajectory CSVs kept per initial state and level")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="Monte Carlo check of the chance constraints")
    p.add_argument("--scenario", required=True)
    p.add_argument("--controller", required=True)
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=float, nargs=1, help="noise multiplier (default: largest in scenario)")
    p.add_argument("--json-logs", action="store_true", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("invariant", help="estimate the zero-velocity invariant set")
    common(p, out_help="output directory")
    p.set_defaults(func=cmd_invariant)

    p = sub.add_parser("plot", help="render SVGs for a run directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--json-logs", action="store_true", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _configure_logging(args.json_logs)
    if getattr(args, "runs", None) is not None and args.runs < 1:
        log.error("--runs must be positive")
        return EXIT_USAGE
    try:
        return args.func(args)
    except (NumericalFailure, NonFinite) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ChanceCBFError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
