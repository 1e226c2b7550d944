"""Configuration-driven experiment runner.

Every probe is a subcommand:

    srdlab <subcommand> --config <path> [--out <dir>] [--threads N] [--seed S]

Subcommands: forward, nash, carleman-forward, carleman-backward, identity,
interpolate, uniqueness, stability, sweep. Reports are JSON (UTF-8, sorted
keys) and CSV (header row, LF line endings, full-precision floats);
reruns with the same config and seed produce byte-identical files at any
thread count. Exit codes: 0 success, 2 validation failure, 3 numerical
failure, 4 I/O failure. The SRDLAB_OUT environment variable overrides the
default output directory; the --out flag overrides both.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from .carleman import (
    backward_uniqueness_probe,
    carleman_backward_check,
    carleman_forward_check,
    CarlemanWeights,
    drift_semimartingale,
    geometric_semimartingale,
    interpolation_probe,
    random_backward_instance,
    random_forward_instance,
    stability_probe,
    weighted_identity_residual,
)
from .config import ExperimentConfig, load_config, _locate, _validate
from .dynamics import forward_solve
from .errors import NumericalError, SrdlabError
from .mesh import build_mesh
from .nash import nash_solve, verify_nash
from .noise import SEED_INSTANCES, subseed
from .problem import Problem

SUBCOMMANDS = (
    "forward",
    "nash",
    "carleman-forward",
    "carleman-backward",
    "identity",
    "interpolate",
    "uniqueness",
    "stability",
    "sweep",
)

# fixed parameters of the canned identity refinement study
IDENTITY_MU = 0.2
IDENTITY_SIGMA = 0.6


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.data["seed"] = args.seed
        if args.threads is not None and args.threads < 1:
            raise SrdlabError(f"thread count must be >= 1, got {args.threads}")
        outdir = _resolve_outdir(args.out)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SrdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        runner = _RUNNERS[args.subcommand]
        runner(cfg, outdir, args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SrdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srdlab", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker cap (results are thread-count independent)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "forward":
            p.add_argument("--export-trajectory", action="store_true")
            p.add_argument("--export-tree", action="store_true")
    return parser


def _resolve_outdir(flag_value) -> Path:
    outdir = Path(flag_value or os.environ.get("SRDLAB_OUT") or "out")
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


# ----------------------------------------------------------------------
# output helpers


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _trajectory_rows(traj):
    for k, level in enumerate(traj.levels):
        for p in range(level.shape[0]):
            for j in range(level.shape[1]):
                yield (k, p, j, float(level[p, j]))


# ----------------------------------------------------------------------
# subcommand runners


def _run_forward(cfg: ExperimentConfig, outdir: Path, args) -> None:
    problem = cfg.build_problem()
    traj = forward_solve(
        problem.geom, problem.ops, problem.tree, problem.coeffs, None, problem.initial,
        stepper=problem.stepper,
    )
    ops, tree, n_int = problem.ops, problem.tree, problem.geom.n_interior
    level_norms = [
        float(np.mean(ops.bulk_inner(l[:, :n_int], l[:, :n_int])))
        + float(np.mean(ops.surface_inner(l[:, n_int:], l[:, n_int:])))
        for l in traj.levels
    ]
    grad_energy = sum(
        tree.dt * float(np.mean(ops.grad_inner(l, l))) for l in traj.levels[:-1]
    )
    traj_norm = float(np.sqrt(max(level_norms) + tree.dt * sum(level_norms[:-1]) + grad_energy))
    input_norm = float(np.sqrt(level_norms[0]))
    payload = {
        "level_norms": level_norms,
        "trajectory_norm": traj_norm,
        "input_norm": input_norm,
        "energy_ratio": traj_norm / input_norm if input_norm > 0 else 0.0,
    }
    _write_json(outdir / "forward.json", payload)
    if getattr(args, "export_trajectory", False):
        _write_csv(
            outdir / "trajectory.csv",
            ("level", "node-index", "location-index", "value"),
            _trajectory_rows(traj),
        )
    if getattr(args, "export_tree", False):
        _write_csv(
            outdir / "tree.csv",
            ("level", "node-index", "W-value", "probability"),
            problem.tree.to_rows(),
        )


def _run_nash(cfg: ExperimentConfig, outdir: Path, args) -> None:
    problem = cfg.build_problem()
    n = cfg.data["nash"]
    controls, adjoints, traj, report = nash_solve(
        problem.geom, problem.ops, problem.tree, problem.coeffs, problem.objective,
        problem.initial, rho=n["rho"], tol=n["tol"], maxit=n["maxit"],
        stepper=problem.stepper,
    )
    record = verify_nash(problem, controls, n_directions=8, seed=cfg.seed)
    report.final_gateaux = (record["max_gateaux"]["1"], record["max_gateaux"]["2"])
    payload = {"report": report.to_dict(), "verification": record}
    _write_json(outdir / "nash.json", payload)
    rows = []
    for player, levels in ((1, controls.v1), (2, controls.v2)):
        for k, level in enumerate(levels):
            for p in range(level.shape[0]):
                for j in range(level.shape[1]):
                    rows.append((player, k, p, j, float(level[p, j])))
    _write_csv(
        outdir / "controls.csv",
        ("player", "level", "node-index", "location-index", "value"),
        rows,
    )


def _carleman_grids(cfg: ExperimentConfig, geom, ops, tree, kind: str):
    """Pilot sweep on instance 0 to place the reported decade grid."""
    c = cfg.data["carleman"]
    pilot = np.geomspace(c["s_pilot_min"], c["s_pilot_max"], c["s_pilot_count"])
    rng = subseed(cfg.seed, SEED_INSTANCES, 0)
    if kind == "forward":
        instance = random_forward_instance(geom, tree, rng)
        report = carleman_forward_check(geom, ops, tree, instance, pilot, c["lambda_grid"])
    else:
        instance = random_backward_instance(geom, tree, rng)
        report = carleman_backward_check(geom, ops, tree, instance, pilot, c["lambda_grid"])
    s_emp = report.s_emp
    s_grid = np.geomspace(s_emp, 10.0 * s_emp, c["s_count"])
    return s_grid, c["lambda_grid"], s_emp


def _run_carleman(cfg: ExperimentConfig, outdir: Path, args, kind: str) -> None:
    geom, ops = build_mesh(cfg.mesh_spec())
    tree = cfg.tree()
    c = cfg.data["carleman"]
    s_grid, lambda_grid, s_emp = _carleman_grids(cfg, geom, ops, tree, kind)
    rows = []
    per_instance = []
    c_emp = 0.0
    for i in range(c["instances"]):
        rng = subseed(cfg.seed, SEED_INSTANCES, i)
        if kind == "forward":
            instance = random_forward_instance(geom, tree, rng)
            report = carleman_forward_check(geom, ops, tree, instance, s_grid, lambda_grid)
        else:
            instance = random_backward_instance(geom, tree, rng)
            report = carleman_backward_check(geom, ops, tree, instance, s_grid, lambda_grid)
        rows.extend(report.rows)
        per_instance.append(report.to_dict())
        c_emp = max(c_emp, report.c_emp)
    name = f"carleman_{kind}"
    _write_json(
        outdir / f"{name}.json",
        {"s_emp_pilot": float(s_emp), "c_emp": float(c_emp), "instances": per_instance},
    )
    _write_csv(outdir / f"{name}.csv", ("s", "lambda", "lhs", "rhs", "ratio"), rows)


def _run_identity(cfg: ExperimentConfig, outdir: Path, args) -> None:
    geom, ops = build_mesh(cfg.mesh_spec())
    c = cfg.data["carleman"]
    horizon = cfg.data["time"]["horizon"]
    weights = CarlemanWeights(c["identity_s"], c["identity_lambda"])
    coords = np.vstack([geom.interior_coords, geom.boundary_coords])
    profile = 1.0 + 0.3 * coords[:, 0] / max(1.0, float(np.abs(coords[:, 0]).max()))
    dts = list(c["identity_dts"])
    results = []
    for which in ("bulk", "boundary"):
        for b in (+1.0, -1.0):
            factory = geometric_semimartingale(profile, IDENTITY_MU, IDENTITY_SIGMA)
            res = weighted_identity_residual(
                ops, b, factory, weights, dts, which=which, horizon=horizon
            )
            ablated = weighted_identity_residual(
                ops, b, factory, weights, dts, which=which, horizon=horizon, include_ito=False
            )
            slope = float(np.polyfit(np.log(dts), np.log(res), 1)[0])
            results.append(
                {
                    "which": which,
                    "b": b,
                    "dts": dts,
                    "residuals": [float(r) for r in res],
                    "ablated_residuals": [float(r) for r in ablated],
                    "order": slope,
                    "ablation_ratio_finest": float(ablated[-1] / res[-1]),
                }
            )
    det = weighted_identity_residual(
        ops, 1.0, drift_semimartingale(profile, IDENTITY_MU), weights, dts, horizon=horizon
    )
    payload = {
        "series": results,
        "deterministic_bulk_order": float(np.polyfit(np.log(dts), np.log(det), 1)[0]),
    }
    _write_json(outdir / "identity.json", payload)
    rows = []
    for series in results:
        for dt, r, ra in zip(series["dts"], series["residuals"], series["ablated_residuals"]):
            rows.append((series["which"], series["b"], dt, r, ra))
    _write_csv(
        outdir / "identity.csv",
        ("which", "b", "dt", "residual", "ablated_residual"),
        rows,
    )


def _run_interpolate(cfg: ExperimentConfig, outdir: Path, args) -> None:
    problem = cfg.build_problem()
    n = cfg.data["nash"]
    c = cfg.data["carleman"]
    nash_out = nash_solve(
        problem.geom, problem.ops, problem.tree, problem.coeffs, problem.objective,
        problem.initial, rho=n["rho"], tol=n["tol"], maxit=n["maxit"],
        stepper=problem.stepper,
    )
    report = interpolation_probe(problem, nash_out, c["t0"], cfg.cutoff(), c["lambda1"])
    _write_json(outdir / "interpolate.json", report.to_dict())


def _run_uniqueness(cfg: ExperimentConfig, outdir: Path, args) -> None:
    problem = cfg.build_problem()
    n = cfg.data["nash"]
    record = backward_uniqueness_probe(
        problem,
        cfg.data["carleman"]["t0"],
        n_family=cfg.data["uniqueness"]["family_size"],
        seed=cfg.seed,
        rho=n["rho"],
        tol=n["tol"],
        maxit=n["maxit"],
    )
    _write_json(outdir / "uniqueness.json", record)


def _run_stability(cfg: ExperimentConfig, outdir: Path, args) -> None:
    problem = cfg.build_problem()
    n = cfg.data["nash"]
    c = cfg.data["carleman"]
    record = stability_probe(
        problem,
        c["t0"],
        cfg.cutoff(),
        c["lambda1"],
        cfg.data["stability"]["ball_radius"],
        n_family=cfg.data["stability"]["family_size"],
        seed=cfg.seed,
        rho=n["rho"],
        tol=n["tol"],
        maxit=n["maxit"],
    )
    _write_json(outdir / "stability.json", record)


def _run_sweep(cfg: ExperimentConfig, outdir: Path, args) -> None:
    sweep = cfg.data["sweep"]
    target = sweep["target"]
    params = sorted(sweep["parameters"].items())
    names = [name for name, _ in params]
    value_lists = [values for _, values in params]
    combos = [[]]
    for values in value_lists:
        combos = [c + [v] for c in combos for v in values]
    summary = []
    for idx, combo in enumerate(combos):
        data = copy.deepcopy(cfg.data)
        for name, value in zip(names, combo):
            node, leaf = _locate(data, name)
            node[leaf] = value
        point_cfg = ExperimentConfig(data=data, base_dir=cfg.base_dir)
        _validate(point_cfg)
        point_dir = outdir / f"sweep_{idx:03d}"
        point_dir.mkdir(parents=True, exist_ok=True)
        _RUNNERS[target](point_cfg, point_dir, args)
        summary.append((idx, *combo, f"sweep_{idx:03d}"))
    _write_csv(outdir / "sweep_summary.csv", ("index", *names, "directory"), summary)


_RUNNERS = {
    "forward": _run_forward,
    "nash": _run_nash,
    "carleman-forward": lambda cfg, outdir, args: _run_carleman(cfg, outdir, args, "forward"),
    "carleman-backward": lambda cfg, outdir, args: _run_carleman(cfg, outdir, args, "backward"),
    "identity": _run_identity,
    "interpolate": _run_interpolate,
    "uniqueness": _run_uniqueness,
    "stability": _run_stability,
    "sweep": _run_sweep,
}


if __name__ == "__main__":
    sys.exit(main())
