"""Nash equilibrium of the two-player game by damped best response.

The equilibrium is characterized through the adjoint systems: at a fixed
point, player i's control equals -(1/beta_i) z^i restricted to G_i, where
z^i solves the backward equation driven by the tracking misfit of player i.
The iteration alternates one forward solve with the current controls, one
backward solve per player, and a damped move of each control toward its
characterized value. The fixed-point residual || v_i + (1/beta_i) z^i ||
is monitored directly and is the convergence criterion, so the returned
controls satisfy the characterization to the requested tolerance.

Contraction is only guaranteed for sufficiently large control weights; the
iteration watches for sustained growth of the residual and aborts with the
offending weights in the message instead of looping to the cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    AdjointTrajectory,
    BulkSurfaceStepper,
    ControlPair,
    StateTrajectory,
    backward_solve,
    forward_solve,
)
from .errors import NonContractionError
from .noise import SEED_DIRECTIONS, subseed
from .objectives import (
    ObjectiveSpec,
    control_norm,
    evaluate_functional,
    gateaux_derivative,
    tracking_sources,
)

__all__ = ["NashReport", "nash_solve", "verify_nash"]

DIVERGENCE_WINDOW = 5
DIVERGENCE_FACTOR = 10.0


@dataclass
class NashReport:
    """Diagnostics of one best-response run."""

    iterations: int
    converged: bool
    update_norms: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    final_residuals: tuple = (np.nan, np.nan)
    final_gateaux: tuple = (None, None)
    contraction_factor: float | None = None
    tolerance: float = np.nan
    damping: float = np.nan

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "update_norms": [float(x) for x in self.update_norms],
            "residual_history": [float(x) for x in self.residual_history],
            "final_residuals": [float(x) for x in self.final_residuals],
            "final_gateaux": [None if g is None else float(g) for g in self.final_gateaux],
            "contraction_factor": None
            if self.contraction_factor is None
            else float(self.contraction_factor),
            "tolerance": float(self.tolerance),
            "damping": float(self.damping),
        }


def nash_solve(
    geom,
    ops,
    tree,
    coeffs,
    objective: ObjectiveSpec,
    initial,
    rho: float = 0.5,
    tol: float = 1e-8,
    maxit: int = 200,
    *,
    stepper: BulkSurfaceStepper | None = None,
) -> tuple[ControlPair, tuple[AdjointTrajectory, AdjointTrajectory], StateTrajectory, NashReport]:
    """Damped best-response iteration for the two functionals.

    Stops when the relative fixed-point residual drops below ``tol``;
    raises NonContractionError if the residual grows by more than a factor
    of 10 over 5 consecutive iterations.
    """
    if not 0 < rho <= 1:
        raise ValueError(f"damping must lie in (0, 1], got {rho}")
    stepper = stepper or BulkSurfaceStepper(ops, tree.dt)
    masks = objective.masks
    n_int = geom.n_interior

    controls = ControlPair.zeros(tree, masks)
    report = NashReport(iterations=0, converged=False, tolerance=tol, damping=rho)

    traj = adjoints = best = None
    residuals_abs = (np.nan, np.nan)
    for iteration in range(1, maxit + 1):
        traj = forward_solve(geom, ops, tree, coeffs, controls, initial, stepper=stepper)
        adjoints = tuple(
            backward_solve(
                geom,
                ops,
                tree,
                coeffs,
                bulk_sources=tracking_sources(objective, traj, tree, i),
                stepper=stepper,
            )
            for i in (1, 2)
        )
        best = tuple(
            [
                -(adjoints[i - 1].z_at(k)[:, :n_int] * masks.control_mask(i))
                / objective.beta(i)
                for k in range(tree.depth)
            ]
            for i in (1, 2)
        )
        residuals_abs = tuple(
            control_norm(
                ops,
                tree,
                [controls.player(i)[k] - best[i - 1][k] for k in range(tree.depth)],
            )
            for i in (1, 2)
        )
        scale = max(
            1.0, control_norm(ops, tree, controls.v1), control_norm(ops, tree, controls.v2)
        )
        residual = float(np.hypot(*residuals_abs)) / scale
        report.iterations = iteration
        report.residual_history.append(residual)
        report.update_norms.append(rho * float(np.hypot(*residuals_abs)))
        if residual <= tol:
            report.converged = True
            break
        hist = report.residual_history
        if len(hist) > DIVERGENCE_WINDOW and hist[-1] > DIVERGENCE_FACTOR * hist[-1 - DIVERGENCE_WINDOW]:
            raise NonContractionError(
                "best-response iteration diverged "
                f"(residual grew from {hist[-1 - DIVERGENCE_WINDOW]:.3e} to {hist[-1]:.3e} "
                f"over {DIVERGENCE_WINDOW} iterations); "
                f"control weights beta1={objective.beta1}, beta2={objective.beta2} "
                "are too small for a contraction"
            )
        controls = ControlPair(
            [controls.v1[k] + rho * (best[0][k] - controls.v1[k]) for k in range(tree.depth)],
            [controls.v2[k] + rho * (best[1][k] - controls.v2[k]) for k in range(tree.depth)],
            masks,
            tree,
        )

    report.final_residuals = residuals_abs
    ratios = [
        b / a
        for a, b in zip(report.residual_history[-11:-1], report.residual_history[-10:])
        if a > 0
    ]
    if ratios:
        report.contraction_factor = float(np.median(ratios))
    return controls, adjoints, traj, report


def verify_nash(
    problem,
    candidate: ControlPair,
    n_directions: int = 20,
    *,
    seed: int = 0,
    eps: float = 1e-4,
    deviation: float = 1e-3,
    tolerance: float = 1e-6,
) -> dict:
    """Probe a candidate pair for the equilibrium conditions.

    Evaluates the directional derivative of J_i in ``n_directions``
    pseudorandom adapted directions per player and re-evaluates both costs
    at eight unilateral perturbations per player, confirming none improves
    beyond rounding.
    """
    spec = problem.objective
    tree = problem.tree
    n_int = problem.geom.n_interior

    base_cost = {}
    traj = forward_solve(
        problem.geom, problem.ops, tree, problem.coeffs, candidate, problem.initial,
        stepper=problem.stepper,
    )
    for i in (1, 2):
        base_cost[i] = evaluate_functional(i, spec, traj, candidate, tree, problem.ops)

    max_gateaux = {}
    worst_improvement = {}
    for i in (1, 2):
        mask = spec.masks.control_mask(i)
        rng = subseed(seed, SEED_DIRECTIONS, i)
        gmax = 0.0
        directions = []
        for _ in range(n_directions):
            levels = [rng.standard_normal((2**k, n_int)) * mask for k in range(tree.depth)]
            norm = control_norm(problem.ops, tree, levels)
            levels = [a / norm for a in levels]
            directions.append(levels)
            g = gateaux_derivative(i, spec, problem, candidate, levels, eps)
            gmax = max(gmax, abs(g))
        max_gateaux[i] = gmax

        worst = np.inf
        for e in directions[:4]:
            for sign in (+1.0, -1.0):
                v1 = [a.copy() for a in candidate.v1]
                v2 = [a.copy() for a in candidate.v2]
                slot = v1 if i == 1 else v2
                for k in range(tree.depth):
                    slot[k] = slot[k] + sign * deviation * e[k]
                perturbed = ControlPair(v1, v2, spec.masks, tree)
                ptraj = forward_solve(
                    problem.geom, problem.ops, tree, problem.coeffs, perturbed,
                    problem.initial, stepper=problem.stepper,
                )
                cost = evaluate_functional(i, spec, ptraj, perturbed, tree, problem.ops)
                worst = min(worst, cost - base_cost[i])
        worst_improvement[i] = float(worst)

    verified = all(max_gateaux[i] <= tolerance for i in (1, 2)) and all(
        worst_improvement[i] >= -1e-10 for i in (1, 2)
    )
    return {
        "max_gateaux": {str(i): float(max_gateaux[i]) for i in (1, 2)},
        "worst_unilateral_improvement": {str(i): worst_improvement[i] for i in (1, 2)},
        "cost": {str(i): float(base_cost[i]) for i in (1, 2)},
        "n_directions": n_directions,
        "verified": bool(verified),
    }
