"""Quadratic cost functionals of the two players and their derivatives.

Player i pays a tracking term on its region G_{i,d} plus a control-energy
term on G_i:

    J_i = (alpha_i / 2) E sum_k dt <(y_k - y_{i,d,k})^2>_{G_{i,d}}
        + (beta_i  / 2) E sum_k dt <v_{i,k}^2>_{G_i},

with the time integral evaluated by the left-endpoint rectangle rule on
the solver grid (k = 0 .. K-1), the expectation exact over the tree, and
space integrals by the mesh quadrature. Targets may be deterministic
(constant or one field per step) or adapted (one array per step with path
rows); the bundled experiments use deterministic targets.
"""

from __future__ import annotations

import numpy as np

from .dynamics import ControlPair, StateTrajectory, forward_solve
from .errors import InvalidSpecError, ShapeError
from .mesh import RegionMasks
from .noise import ScenarioTree, expand_to_paths

__all__ = [
    "ObjectiveSpec",
    "evaluate_functional",
    "gateaux_derivative",
    "control_inner",
    "control_norm",
    "tracking_sources",
]


class ObjectiveSpec:
    """Weights, targets, and regions of the two functionals.

    Tracking weights alpha_i may be zero (pure control cost); the control
    weights beta_i must be positive.
    """

    def __init__(self, alpha1, beta1, alpha2, beta2, masks: RegionMasks, y1d=0.0, y2d=0.0):
        for name, val in (("alpha1", alpha1), ("alpha2", alpha2)):
            if val < 0:
                raise InvalidSpecError(f"{name} must be nonnegative, got {val}")
        for name, val in (("beta1", beta1), ("beta2", beta2)):
            if val <= 0:
                raise InvalidSpecError(f"{name} must be positive, got {val}")
        self.alpha1, self.beta1 = float(alpha1), float(beta1)
        self.alpha2, self.beta2 = float(alpha2), float(beta2)
        self.masks = masks
        self.y1d = self._clean_target(y1d, masks.g1d, "y1d")
        self.y2d = self._clean_target(y2d, masks.g2d, "y2d")

    @staticmethod
    def _clean_target(target, mask, name):
        if isinstance(target, list):  # adapted: one array per step
            cleaned = []
            for k, arr in enumerate(target):
                arr = np.atleast_2d(np.asarray(arr, dtype=float))
                if arr.shape[1] != mask.shape[0]:
                    raise ShapeError(f"target {name} level {k} has width {arr.shape[1]}")
                if np.any(arr[:, ~mask]):
                    raise InvalidSpecError(f"target {name} level {k} leaves its mask")
                cleaned.append(arr)
            return cleaned
        arr = np.asarray(target, dtype=float)
        if arr.ndim == 0:
            return arr
        field = arr if arr.ndim == 1 else arr[0] if arr.shape[0] else arr
        if arr.shape[-1] != mask.shape[0]:
            raise ShapeError(f"target {name} has width {arr.shape[-1]}")
        if np.any(np.moveaxis(arr, -1, 0)[~mask]):
            raise InvalidSpecError(f"target {name} leaves its mask")
        return arr

    def alpha(self, i: int) -> float:
        return self.alpha1 if i == 1 else self.alpha2

    def beta(self, i: int) -> float:
        return self.beta1 if i == 1 else self.beta2

    def target_level(self, i: int, k: int) -> np.ndarray:
        """(rows, n_int) target values at time level k."""
        target = self.y1d if i == 1 else self.y2d
        mask = self.masks.tracking_mask(i)
        n = mask.shape[0]
        if isinstance(target, list):
            return target[k]
        if target.ndim == 0:
            return np.full((1, n), float(target) if target else 0.0) * mask
        if target.ndim == 1:
            return target[None, :]
        return target[k][None, :]


def control_inner(ops, tree: ScenarioTree, a_levels, b_levels) -> float:
    """Control-space inner product: sum_k dt E <a_k, b_k>_dx."""
    w = ops.geometry.bulk_weights
    total = 0.0
    for k in range(tree.depth):
        a = expand_to_paths(np.atleast_2d(a_levels[k]), k)
        b = expand_to_paths(np.atleast_2d(b_levels[k]), k)
        total += tree.dt * float(np.mean((a * b) @ w))
    return total


def control_norm(ops, tree: ScenarioTree, levels) -> float:
    return float(np.sqrt(control_inner(ops, tree, levels, levels)))


def evaluate_functional(
    i: int,
    spec: ObjectiveSpec,
    traj: StateTrajectory,
    controls: ControlPair,
    tree: ScenarioTree,
    ops,
) -> float:
    """Cost of player i at the given state trajectory and controls."""
    w = ops.geometry.bulk_weights
    n_int = ops.geometry.n_interior
    dmask = spec.masks.tracking_mask(i)
    alpha, beta = spec.alpha(i), spec.beta(i)
    v_levels = controls.player(i)

    tracking = 0.0
    energy = 0.0
    for k in range(tree.depth):
        if alpha:
            y = traj.levels[k][:, :n_int]
            dev = (y - spec.target_level(i, k)) * dmask
            tracking += tree.dt * float(np.mean((dev * dev) @ w))
        v = v_levels[k]
        energy += tree.dt * float(np.mean((v * v) @ w))
    return 0.5 * alpha * tracking + 0.5 * beta * energy


def gateaux_derivative(
    i: int,
    spec: ObjectiveSpec,
    problem,
    controls: ControlPair,
    direction,
    eps: float,
) -> float:
    """Directional derivative of J_i in player i's slot, central difference.

    Exact up to rounding for these quadratic functionals, hence
    eps-independent over many orders of magnitude.
    """
    if eps <= 0:
        raise InvalidSpecError(f"step eps must be positive, got {eps}")
    direction = _normalize_direction(direction, problem.tree, spec.masks.control_mask(i))

    values = []
    for sign in (+1.0, -1.0):
        v1 = [a.copy() for a in controls.v1]
        v2 = [a.copy() for a in controls.v2]
        target = v1 if i == 1 else v2
        for k in range(problem.tree.depth):
            target[k] = target[k] + sign * eps * direction[k]
        perturbed = ControlPair(v1, v2, spec.masks, problem.tree)
        traj = forward_solve(
            problem.geom,
            problem.ops,
            problem.tree,
            problem.coeffs,
            perturbed,
            problem.initial,
            stepper=problem.stepper,
        )
        values.append(evaluate_functional(i, spec, traj, perturbed, problem.tree, problem.ops))
    return (values[0] - values[1]) / (2 * eps)


def tracking_sources(spec: ObjectiveSpec, traj: StateTrajectory, tree: ScenarioTree, i: int):
    """Bulk sources -alpha_i (y - y_{i,d}) chi_{G_{i,d}} of player i's adjoint.

    Aligned with the discrete functional: the source of the step ending at
    level k+1 uses the conditional mean of y at level k+1 and the level-k+1
    target, and the final step carries no source (the terminal level is not
    tracked by the rectangle rule). With this alignment the backward solve
    is the exact adjoint of the forward scheme whenever the noise
    intensities vanish, and an O(dt)-equivalent choice otherwise.
    """
    n_int = spec.masks.g1.shape[0]
    dmask = spec.masks.tracking_mask(i)
    alpha = spec.alpha(i)
    sources = []
    for k in range(tree.depth):
        if k == tree.depth - 1 or alpha == 0.0:
            sources.append(None)
            continue
        ybar = traj.levels[k + 1].reshape(2**k, 2, -1).mean(axis=1)[:, :n_int]
        sources.append(-alpha * (ybar - spec.target_level(i, k + 1)) * dmask)
    return sources


def _normalize_direction(direction, tree: ScenarioTree, mask) -> list:
    if isinstance(direction, np.ndarray) and direction.ndim == 2 and direction.shape[0] == tree.depth:
        direction = [direction[k] for k in range(tree.depth)]
    if len(direction) != tree.depth:
        raise ShapeError(f"direction needs {tree.depth} levels, got {len(direction)}")
    out = []
    for k, arr in enumerate(direction):
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        if arr.shape[1] != mask.shape[0]:
            raise ShapeError(f"direction level {k} has width {arr.shape[1]}")
        if np.any(arr[:, ~mask]):
            raise InvalidSpecError(f"direction level {k} leaves the control mask")
        out.append(arr)
    return out
