"""Forward and backward solvers for the coupled bulk-surface system.

State and adjoint processes live on stacked nodal vectors (interior slots
then boundary slots) and on the raw binary path tree: level k holds one row
per increment history, 2^k in total. Values attached to a row depend only
on the increments along that history, never on sibling labels.

Time stepping is semi-implicit Euler-Maruyama. Writing M for the lumped
mass diagonal and S for the combined stiffness (bulk form plus the surface
form embedded in the boundary block), one forward step from row p to its
branch children is

    (M + dt S) u_{k+1} = M [ u_k + dt (r_k u_k + f_k) +- sqrt(dt) (n_k u_k + g_k) ]

with r_k the stacked reaction (a1, b1), n_k the stacked noise intensity
(a2, b2), f_k drift sources (controls among them), and g_k additive noise
integrands. The monolithic implicit block carries the whole diffusion,
including the normal-derivative coupling, so the scheme has no parabolic
step-size restriction.

Backward equations are solved by exact tree conditional expectations: at
each row the martingale fields are read off the spread of the child values
(Z sqrt(dt) = half the child difference), the drift is assembled explicitly
from the conditional mean, and one implicit solve with the same matrix
produces the value at the earlier time:

    (M + dt S) z_k = M [ zbar - dt ( -r_k zbar - n_k Z_k + F_k ) ].

Both solvers annihilate spatially constant states exactly (the stiffness
kernel contains constants), which several calibration oracles rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import AdaptednessError, InvalidSpecError, NumericalError, ShapeError
from .mesh import DiscreteOperators, RegionMasks
from .noise import ScenarioTree, expand_to_paths

__all__ = [
    "Coefficients",
    "StateTrajectory",
    "ControlPair",
    "AdjointTrajectory",
    "BulkSurfaceStepper",
    "forward_solve",
    "backward_solve",
    "mean_trajectory",
    "coupled_residual",
]


class Coefficients:
    """Reaction and noise-intensity fields (a1, a2, b1, b2).

    Each entry may be a scalar, a space field, or a (K, space) array; all
    are validated as bounded (finite) on construction.
    """

    def __init__(self, a1=0.0, a2=0.0, b1=0.0, b2=0.0):
        self.a1 = self._clean("a1", a1)
        self.a2 = self._clean("a2", a2)
        self.b1 = self._clean("b1", b1)
        self.b2 = self._clean("b2", b2)

    @staticmethod
    def _clean(name, value):
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise InvalidSpecError(f"coefficient {name} is not bounded")
        return arr

    @staticmethod
    def _at(arr: np.ndarray, k: int, width: int) -> np.ndarray:
        if arr.ndim == 0:
            return np.full(width, float(arr))
        if arr.ndim == 1:
            if arr.shape[0] != width:
                raise ShapeError(f"coefficient field has width {arr.shape[0]}, expected {width}")
            return arr
        if arr.shape[1] != width:
            raise ShapeError(f"coefficient field has width {arr.shape[1]}, expected {width}")
        return arr[k]

    def reaction(self, k: int, n_int: int, n_bnd: int) -> np.ndarray:
        """Stacked (a1, b1) at step k."""
        return np.concatenate([self._at(self.a1, k, n_int), self._at(self.b1, k, n_bnd)])

    def noise(self, k: int, n_int: int, n_bnd: int) -> np.ndarray:
        """Stacked (a2, b2) at step k."""
        return np.concatenate([self._at(self.a2, k, n_int), self._at(self.b2, k, n_bnd)])

    @property
    def is_deterministic_noise_free(self) -> bool:
        return not np.any(self.a2) and not np.any(self.b2)


@dataclass
class StateTrajectory:
    """Stacked state values per tree level, one row per path node."""

    tree: ScenarioTree
    levels: list  # levels[k]: (2^k, n_total)

    @property
    def initial(self) -> np.ndarray:
        return self.levels[0][0]

    @property
    def terminal(self) -> np.ndarray:
        return self.levels[-1]

    def width(self) -> int:
        return self.levels[0].shape[1]


@dataclass
class AdjointTrajectory:
    """Backward solution (z, z_Gamma) with martingale fields (Z, Zhat).

    z_levels[k] has 2^k rows of stacked values, k = 0..K; z_levels[K] is
    identically zero. mart_levels[k] (k = 0..K-1) stacks Z on interior and
    Zhat on boundary slots; by construction

        z_{k+1}[2p + b] = zbar_k[p] + (2b - 1) sqrt(dt) mart_k[p].
    """

    tree: ScenarioTree
    z_levels: list
    mart_levels: list

    def z_at(self, k: int) -> np.ndarray:
        return self.z_levels[k]

    def mart_at(self, k: int) -> np.ndarray:
        return self.mart_levels[k]


class ControlPair:
    """Masked control fields per player, per step, per path node.

    Values are stored at full interior width with zeros off the mask; each
    level array has 1 or 2^k rows.
    """

    def __init__(self, v1_levels, v2_levels, masks: RegionMasks, tree: ScenarioTree):
        self.masks = masks
        self.tree = tree
        self.v1 = [self._validate(a, k, masks.g1) for k, a in enumerate(v1_levels)]
        self.v2 = [self._validate(a, k, masks.g2) for k, a in enumerate(v2_levels)]
        if len(self.v1) != tree.depth or len(self.v2) != tree.depth:
            raise ShapeError(
                f"controls need one level per step ({tree.depth}), got {len(self.v1)}/{len(self.v2)}"
            )

    @staticmethod
    def _validate(arr, k, mask):
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        if arr.shape[1] != mask.shape[0]:
            raise ShapeError(f"control width {arr.shape[1]} != interior width {mask.shape[0]}")
        if arr.shape[0] not in (1, 2**k):
            raise AdaptednessError(
                f"control level {k} has {arr.shape[0]} rows; expected 1 or {2**k}"
            )
        if np.any(arr[:, ~mask]):
            raise InvalidSpecError(f"control level {k} has support outside its mask")
        return arr

    @classmethod
    def zeros(cls, tree: ScenarioTree, masks: RegionMasks) -> "ControlPair":
        n = masks.g1.shape[0]
        z = [np.zeros((1, n)) for _ in range(tree.depth)]
        return cls(z, [np.zeros((1, n)) for _ in range(tree.depth)], masks, tree)

    def player(self, i: int) -> list:
        return self.v1 if i == 1 else self.v2

    def combined_drift(self, k: int) -> np.ndarray:
        """chi_G1 v1 + chi_G2 v2 at step k, raw-path rows, interior width."""
        return expand_to_paths(self.v1[k], k) + expand_to_paths(self.v2[k], k)


class BulkSurfaceStepper:
    """Factorized implicit operator M + dt S, reused across all steps."""

    def __init__(self, ops: DiscreteOperators, dt: float):
        geom = ops.geometry
        self.ops = ops
        self.dt = dt
        self.mass = geom.mass_diag
        surf = sp.bmat(
            [
                [sp.csr_matrix((geom.n_interior, geom.n_interior)), None],
                [None, ops.surface_stiffness],
            ],
            format="csr",
        )
        self.combined_stiffness = (ops.stiffness + surf).tocsr()
        self.matrix = (sp.diags(self.mass) + dt * self.combined_stiffness).tocsc()
        try:
            self._lu = splu(self.matrix)
        except RuntimeError as exc:  # pragma: no cover - SPD by construction
            raise NumericalError(f"implicit bulk-surface system is singular: {exc}") from exc

    def solve(self, rhs_rows: np.ndarray) -> np.ndarray:
        """Solve (M + dt S) x = M rhs for a block of row vectors."""
        rhs = np.atleast_2d(rhs_rows) * self.mass
        out = self._lu.solve(rhs.T).T
        if not np.all(np.isfinite(out)):
            raise NumericalError("implicit solve produced non-finite values")
        return out


def _stack_initial(initial, n_int: int, n_bnd: int) -> np.ndarray:
    if isinstance(initial, tuple):
        y0, yg0 = (np.asarray(a, dtype=float) for a in initial)
        if y0.shape != (n_int,) or yg0.shape != (n_bnd,):
            raise ShapeError(
                f"initial pair has shapes {y0.shape}/{yg0.shape}, expected ({n_int},)/({n_bnd},)"
            )
        return np.concatenate([y0, yg0])
    arr = np.asarray(initial, dtype=float)
    if arr.shape != (n_int + n_bnd,):
        raise ShapeError(f"initial state has shape {arr.shape}, expected ({n_int + n_bnd},)")
    return arr


def _validate_sources(sources, tree: ScenarioTree, width: int, what: str) -> list:
    """Normalize per-step source arrays; enforce adaptedness by row count."""
    if sources is None:
        return [None] * tree.depth
    if len(sources) != tree.depth:
        raise ShapeError(f"{what} needs {tree.depth} levels, got {len(sources)}")
    out = []
    for k, arr in enumerate(sources):
        if arr is None:
            out.append(None)
            continue
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        if arr.shape[1] != width:
            raise ShapeError(f"{what} level {k} has width {arr.shape[1]}, expected {width}")
        rows = arr.shape[0]
        if rows in (1, 2**k) or (rows == k + 1 and rows != 2**k):
            out.append(expand_to_paths(arr, k))
        elif rows > 2**k and rows & (rows - 1) == 0:
            raise AdaptednessError(
                f"{what} level {k} has {rows} rows: depends on information after step {k}"
            )
        else:
            raise ShapeError(f"{what} level {k} has {rows} rows, no level-{k} representation")
    return out


def forward_solve(
    geom,
    ops: DiscreteOperators,
    tree: ScenarioTree,
    coeffs: Coefficients,
    controls: ControlPair | None,
    initial,
    *,
    drift_source=None,
    noise_source=None,
    stepper: BulkSurfaceStepper | None = None,
) -> StateTrajectory:
    """Propagate the state system over the tree.

    ``drift_source`` and ``noise_source`` are optional per-step stacked
    fields (f_k and g_k above); the state system uses only controls, the
    general forward equation of the Carleman probes uses the sources.
    """
    n_int, n_bnd = geom.n_interior, geom.n_boundary
    width = n_int + n_bnd
    stepper = stepper or BulkSurfaceStepper(ops, tree.dt)
    drift_source = _validate_sources(drift_source, tree, width, "drift source")
    noise_source = _validate_sources(noise_source, tree, width, "noise source")

    u0 = _stack_initial(initial, n_int, n_bnd)
    levels = [u0[None, :].copy()]
    dt, dw = tree.dt, tree.dw
    for k in range(tree.depth):
        cur = levels[k]
        r = coeffs.reaction(k, n_int, n_bnd)
        nz = coeffs.noise(k, n_int, n_bnd)
        drift = cur + dt * (r * cur)
        if controls is not None:
            drift[:, :n_int] += dt * controls.combined_drift(k)
        if drift_source[k] is not None:
            drift = drift + dt * drift_source[k]
        noise = nz * cur
        if noise_source[k] is not None:
            noise = noise + noise_source[k]
        children = np.empty((2 * cur.shape[0], width))
        children[0::2] = drift - dw * noise
        children[1::2] = drift + dw * noise
        levels.append(stepper.solve(children))
    return StateTrajectory(tree=tree, levels=levels)


def backward_solve(
    geom,
    ops: DiscreteOperators,
    tree: ScenarioTree,
    coeffs: Coefficients,
    bulk_sources=None,
    boundary_sources=None,
    *,
    stepper: BulkSurfaceStepper | None = None,
) -> AdjointTrajectory:
    """Solve the backward system with zero terminal data by tree induction.

    Per step, from the children of a row: conditional mean zbar and the
    martingale fields (Z, Zhat) from the child spread, then one implicit
    solve for the drift with reaction -r zbar - n Z and the given sources
    treated explicitly.
    """
    n_int, n_bnd = geom.n_interior, geom.n_boundary
    width = n_int + n_bnd
    stepper = stepper or BulkSurfaceStepper(ops, tree.dt)
    f1 = _validate_sources(bulk_sources, tree, n_int, "bulk source")
    f2 = _validate_sources(boundary_sources, tree, n_bnd, "boundary source")

    dt, dw = tree.dt, tree.dw
    z_levels = [None] * (tree.depth + 1)
    mart_levels = [None] * tree.depth
    z_levels[tree.depth] = np.zeros((2**tree.depth, width))
    for k in range(tree.depth - 1, -1, -1):
        nxt = z_levels[k + 1].reshape(2**k, 2, width)
        zbar = 0.5 * (nxt[:, 0] + nxt[:, 1])
        mart = 0.5 * (nxt[:, 1] - nxt[:, 0]) / dw
        r = coeffs.reaction(k, n_int, n_bnd)
        nz = coeffs.noise(k, n_int, n_bnd)
        g = -(r * zbar) - nz * mart
        if f1[k] is not None:
            g[:, :n_int] += f1[k]
        if f2[k] is not None:
            g[:, n_int:] += f2[k]
        z_levels[k] = stepper.solve(zbar - dt * g)
        mart_levels[k] = mart
    return AdjointTrajectory(tree=tree, z_levels=z_levels, mart_levels=mart_levels)


def mean_trajectory(traj: StateTrajectory, tree: ScenarioTree) -> np.ndarray:
    """(K+1, width) probability-weighted node average per level; exact."""
    return np.stack([lvl.mean(axis=0) for lvl in traj.levels])


def coupled_residual(
    ops: DiscreteOperators,
    tree: ScenarioTree,
    coeffs: Coefficients,
    objective,
    traj: StateTrajectory,
    adj1: AdjointTrajectory,
    adj2: AdjointTrajectory,
) -> dict:
    """Plug fields into the coupled equilibrium system; report defects.

    The forward equation is evaluated with the characterized controls
    v_i = -(1/beta_i) chi_{G_i} z^i substituted; the two backward equations
    use the tracking sources of the equilibrium system. Defects are in
    field units (the implicit equation residual divided by the mass
    weights); max and mean absolute values are reported per equation.
    """
    from .objectives import tracking_sources  # local import to avoid a cycle

    geom = ops.geometry
    n_int = geom.n_interior
    stepper = BulkSurfaceStepper(ops, tree.dt)
    dt, dw = tree.dt, tree.dw
    masks = objective.masks

    fwd_max = fwd_sum = fwd_n = 0.0
    for k in range(tree.depth):
        cur = traj.levels[k]
        r = coeffs.reaction(k, n_int, geom.n_boundary)
        nz = coeffs.noise(k, n_int, geom.n_boundary)
        drift = cur + dt * (r * cur)
        for i, adj in ((1, adj1), (2, adj2)):
            beta = objective.beta1 if i == 1 else objective.beta2
            mask = masks.control_mask(i)
            drift[:, :n_int] -= dt / beta * (adj.z_at(k)[:, :n_int] * mask)
        noise = nz * cur
        rhs = np.empty((2 * cur.shape[0], cur.shape[1]))
        rhs[0::2] = drift - dw * noise
        rhs[1::2] = drift + dw * noise
        defect = (
            stepper.matrix @ traj.levels[k + 1].T - (rhs * stepper.mass).T
        ).T / stepper.mass
        fwd_max = max(fwd_max, float(np.abs(defect).max()))
        fwd_sum += float(np.abs(defect).sum())
        fwd_n += defect.size

    report = {"forward": {"max": fwd_max, "mean": fwd_sum / fwd_n}}

    for i, adj in ((1, adj1), (2, adj2)):
        f1 = tracking_sources(objective, traj, tree, i)
        b_max = b_sum = b_n = 0.0
        for k in range(tree.depth):
            nxt = adj.z_at(k + 1).reshape(2**k, 2, -1)
            zbar = 0.5 * (nxt[:, 0] + nxt[:, 1])
            mart = adj.mart_at(k)
            r = coeffs.reaction(k, n_int, geom.n_boundary)
            nz = coeffs.noise(k, n_int, geom.n_boundary)
            g = -(r * zbar) - nz * mart
            if f1[k] is not None:
                g[:, :n_int] += expand_to_paths(f1[k], k)
            rhs = zbar - dt * g
            defect = (
                stepper.matrix @ adj.z_at(k).T - (rhs * stepper.mass).T
            ).T / stepper.mass
            b_max = max(b_max, float(np.abs(defect).max()))
            b_sum += float(np.abs(defect).sum())
            b_n += defect.size
        report[f"backward{i}"] = {"max": b_max, "mean": b_sum / b_n}
    return report
