"""Weight functions, weighted-identity checks, and inequality probes.

The exponential weights

    phi(t) = exp(lambda t),        theta(t) = exp(s phi(t))

turn energy balances into parameter-indexed families of inequalities. This
module evaluates, at desk scale:

* the two weighted semimartingale identities behind the estimates, checked
  by integrating every term over the tree and space and confirming the
  residual decays first order in dt (with the Ito correction terms ablated,
  the residual must instead stall at a nonzero constant);
* the forward and backward weighted energy estimates, reported as
  left/right ratios over an (s, lambda) grid together with the empirical
  constant (max ratio) and an empirical threshold where the ratio curve
  flattens -- the analysis guarantees only that such constants exist, so
  they are measured, never asserted;
* the interpolation inequality LHS(t0) <= C * A^(1-kappa) * B^kappa for the
  equilibrium system, with kappa from its closed form
  kappa = 2 (e^{l t0} - e^{l t1}) / (C + 2 (e^{l t0} - e^{l t1}));
* backward-uniqueness and conditional-stability probes over families of
  initial states.

One notational caution: in the boundary identity the final cross term is
implemented with the normal derivative; the source display writes a
tangential-looking derivative there, which is read as a typographical
variant of the normal derivative appearing in the neighbouring displays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    BulkSurfaceStepper,
    Coefficients,
    backward_solve,
    forward_solve,
)
from .errors import InvalidSpecError, ShapeError
from .nash import nash_solve
from .noise import SEED_FAMILIES, build_tree, child_rows, level_probabilities, subseed
from .objectives import ObjectiveSpec

__all__ = [
    "CarlemanWeights",
    "CutoffSchedule",
    "CarlemanReport",
    "InterpolationReport",
    "SemimartingaleTrajectory",
    "weights_eval",
    "weighted_identity_residual",
    "drift_semimartingale",
    "geometric_semimartingale",
    "ForwardInstance",
    "BackwardInstance",
    "random_forward_instance",
    "random_backward_instance",
    "carleman_forward_check",
    "carleman_backward_check",
    "kappa",
    "interpolation_probe",
    "backward_uniqueness_probe",
    "stability_probe",
]


@dataclass(frozen=True)
class CarlemanWeights:
    """Parameter pair (s, lambda) with evaluators for phi and theta."""

    s: float
    lam: float

    def __post_init__(self):
        if self.s < 0:
            raise InvalidSpecError(f"weight parameter s must be >= 0, got {self.s}")
        if self.lam <= 0:
            raise InvalidSpecError(f"weight parameter lambda must be positive, got {self.lam}")

    def phi(self, t):
        return np.exp(self.lam * np.asarray(t, dtype=float))

    def theta(self, t):
        return np.exp(self.s * self.phi(t))


def weights_eval(w: CarlemanWeights, t: float) -> tuple[float, float]:
    """(phi(t), theta(t)) at one time."""
    if t < 0:
        raise InvalidSpecError(f"weights are defined for t >= 0, got {t}")
    return float(w.phi(t)), float(w.theta(t))


@dataclass(frozen=True)
class CutoffSchedule:
    """Times 0 < t2 < t1 < t0 <= T with a C^2 ramp eta from 0 to 1.

    eta vanishes on [0, t2], equals 1 on [t1, T], and ramps with the
    quintic smoothstep in between, so eta' is supported in [t2, t1].
    """

    t2: float
    t1: float
    t0: float
    horizon: float

    def __post_init__(self):
        if not 0 < self.t2 < self.t1 < self.t0 <= self.horizon:
            raise InvalidSpecError(
                f"cutoff times must satisfy 0 < t2 < t1 < t0 <= T, got "
                f"t2={self.t2}, t1={self.t1}, t0={self.t0}, T={self.horizon}"
            )

    def eta(self, t):
        x = np.clip((np.asarray(t, dtype=float) - self.t2) / (self.t1 - self.t2), 0.0, 1.0)
        return x**3 * (10.0 - 15.0 * x + 6.0 * x**2)

    def eta_prime(self, t):
        t = np.asarray(t, dtype=float)
        x = (t - self.t2) / (self.t1 - self.t2)
        inside = (x > 0) & (x < 1)
        x = np.clip(x, 0.0, 1.0)
        return np.where(inside, 30.0 * x**2 * (1.0 - x) ** 2 / (self.t1 - self.t2), 0.0)


@dataclass
class CarlemanReport:
    """Left/right ratios over the (s, lambda) grid."""

    kind: str  # "forward" or "backward"
    rows: list = field(default_factory=list)  # (s, lambda, lhs, rhs, ratio)
    c_emp: float = 0.0
    s_emp: float = 0.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rows": [
                {"s": s, "lambda": lam, "lhs": lhs, "rhs": rhs, "ratio": ratio}
                for (s, lam, lhs, rhs, ratio) in self.rows
            ],
            "c_emp": float(self.c_emp),
            "s_emp": float(self.s_emp),
        }


@dataclass
class InterpolationReport:
    """Factors of the interpolation inequality at one instant t0."""

    t0: float
    lhs: float
    factor_a: float
    factor_b: float
    m0: float
    m1: float
    kappa: float
    c_fit: float
    c_used: float
    lambda1: float
    cutoff: CutoffSchedule

    def to_dict(self) -> dict:
        return {
            "t0": float(self.t0),
            "lhs": float(self.lhs),
            "factor_a": float(self.factor_a),
            "factor_b": float(self.factor_b),
            "m0": float(self.m0),
            "m1": float(self.m1),
            "kappa": float(self.kappa),
            "c_fit": float(self.c_fit),
            "c_used": float(self.c_used),
            "lambda1": float(self.lambda1),
            "cutoff": {
                "t2": self.cutoff.t2,
                "t1": self.cutoff.t1,
                "t0": self.cutoff.t0,
                "horizon": self.cutoff.horizon,
            },
        }


# ----------------------------------------------------------------------
# weighted identities


@dataclass
class SemimartingaleTrajectory:
    """A process on the tree with an explicit drift/martingale split.

    Levels may use any representation (1, k+1, or 2^k rows); the split
    must be exact per step:

        u_{k+1}[child] = u_k + drift_k dt + mart_k dW.
    """

    u_levels: list
    drift_levels: list
    mart_levels: list

    def __post_init__(self):
        if self.drift_levels is None or self.mart_levels is None:
            raise InvalidSpecError("semimartingale needs explicit drift and martingale parts")
        if not (len(self.u_levels) == len(self.drift_levels) + 1 == len(self.mart_levels) + 1):
            raise ShapeError("semimartingale levels mismatched: need K+1 values, K drift, K mart")


def drift_semimartingale(profile: np.ndarray, mu: float):
    """Deterministic factory: u(t) = profile * xi_t with xi' = mu xi."""

    profile = np.asarray(profile, dtype=float)

    def factory(tree) -> SemimartingaleTrajectory:
        xi = np.cumprod(np.concatenate([[1.0], np.full(tree.depth, 1.0 + mu * tree.dt)]))
        u = [profile[None, :] * xi[k] for k in range(tree.depth + 1)]
        drift = [mu * u[k] for k in range(tree.depth)]
        mart = [np.zeros_like(u[k]) for k in range(tree.depth)]
        return SemimartingaleTrajectory(u, drift, mart)

    return factory


def geometric_semimartingale(profile: np.ndarray, mu: float, sigma: float):
    """Recombining factory: u = profile * xi with d xi = mu xi dt + sigma xi dW.

    The Euler recursion xi -> xi (1 + mu dt + sigma dW) commutes across
    steps, so xi lives on the recombining tree (k+1 states at level k) and
    the drift/martingale split is exact by construction.
    """

    profile = np.asarray(profile, dtype=float)

    def factory(tree) -> SemimartingaleTrajectory:
        up = 1.0 + mu * tree.dt + sigma * tree.dw
        down = 1.0 + mu * tree.dt - sigma * tree.dw
        u = []
        for k in range(tree.depth + 1):
            j = np.arange(k + 1)
            xi = up**j * down ** (k - j)
            u.append(xi[:, None] * profile[None, :])
        drift = [mu * u[k] for k in range(tree.depth)]
        mart = [sigma * u[k] for k in range(tree.depth)]
        return SemimartingaleTrajectory(u, drift, mart)

    return factory


def weighted_identity_residual(
    ops,
    b: float,
    make_semimartingale,
    weights: CarlemanWeights,
    dts,
    which: str = "bulk",
    horizon: float = 1.0,
    include_ito: bool = True,
) -> list:
    """Integrated defect of a weighted identity, one value per step size.

    For each dt a tree with K = horizon/dt steps is built, the supplied
    factory provides the semimartingale, and every term of the identity is
    accumulated over time, space, and the tree (Ito differentials become
    per-step increments, squared differentials the squared martingale
    increment). Returned is |E(LHS - RHS)| per refinement level. With
    ``include_ito=False`` the quadratic-variation terms are dropped, which
    breaks the identity by a dt-independent amount for noisy processes.
    """
    if which not in ("bulk", "boundary"):
        raise InvalidSpecError(f"identity variant must be bulk or boundary, got {which!r}")
    if b not in (+1.0, -1.0, 1, -1):
        raise InvalidSpecError(f"operator orientation b must be +-1, got {b}")
    residuals = []
    for dt in dts:
        depth = round(horizon / dt)
        if abs(depth * dt - horizon) > 1e-9 * horizon or depth < 1:
            raise InvalidSpecError(f"step {dt} does not divide the horizon {horizon}")
        tree = build_tree(depth, horizon)
        semi = make_semimartingale(tree)
        if not isinstance(semi, SemimartingaleTrajectory):
            raise InvalidSpecError("factory must produce a SemimartingaleTrajectory")
        residuals.append(
            _identity_defect(ops, float(b), semi, weights, tree, which, include_ito)
        )
    return residuals


def _identity_defect(ops, b, semi, w, tree, which, include_ito) -> float:
    geom = ops.geometry
    n_int = geom.n_interior
    dt = tree.dt
    times = tree.times
    total = 0.0
    for k in range(tree.depth):
        u_k = np.atleast_2d(semi.u_levels[k])
        u_next = np.atleast_2d(semi.u_levels[k + 1])
        mart = np.atleast_2d(semi.mart_levels[k])
        if u_k.shape[1] != geom.n_total:
            raise ShapeError(
                f"semimartingale width {u_k.shape[1]} != stacked width {geom.n_total}"
            )
        rows = u_k.shape[0]
        probs = level_probabilities(tree, k, rows)
        phi_k = float(w.phi(times[k]))
        th_k = float(w.theta(times[k]))
        th_next = float(w.theta(times[k + 1]))
        phi_next = float(w.phi(times[k + 1]))
        h_k = th_k * u_k
        s, lam = w.s, w.lam

        for branch in (0, 1):
            child = child_rows(k, rows, branch)
            un = u_next[child]
            h_n = th_next * un
            du = un - u_k
            dh = h_n - h_k
            if which == "bulk":
                lap_h = ops.laplacian(h_k)
                lap_u = ops.laplacian(u_k)
                g1 = b * lap_h + s * lam * phi_k * h_k[:, :n_int]
                d_op = du[:, :n_int] - b * dt * lap_u
                lhs = -ops.bulk_inner(th_k * g1, d_op)
                lhs += 0.25 * b * lam * ops.bulk_inner(th_k * h_k[:, :n_int], d_op)

                dnu_h = ops.normal_derivative(h_k)
                rhs = -b * (
                    ops.surface_inner(dnu_h, ops.trace(dh))
                    + 0.25 * b * lam * dt * ops.surface_inner(ops.trace(h_k), dnu_h)
                )
                bracket_next = (
                    b * ops.grad_inner(h_n, h_n)
                    - s * lam * phi_next * ops.bulk_inner(h_n[:, :n_int], h_n[:, :n_int])
                    + 0.25 * b * lam * ops.bulk_inner(h_n[:, :n_int], h_n[:, :n_int])
                )
                bracket_k = (
                    b * ops.grad_inner(h_k, h_k)
                    - s * lam * phi_k * ops.bulk_inner(h_k[:, :n_int], h_k[:, :n_int])
                    + 0.25 * b * lam * ops.bulk_inner(h_k[:, :n_int], h_k[:, :n_int])
                )
                rhs += 0.5 * (bracket_next - bracket_k)
                rhs += 0.25 * b * b * lam * dt * ops.grad_inner(h_k, h_k)
                rhs += (0.5 - 0.25 * b) * s * lam**2 * phi_k * dt * ops.bulk_inner(
                    h_k[:, :n_int], h_k[:, :n_int]
                )
                rhs += dt * ops.bulk_inner(g1, g1)
                if include_ito:
                    rhs -= 0.5 * b * dt * th_k**2 * ops.grad_inner(mart, mart)
                    rhs += (
                        (0.5 * s * lam * phi_k - 0.125 * b * lam)
                        * dt
                        * th_k**2
                        * ops.bulk_inner(mart[:, :n_int], mart[:, :n_int])
                    )
            else:
                hg_k = ops.trace(h_k)
                hg_n = ops.trace(h_n)
                ug_k = ops.trace(u_k)
                mg = ops.trace(mart)
                lapg_h = ops.laplace_beltrami(hg_k)
                lapg_u = ops.laplace_beltrami(ug_k)
                dnu_u = ops.normal_derivative(u_k)
                dnu_h = ops.normal_derivative(h_k)
                g2 = b * lapg_h + s * lam * phi_k * hg_k
                dug = ops.trace(du)
                d_minus = dug - b * dt * lapg_u - b * dt * dnu_u
                d_plus = dug - b * dt * lapg_u + b * dt * dnu_u
                lhs = -ops.surface_inner(th_k * g2, d_minus)
                lhs += 0.25 * b * lam * ops.surface_inner(th_k * hg_k, d_plus)

                # closed surface: the integrated tangential divergence vanishes
                rhs = 0.0
                bracket_next = (
                    b * ops.surface_grad_inner(hg_n, hg_n)
                    - s * lam * phi_next * ops.surface_inner(hg_n, hg_n)
                    + 0.25 * b * lam * ops.surface_inner(hg_n, hg_n)
                )
                bracket_k = (
                    b * ops.surface_grad_inner(hg_k, hg_k)
                    - s * lam * phi_k * ops.surface_inner(hg_k, hg_k)
                    + 0.25 * b * lam * ops.surface_inner(hg_k, hg_k)
                )
                rhs += 0.5 * (bracket_next - bracket_k)
                rhs += 0.25 * b * b * lam * dt * ops.surface_grad_inner(hg_k, hg_k)
                rhs += (0.5 - 0.25 * b) * s * lam**2 * phi_k * dt * ops.surface_inner(hg_k, hg_k)
                rhs += dt * ops.surface_inner(g2, g2)
                rhs += b * dt * ops.surface_inner(g2, dnu_h)
                rhs += 0.25 * b * b * lam * dt * ops.surface_inner(hg_k, dnu_h)
                if include_ito:
                    rhs -= 0.5 * b * dt * th_k**2 * ops.surface_grad_inner(mg, mg)
                    rhs += (
                        (0.5 * s * lam * phi_k - 0.125 * b * lam)
                        * dt
                        * th_k**2
                        * ops.surface_inner(mg, mg)
                    )
            total += 0.5 * float(probs @ np.atleast_1d(lhs - rhs))
    return abs(total)


# ----------------------------------------------------------------------
# Carleman estimates


@dataclass
class ForwardInstance:
    """Data of one general forward equation: initial state and sources.

    ``g1`` is a stacked field (its boundary slots carry the trace values
    needed for the gradient terms); only its interior slots drive the
    interior equation, the boundary noise being ``g2``.
    """

    initial: np.ndarray  # stacked
    f1: list | None = None  # per step, interior width
    f2: list | None = None  # per step, boundary width
    g1: list | None = None  # per step, stacked width
    g2: list | None = None  # per step, boundary width


@dataclass
class BackwardInstance:
    """Sources of one general backward equation (terminal data are zero)."""

    f1: list | None = None  # per step, interior width
    f2: list | None = None  # per step, boundary width


def carleman_forward_check(
    geom,
    ops,
    tree,
    instance: ForwardInstance,
    s_grid,
    lambda_grid,
    *,
    stepper: BulkSurfaceStepper | None = None,
) -> CarlemanReport:
    """Ratio report for the forward weighted energy estimate.

    Solves the instance once; every (s, lambda) point reuses per-level
    aggregates, so the sweep itself is free.
    """
    s_grid, lambda_grid = _check_grids(s_grid, lambda_grid)
    n_int, n_bnd = geom.n_interior, geom.n_boundary
    width = n_int + n_bnd

    drift = noise = None
    if instance.f1 is not None or instance.f2 is not None:
        drift = _stack_sources(instance.f1, instance.f2, tree, n_int, n_bnd)
    if instance.g1 is not None or instance.g2 is not None:
        noise = []
        for k in range(tree.depth):
            g = np.zeros((1, width))
            g1k = None if instance.g1 is None else np.atleast_2d(instance.g1[k])
            g2k = None if instance.g2 is None else np.atleast_2d(instance.g2[k])
            rows = max(a.shape[0] for a in (g1k, g2k) if a is not None)
            g = np.zeros((rows, width))
            if g1k is not None:
                g[:, :n_int] = g1k[:, :n_int]
            if g2k is not None:
                g[:, n_int:] = g2k
            noise.append(g)
    traj = forward_solve(
        geom, ops, tree, Coefficients(), None, instance.initial,
        drift_source=drift, noise_source=noise, stepper=stepper,
    )

    K = tree.depth
    agg = {
        "z2": np.zeros(K), "gz2": np.zeros(K), "g1_2": np.zeros(K),
        "zg2": np.zeros(K), "gzg2": np.zeros(K), "g2_2": np.zeros(K),
        "f1_2": np.zeros(K), "gg1_2": np.zeros(K), "f2_2": np.zeros(K), "gg2_2": np.zeros(K),
    }
    for k in range(K):
        z = traj.levels[k]
        agg["z2"][k] = float(np.mean(ops.bulk_inner(z[:, :n_int], z[:, :n_int])))
        agg["gz2"][k] = float(np.mean(ops.grad_inner(z, z)))
        zg = z[:, n_int:]
        agg["zg2"][k] = float(np.mean(ops.surface_inner(zg, zg)))
        agg["gzg2"][k] = float(np.mean(ops.surface_grad_inner(zg, zg)))
        if instance.g1 is not None:
            g1 = np.atleast_2d(instance.g1[k])
            agg["g1_2"][k] = float(np.mean(ops.bulk_inner(g1[:, :n_int], g1[:, :n_int])))
            agg["gg1_2"][k] = float(np.mean(ops.grad_inner(g1, g1)))
        if instance.g2 is not None:
            g2 = np.atleast_2d(instance.g2[k])
            agg["g2_2"][k] = float(np.mean(ops.surface_inner(g2, g2)))
            agg["gg2_2"][k] = float(np.mean(ops.surface_grad_inner(g2, g2)))
        if instance.f1 is not None:
            f1 = np.atleast_2d(instance.f1[k])
            agg["f1_2"][k] = float(np.mean(ops.bulk_inner(f1, f1)))
        if instance.f2 is not None:
            f2 = np.atleast_2d(instance.f2[k])
            agg["f2_2"][k] = float(np.mean(ops.surface_inner(f2, f2)))

    u0 = traj.levels[0]
    init_grad = float(np.mean(ops.grad_inner(u0, u0)))
    init_sgrad = float(np.mean(ops.surface_grad_inner(u0[:, n_int:], u0[:, n_int:])))
    uT = traj.terminal
    term_bulk = float(np.mean(ops.bulk_inner(uT[:, :n_int], uT[:, :n_int])))
    term_surf = float(np.mean(ops.surface_inner(uT[:, n_int:], uT[:, n_int:])))

    times = tree.times[:-1]
    report = CarlemanReport(kind="forward")
    for lam in lambda_grid:
        for s in s_grid:
            w = CarlemanWeights(s, lam)
            th2 = w.theta(times) ** 2
            ph = w.phi(times)
            lhs = float(
                tree.dt
                * np.sum(
                    th2
                    * (
                        s * lam**2 * ph * (agg["z2"] + agg["zg2"])
                        + lam * (agg["gz2"] + agg["gzg2"])
                        + s * lam * ph * (agg["g1_2"] + agg["g2_2"])
                    )
                )
            )
            th2_T = float(w.theta(tree.horizon) ** 2)
            ph_T = float(w.phi(tree.horizon))
            th2_0 = float(w.theta(0.0) ** 2)
            rhs = float(
                th2_0 * (init_grad + init_sgrad)
                + s * lam * ph_T * th2_T * (term_bulk + term_surf)
                + tree.dt
                * np.sum(th2 * (agg["f1_2"] + agg["gg1_2"] + agg["f2_2"] + agg["gg2_2"]))
            )
            report.rows.append((float(s), float(lam), lhs, rhs, _ratio(lhs, rhs)))
    _finalize_report(report, s_grid, lambda_grid)
    return report


def carleman_backward_check(
    geom,
    ops,
    tree,
    instance: BackwardInstance,
    s_grid,
    lambda_grid,
    *,
    terminal=None,
    stepper: BulkSurfaceStepper | None = None,
) -> CarlemanReport:
    """Ratio report for the backward weighted energy estimate."""
    if terminal is not None and np.any(np.asarray(terminal)):
        raise InvalidSpecError("the backward estimate assumes zero terminal data")
    s_grid, lambda_grid = _check_grids(s_grid, lambda_grid)
    n_int = geom.n_interior

    adj = backward_solve(
        geom, ops, tree, Coefficients(),
        bulk_sources=instance.f1, boundary_sources=instance.f2, stepper=stepper,
    )

    K = tree.depth
    agg = {
        "z2": np.zeros(K), "gz2": np.zeros(K), "Z2": np.zeros(K),
        "zg2": np.zeros(K), "gzg2": np.zeros(K), "Zh2": np.zeros(K),
        "F1_2": np.zeros(K), "F2_2": np.zeros(K),
    }
    for k in range(K):
        z = adj.z_at(k)
        m = adj.mart_at(k)
        agg["z2"][k] = float(np.mean(ops.bulk_inner(z[:, :n_int], z[:, :n_int])))
        agg["gz2"][k] = float(np.mean(ops.grad_inner(z, z)))
        agg["Z2"][k] = float(np.mean(ops.bulk_inner(m[:, :n_int], m[:, :n_int])))
        zg = z[:, n_int:]
        agg["zg2"][k] = float(np.mean(ops.surface_inner(zg, zg)))
        agg["gzg2"][k] = float(np.mean(ops.surface_grad_inner(zg, zg)))
        agg["Zh2"][k] = float(np.mean(ops.surface_inner(m[:, n_int:], m[:, n_int:])))
        if instance.f1 is not None:
            f1 = np.atleast_2d(instance.f1[k])
            agg["F1_2"][k] = float(np.mean(ops.bulk_inner(f1, f1)))
        if instance.f2 is not None:
            f2 = np.atleast_2d(instance.f2[k])
            agg["F2_2"][k] = float(np.mean(ops.surface_inner(f2, f2)))

    times = tree.times[:-1]
    report = CarlemanReport(kind="backward")
    for lam in lambda_grid:
        for s in s_grid:
            w = CarlemanWeights(s, lam)
            th2 = w.theta(times) ** 2
            ph = w.phi(times)
            lhs = float(
                tree.dt
                * np.sum(
                    th2
                    * (
                        s * lam**2 * ph * (agg["z2"] + agg["zg2"])
                        + lam * (agg["gz2"] + agg["gzg2"])
                        + s * lam * ph * (agg["Z2"] + agg["Zh2"])
                    )
                )
            )
            rhs = float(tree.dt * np.sum(th2 * (agg["F1_2"] + agg["F2_2"])))
            report.rows.append((float(s), float(lam), lhs, rhs, _ratio(lhs, rhs)))
    _finalize_report(report, s_grid, lambda_grid)
    return report


def kappa(lambda1: float, t0: float, t1: float, c: float) -> float:
    """Interpolation exponent 2 d / (C + 2 d), d = e^{l t0} - e^{l t1}."""
    if lambda1 <= 0:
        raise InvalidSpecError(f"lambda1 must be positive, got {lambda1}")
    if t1 >= t0:
        raise InvalidSpecError(f"need t1 < t0, got t1={t1}, t0={t0}")
    if c <= 0:
        raise InvalidSpecError(f"constant must be positive, got {c}")
    gap = 2.0 * (np.exp(lambda1 * t0) - np.exp(lambda1 * t1))
    return float(gap / (c + gap))


# ----------------------------------------------------------------------
# probes on the equilibrium system


def interpolation_probe(
    problem,
    nash_out,
    t0: float,
    cutoff: CutoffSchedule,
    lambda1: float,
    c: float | None = None,
) -> InterpolationReport:
    """Factors of the interpolation inequality at time t0.

    The exponent uses the closed form with a supplied constant (default
    2 e^{lambda1 T}, the value produced by balancing the two exponential
    envelopes); C_fit = LHS / (A^(1-kappa) B^kappa) is then recorded for
    cross-instance comparison, so the inequality holds with C_fit by
    construction and the interest lies in its stability.
    """
    tree = problem.tree
    if not 0 < t0 <= tree.horizon:
        raise InvalidSpecError(f"t0 must lie in (0, T], got {t0}")
    if cutoff.t0 != t0 or cutoff.horizon != tree.horizon:
        raise InvalidSpecError("cutoff schedule must carry the probe's t0 and horizon")
    controls, adjoints, traj, report = nash_out
    if not report.converged:
        raise InvalidSpecError("interpolation probe needs a converged equilibrium")

    ops = problem.ops
    n_int = problem.geom.n_interior
    k0 = round(t0 / tree.dt)
    if abs(k0 * tree.dt - t0) > 1e-9 * max(1.0, tree.horizon):
        k0 = int(np.clip(round(t0 / tree.dt), 1, tree.depth))

    lhs = _pair_sq(ops, traj.levels[k0], n_int)

    state_q = sum(
        tree.dt * float(np.mean(ops.bulk_inner(l[:, :n_int], l[:, :n_int])))
        for l in traj.levels[:-1]
    )
    state_sigma = sum(
        tree.dt * float(np.mean(ops.surface_inner(l[:, n_int:], l[:, n_int:])))
        for l in traj.levels[:-1]
    )
    m0 = 0.0
    for adj in adjoints:
        for k in range(tree.depth):
            z = adj.z_at(k)
            m0 += tree.dt * float(np.mean(ops.bulk_inner(z[:, :n_int], z[:, :n_int])))
            m0 += tree.dt * float(np.mean(ops.surface_inner(z[:, n_int:], z[:, n_int:])))

    m1 = _target_mass(problem.objective, problem.ops, tree)
    terminal = _pair_sq(ops, traj.terminal, n_int)

    factor_a = state_q + state_sigma + m0
    factor_b = terminal + m1
    c_used = 2.0 * float(np.exp(lambda1 * tree.horizon)) if c is None else float(c)
    kap = kappa(lambda1, t0, cutoff.t1, c_used)
    if factor_a > 0 and factor_b > 0:
        c_fit = lhs / (factor_a ** (1 - kap) * factor_b**kap)
    else:
        c_fit = 0.0
    return InterpolationReport(
        t0=k0 * tree.dt,
        lhs=lhs,
        factor_a=factor_a,
        factor_b=factor_b,
        m0=m0,
        m1=m1,
        kappa=kap,
        c_fit=c_fit,
        c_used=c_used,
        lambda1=lambda1,
        cutoff=cutoff,
    )


def backward_uniqueness_probe(
    problem,
    t0: float,
    n_family: int = 8,
    seed: int = 0,
    *,
    rho: float = 0.5,
    tol: float = 1e-9,
    maxit: int = 300,
) -> dict:
    """Zero-data and contrapositive branches of backward uniqueness.

    Zero targets are required. The direct branch runs the equilibrium
    system from the zero initial state and confirms the trajectory is
    identically zero. The contrapositive branch runs a family of nonzero
    initial states and records how far each terminal norm stays above
    zero (the floor is measured, not asserted a priori).
    """
    _require_zero_targets(problem.objective)
    tree = problem.tree
    ops = problem.ops
    n_int = problem.geom.n_interior
    width = problem.geom.n_total

    _, _, traj0, _ = _equilibrium(problem, np.zeros(width), rho, tol, maxit)
    zero_max = max(float(np.abs(l).max()) for l in traj0.levels)

    k0 = round(t0 / tree.dt)
    rng_members = []
    for idx in range(n_family):
        rng = subseed(seed, SEED_FAMILIES, idx)
        y0 = _smooth_profile(problem.geom, rng)
        rng_members.append(y0)

    members = []
    for y0 in rng_members:
        _, _, traj, _ = _equilibrium(problem, y0, rho, tol, maxit)
        members.append(
            {
                "initial_sq": _initial_sq(ops, y0, n_int),
                "terminal_sq": _pair_sq(ops, traj.terminal, n_int),
                "t0_sq": _pair_sq(ops, traj.levels[k0], n_int),
            }
        )
    floor = min(m["terminal_sq"] / m["initial_sq"] for m in members)
    return {
        "zero_branch_max": zero_max,
        "t0": k0 * tree.dt,
        "members": members,
        "terminal_floor_ratio": float(floor),
    }


def stability_probe(
    problem,
    t0: float,
    cutoff: CutoffSchedule,
    lambda1: float,
    ball_radius: float,
    family=None,
    n_family: int = 20,
    seed: int = 0,
    *,
    rho: float = 0.5,
    tol: float = 1e-9,
    maxit: int = 300,
    c: float | None = None,
) -> dict:
    """Conditional stability over a family of initial states in the M-ball.

    For each member the probe records x = log(B) and y = log(LHS at t0)
    (zero targets, so B is the terminal norm alone), fits a line, and
    reports slope, intercept, the interpolation exponent, and the envelope
    constant max_i LHS_i / B_i^kappa.
    """
    _require_zero_targets(problem.objective)
    tree = problem.tree
    ops = problem.ops
    n_int = problem.geom.n_interior
    k0 = round(t0 / tree.dt)

    if family is None:
        family = []
        for idx in range(n_family):
            rng = subseed(seed, SEED_FAMILIES, idx)
            y0 = _smooth_profile(problem.geom, rng)
            norm = np.sqrt(_initial_sq(ops, y0, n_int))
            # spread radii over (0, M]
            radius = ball_radius * (0.25 + 0.75 * (idx + 1) / n_family)
            family.append(y0 * (radius / norm))
    for y0 in family:
        if np.sqrt(_initial_sq(ops, np.asarray(y0, dtype=float), n_int)) > ball_radius * (1 + 1e-12):
            raise InvalidSpecError("family member lies outside the prescribed ball")

    c_used = 2.0 * float(np.exp(lambda1 * tree.horizon)) if c is None else float(c)
    kap = kappa(lambda1, t0, cutoff.t1, c_used)

    members = []
    for y0 in family:
        _, _, traj, _ = _equilibrium(problem, np.asarray(y0, dtype=float), rho, tol, maxit)
        lhs = _pair_sq(ops, traj.levels[k0], n_int)
        b_factor = _pair_sq(ops, traj.terminal, n_int)  # zero targets: M1 = 0
        members.append({"lhs": lhs, "b_factor": b_factor})

    xs = np.log([m["b_factor"] for m in members])
    ys = np.log([m["lhs"] for m in members])
    slope, intercept = np.polyfit(xs, ys, 1)
    c_emp = max(m["lhs"] / m["b_factor"] ** kap for m in members)
    return {
        "t0": k0 * tree.dt,
        "ball_radius": float(ball_radius),
        "kappa": kap,
        "slope": float(slope),
        "intercept": float(intercept),
        "c_emp": float(c_emp),
        "members": members,
    }


# ----------------------------------------------------------------------
# canned pseudorandom instances (smooth closed-form data, so the same
# generator seed describes the same continuum instance at any resolution)


def random_forward_instance(geom, tree, rng) -> ForwardInstance:
    """Forward-equation data: random smooth initial state and sources."""
    p0 = _smooth_profile(geom, rng)
    pf1 = _smooth_profile(geom, rng)
    pf2 = _smooth_profile(geom, rng)
    pg1 = _smooth_profile(geom, rng)
    pg2 = _smooth_profile(geom, rng)
    mods = [_time_modulation(tree, rng) for _ in range(4)]
    n_int = geom.n_interior
    f1 = [mods[0][k] * pf1[None, :n_int] for k in range(tree.depth)]
    f2 = [mods[1][k] * pf2[None, n_int:] for k in range(tree.depth)]
    g1 = [mods[2][k] * pg1[None, :] for k in range(tree.depth)]
    g2 = [mods[3][k] * pg2[None, n_int:] for k in range(tree.depth)]
    return ForwardInstance(initial=p0, f1=f1, f2=f2, g1=g1, g2=g2)


def random_backward_instance(geom, tree, rng, adapted: bool = True) -> BackwardInstance:
    """Backward-equation sources; ``adapted`` modulates them by a scalar
    geometric factor driven by the tree increments, so the martingale
    fields of the solution are exercised."""
    pf1 = _smooth_profile(geom, rng)
    pf2 = _smooth_profile(geom, rng)
    mods = [_time_modulation(tree, rng) for _ in range(2)]
    n_int = geom.n_interior
    if adapted:
        sigma = 0.3
        up, down = 1.0 + sigma * tree.dw, 1.0 - sigma * tree.dw
        factors = []
        for k in range(tree.depth):
            j = np.arange(k + 1)
            factors.append((up**j * down ** (k - j))[:, None])
    else:
        factors = [np.ones((1, 1))] * tree.depth
    f1 = [mods[0][k] * factors[k] * pf1[None, :n_int] for k in range(tree.depth)]
    f2 = [mods[1][k] * factors[k] * pf2[None, n_int:] for k in range(tree.depth)]
    return BackwardInstance(f1=f1, f2=f2)


def _time_modulation(tree, rng) -> np.ndarray:
    c = rng.standard_normal(3)
    t = tree.times[:-1] / tree.horizon
    return c[0] + c[1] * np.cos(np.pi * t) + c[2] * t


# ----------------------------------------------------------------------
# helpers


def _equilibrium(problem, initial, rho, tol, maxit):
    return nash_solve(
        problem.geom,
        problem.ops,
        problem.tree,
        problem.coeffs,
        problem.objective,
        initial,
        rho=rho,
        tol=tol,
        maxit=maxit,
        stepper=problem.stepper,
    )


def _require_zero_targets(objective: ObjectiveSpec) -> None:
    for name, target in (("y1d", objective.y1d), ("y2d", objective.y2d)):
        arrs = target if isinstance(target, list) else [target]
        if any(np.any(np.asarray(a)) for a in arrs):
            raise InvalidSpecError(f"probe requires zero targets, but {name} is nonzero")


def _smooth_profile(geom, rng) -> np.ndarray:
    """Random smooth stacked field: a few low-frequency modes, O(1) size."""
    full_xy = np.vstack([geom.interior_coords, geom.boundary_coords])
    scale = np.max(np.abs(full_xy)) or 1.0
    xi = full_xy[:, 0] / scale
    eta = full_xy[:, 1] / scale if full_xy.shape[1] > 1 else np.zeros_like(xi)
    out = np.zeros(geom.n_total)
    for _ in range(3):
        a, b, c = rng.standard_normal(3)
        out += a * np.cos(np.pi * (b * xi + c * eta))
    out += rng.standard_normal()
    return out


def _pair_sq(ops, level_rows: np.ndarray, n_int: int) -> float:
    bulk = float(np.mean(ops.bulk_inner(level_rows[:, :n_int], level_rows[:, :n_int])))
    surf = float(np.mean(ops.surface_inner(level_rows[:, n_int:], level_rows[:, n_int:])))
    return bulk + surf


def _initial_sq(ops, y0: np.ndarray, n_int: int) -> float:
    y0 = np.atleast_2d(y0)
    return _pair_sq(ops, y0, n_int)


def _target_mass(objective: ObjectiveSpec, ops, tree) -> float:
    total = 0.0
    for i in (1, 2):
        mask = objective.masks.tracking_mask(i)
        for k in range(tree.depth):
            t = objective.target_level(i, k) * mask
            total += tree.dt * float(np.mean(ops.bulk_inner(t, t)))
    return total


def _stack_sources(f1, f2, tree, n_int, n_bnd):
    out = []
    for k in range(tree.depth):
        f1k = None if f1 is None else np.atleast_2d(f1[k])
        f2k = None if f2 is None else np.atleast_2d(f2[k])
        rows = max(a.shape[0] for a in (f1k, f2k) if a is not None)
        g = np.zeros((rows, n_int + n_bnd))
        if f1k is not None:
            g[:, :n_int] = f1k
        if f2k is not None:
            g[:, n_int:] = f2k
        out.append(g)
    return out


def _ratio(lhs: float, rhs: float) -> float:
    if rhs > 0:
        return lhs / rhs
    return 0.0 if lhs == 0 else float("inf")


def _check_grids(s_grid, lambda_grid):
    s_grid = [float(s) for s in np.atleast_1d(s_grid)]
    lambda_grid = [float(l) for l in np.atleast_1d(lambda_grid)]
    if not s_grid or not lambda_grid:
        raise InvalidSpecError("parameter grids must be nonempty")
    return s_grid, lambda_grid


def _finalize_report(report: CarlemanReport, s_grid, lambda_grid) -> None:
    """Empirical threshold and constant.

    The ratio-versus-s curves rise to a turnover and decay beyond it (the
    estimates hold "for s large"); s_emp marks the turnover (the swept s
    attaining the largest ratio, i.e. the smallest s from which the curve
    is bounded by its current value) and C_emp is that largest finite
    ratio. For monotone-decreasing curves s_emp is the smallest swept s.
    """
    s_emp = sorted(s_grid)[0]
    c_emp = 0.0
    for s, _, _, _, ratio in report.rows:
        if np.isfinite(ratio) and ratio > c_emp:
            c_emp = ratio
            s_emp = s
    report.s_emp = float(s_emp)
    report.c_emp = float(c_emp)
