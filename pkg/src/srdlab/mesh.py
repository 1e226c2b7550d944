"""Spatial discretization of a bulk domain and its boundary.

Two domain modes are supported:

* ``interval``: the segment [0, L]. The boundary degenerates to the two
  endpoints, carrying counting measure; the surface Laplacian is the zero
  operator (a single point has no tangential direction).
* ``disk``: the disk of radius R, discretized on a polar grid with radial
  nodes at (j + 1/2)*dr so the r = 0 coordinate singularity never needs a
  stencil. The boundary is the circle with uniform arc-length weights and a
  genuine (periodic) Laplace-Beltrami operator.

Fields live on one stacked nodal vector: interior slots first, boundary
slots last, so the trace is a pure restriction and the bulk/surface trace
compatibility is structural.

All operators are assembled from edge-based Dirichlet forms:

    grad_inner(u, w)  = sum_e  omega_e * (du_e / len_e) * (dw_e / len_e)

with the bulk Laplacian, normal derivative, and surface Laplacian defined
as (lumped-mass weighted) adjoints of those forms. This makes the discrete
Green identity

    <Lap u, w>_dx = -grad_inner(u, w) + <dnu u, w>_dsigma

and the surface divergence formula

    <LapGamma u, w>_dsigma = -surface_grad_inner(u, w)

hold exactly (to floating-point rounding) for *all* nodal fields, not just
asymptotically. Quadrature is nodal (lumped), with cells partitioning the
domain exactly, so |G| and |Gamma| are reproduced to rounding at every
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidSpecError, ShapeError

__all__ = [
    "MeshSpec",
    "MeshGeometry",
    "DiscreteOperators",
    "RegionMasks",
    "build_mesh",
    "green_identity_residual",
    "index_range_mask",
    "sector_mask",
]


@dataclass(frozen=True)
class MeshSpec:
    """Parameters selecting and sizing the spatial domain.

    mode : "interval" or "disk"
    extent : interval length L or disk radius R
    resolution : number of interior nodes (interval) or radial rings (disk)
    angular_resolution : number of angular sectors (disk only)
    """

    mode: str
    extent: float
    resolution: int
    angular_resolution: int = 0

    def __post_init__(self):
        if self.mode not in ("interval", "disk"):
            raise InvalidSpecError(f"unknown mesh mode {self.mode!r}")
        if self.extent <= 0:
            raise InvalidSpecError(f"extent must be positive, got {self.extent}")
        if self.resolution < 2:
            raise InvalidSpecError(f"resolution must be >= 2, got {self.resolution}")
        if self.mode == "disk" and self.angular_resolution < 2:
            raise InvalidSpecError(
                f"angular resolution must be >= 2 for disk mode, got {self.angular_resolution}"
            )


@dataclass(frozen=True)
class MeshGeometry:
    """Node coordinates and lumped quadrature weights.

    Interior nodes occupy slots [0, n_interior) of a stacked field and
    boundary nodes the remaining slots.
    """

    mode: str
    interior_coords: np.ndarray  # (n_interior, dim)
    boundary_coords: np.ndarray  # (n_boundary, dim)
    bulk_weights: np.ndarray  # (n_interior,)  lumped dx cells
    surface_weights: np.ndarray  # (n_boundary,) lumped dsigma cells

    @property
    def n_interior(self) -> int:
        return self.bulk_weights.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.surface_weights.shape[0]

    @property
    def n_total(self) -> int:
        return self.n_interior + self.n_boundary

    @property
    def mass_diag(self) -> np.ndarray:
        """Diagonal of the lumped mass matrix of the stacked L2 pairing."""
        return np.concatenate([self.bulk_weights, self.surface_weights])


@dataclass(frozen=True)
class DiscreteOperators:
    """Differential operators on stacked nodal fields.

    ``stiffness`` realizes the bulk Dirichlet form, ``surface_stiffness``
    the tangential one on the boundary. The edge arrays define the
    gradient operators (one value per edge).
    """

    geometry: MeshGeometry
    stiffness: sp.csr_matrix  # (n_total, n_total)
    surface_stiffness: sp.csr_matrix  # (n_boundary, n_boundary)
    edges: np.ndarray  # (n_edges, 2) node indices into the stacked field
    edge_lengths: np.ndarray  # (n_edges,)
    edge_weights: np.ndarray  # (n_edges,) measure carried by each edge
    surface_edges: np.ndarray  # (n_sedges, 2) indices into boundary fields
    surface_edge_lengths: np.ndarray
    surface_edge_weights: np.ndarray
    _incidence: sp.csr_matrix = field(repr=False, default=None)
    _surface_incidence: sp.csr_matrix = field(repr=False, default=None)

    # -- restrictions -------------------------------------------------

    def trace(self, u: np.ndarray) -> np.ndarray:
        """Boundary slots of a stacked field (last axis)."""
        self._check_full(u)
        return u[..., self.geometry.n_interior:]

    def interior(self, u: np.ndarray) -> np.ndarray:
        self._check_full(u)
        return u[..., : self.geometry.n_interior]

    # -- differential operators ---------------------------------------

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        """Bulk Laplacian of a stacked field, on interior nodes."""
        self._check_full(u)
        au = self._apply(self.stiffness, u)
        return -au[..., : self.geometry.n_interior] / self.geometry.bulk_weights

    def normal_derivative(self, u: np.ndarray) -> np.ndarray:
        """Outward normal derivative of a stacked field, on boundary nodes.

        Defined as the dsigma-weighted adjoint complement of the bulk
        Dirichlet form, so the Green identity holds exactly.
        """
        self._check_full(u)
        au = self._apply(self.stiffness, u)
        return au[..., self.geometry.n_interior:] / self.geometry.surface_weights

    def laplace_beltrami(self, u_gamma: np.ndarray) -> np.ndarray:
        """Surface Laplacian of a boundary field."""
        self._check_boundary(u_gamma)
        au = self._apply(self.surface_stiffness, u_gamma)
        return -au / self.geometry.surface_weights

    def grad(self, u: np.ndarray) -> np.ndarray:
        """Edge-valued directional derivative (u_j - u_i) / len_e."""
        self._check_full(u)
        if self.edges.shape[0] == 0:
            return np.zeros(u.shape[:-1] + (0,))
        du = u[..., self.edges[:, 1]] - u[..., self.edges[:, 0]]
        return du / self.edge_lengths

    def surface_grad(self, u_gamma: np.ndarray) -> np.ndarray:
        """Edge-valued tangential derivative on the boundary."""
        self._check_boundary(u_gamma)
        if self.surface_edges.shape[0] == 0:
            return np.zeros(u_gamma.shape[:-1] + (0,))
        du = u_gamma[..., self.surface_edges[:, 1]] - u_gamma[..., self.surface_edges[:, 0]]
        return du / self.surface_edge_lengths

    # -- inner products ------------------------------------------------

    def bulk_inner(self, f: np.ndarray, g: np.ndarray) -> float | np.ndarray:
        """dx-weighted inner product of interior fields."""
        if f.shape[-1] != self.geometry.n_interior or g.shape[-1] != self.geometry.n_interior:
            raise ShapeError("bulk_inner expects interior fields")
        return ((f * g) @ self.geometry.bulk_weights)

    def surface_inner(self, f: np.ndarray, g: np.ndarray) -> float | np.ndarray:
        """dsigma-weighted inner product of boundary fields."""
        self._check_boundary(f)
        self._check_boundary(g)
        return ((f * g) @ self.geometry.surface_weights)

    def grad_inner(self, u: np.ndarray, w: np.ndarray) -> float | np.ndarray:
        """Bulk Dirichlet form <grad u, grad w>_dx over stacked fields."""
        gu, gw = self.grad(u), self.grad(w)
        return (gu * gw) @ self.edge_weights if self.edge_weights.size else np.zeros(gu.shape[:-1])

    def surface_grad_inner(self, u_gamma: np.ndarray, w_gamma: np.ndarray) -> float | np.ndarray:
        """Tangential Dirichlet form <grad_G u, grad_G w>_dsigma."""
        gu, gw = self.surface_grad(u_gamma), self.surface_grad(w_gamma)
        if self.surface_edge_weights.size == 0:
            return np.zeros(gu.shape[:-1])
        return (gu * gw) @ self.surface_edge_weights

    # -- helpers --------------------------------------------------------

    @staticmethod
    def _apply(mat: sp.csr_matrix, u: np.ndarray) -> np.ndarray:
        if u.ndim == 1:
            return mat @ u
        return (mat @ u.reshape(-1, u.shape[-1]).T).T.reshape(u.shape)

    def _check_full(self, u: np.ndarray) -> None:
        if u.shape[-1] != self.geometry.n_total:
            raise ShapeError(
                f"expected stacked field of width {self.geometry.n_total}, got {u.shape[-1]}"
            )

    def _check_boundary(self, u: np.ndarray) -> None:
        if u.shape[-1] != self.geometry.n_boundary:
            raise ShapeError(
                f"expected boundary field of width {self.geometry.n_boundary}, got {u.shape[-1]}"
            )


@dataclass(frozen=True)
class RegionMasks:
    """0/1 indicators over interior nodes for the four working regions.

    g1, g2 carry the controls; g1d, g2d carry the tracking targets.
    """

    g1: np.ndarray
    g2: np.ndarray
    g1d: np.ndarray
    g2d: np.ndarray

    def __post_init__(self):
        n = self.g1.shape[0]
        for name in ("g1", "g2", "g1d", "g2d"):
            mask = getattr(self, name)
            if mask.shape != (n,):
                raise ShapeError(f"mask {name} has shape {mask.shape}, expected ({n},)")
            if not mask.any():
                raise InvalidSpecError(f"mask {name} selects no node")

    def control_mask(self, player: int) -> np.ndarray:
        return self.g1 if player == 1 else self.g2

    def tracking_mask(self, player: int) -> np.ndarray:
        return self.g1d if player == 1 else self.g2d


def build_mesh(spec: MeshSpec) -> tuple[MeshGeometry, DiscreteOperators]:
    """Assemble geometry and operators for a mesh specification."""
    if spec.mode == "interval":
        geom, edges, lengths, weights = _interval_mesh(spec)
        sedges = np.zeros((0, 2), dtype=np.intp)
        slengths = np.zeros(0)
        sweights = np.zeros(0)
    else:
        geom, edges, lengths, weights, sedges, slengths, sweights = _disk_mesh(spec)

    stiffness, incidence = _assemble_form(geom.n_total, edges, lengths, weights)
    surface_stiffness, sincidence = _assemble_form(geom.n_boundary, sedges, slengths, sweights)
    ops = DiscreteOperators(
        geometry=geom,
        stiffness=stiffness,
        surface_stiffness=surface_stiffness,
        edges=edges,
        edge_lengths=lengths,
        edge_weights=weights,
        surface_edges=sedges,
        surface_edge_lengths=slengths,
        surface_edge_weights=sweights,
        _incidence=incidence,
        _surface_incidence=sincidence,
    )
    return geom, ops


def green_identity_residual(ops: DiscreteOperators, u: np.ndarray, w: np.ndarray) -> float:
    """|<Lap u, w>_dx + grad_inner(u, w) - <dnu u, w>_dsigma|.

    Zero to rounding for every pair of stacked fields, by construction of
    the operators; exposed so tests and probes can assert it.
    """
    lap_term = ops.bulk_inner(ops.laplacian(u), ops.interior(w))
    grad_term = ops.grad_inner(u, w)
    flux_term = ops.surface_inner(ops.normal_derivative(u), ops.trace(w))
    return float(abs(lap_term + grad_term - flux_term))


def surface_divergence_residual(ops: DiscreteOperators, u_gamma: np.ndarray, w_gamma: np.ndarray) -> float:
    """|<LapGamma u, w>_dsigma + surface_grad_inner(u, w)|, zero to rounding."""
    lap_term = ops.surface_inner(ops.laplace_beltrami(u_gamma), w_gamma)
    grad_term = ops.surface_grad_inner(u_gamma, w_gamma)
    return float(abs(lap_term + grad_term))


def index_range_mask(geom: MeshGeometry, start: int, stop: int) -> np.ndarray:
    """Indicator of interior nodes with index in [start, stop)."""
    if not (0 <= start < stop <= geom.n_interior):
        raise InvalidSpecError(
            f"index range [{start}, {stop}) invalid for {geom.n_interior} interior nodes"
        )
    mask = np.zeros(geom.n_interior, dtype=bool)
    mask[start:stop] = True
    return mask


def sector_mask(
    geom: MeshGeometry,
    theta0: float,
    theta1: float,
    r0: float = 0.0,
    r1: float = np.inf,
) -> np.ndarray:
    """Indicator of interior disk nodes in an angular sector and radial band.

    Angles are taken modulo 2*pi; theta0 > theta1 wraps through zero.
    """
    if geom.mode != "disk":
        raise InvalidSpecError("sector masks are only defined in disk mode")
    x, y = geom.interior_coords[:, 0], geom.interior_coords[:, 1]
    r = np.hypot(x, y)
    theta = np.mod(np.arctan2(y, x), 2 * np.pi)
    a0, a1 = np.mod(theta0, 2 * np.pi), np.mod(theta1, 2 * np.pi)
    if a0 <= a1:
        angular = (theta >= a0) & (theta <= a1)
    else:
        angular = (theta >= a0) | (theta <= a1)
    return angular & (r >= r0) & (r <= r1)


# ----------------------------------------------------------------------
# assembly internals


def _interval_mesh(spec: MeshSpec):
    n, length = spec.resolution, spec.extent
    h = length / (n + 1)
    xs = (np.arange(1, n + 1) * h).reshape(-1, 1)
    boundary = np.array([[0.0], [length]])

    # dual cells partition [0, L] exactly: end cells absorb the boundary strip
    bulk_w = np.full(n, h)
    bulk_w[0] = 1.5 * h
    bulk_w[-1] = 1.5 * h
    surface_w = np.ones(2)  # counting measure on the two-point boundary

    geom = MeshGeometry("interval", xs, boundary, bulk_w, surface_w)
    # chain: bnd0 - int0 - ... - int_{n-1} - bnd1
    left, right = n, n + 1
    chain = [left] + list(range(n)) + [right]
    edges = np.array([[chain[i], chain[i + 1]] for i in range(n + 1)], dtype=np.intp)
    lengths = np.full(n + 1, h)
    weights = np.full(n + 1, h)
    return geom, edges, lengths, weights


def _disk_mesh(spec: MeshSpec):
    n_r, n_t, radius = spec.resolution, spec.angular_resolution, spec.extent
    dr = radius / n_r
    dt = 2 * np.pi / n_t
    radii = (np.arange(n_r) + 0.5) * dr
    thetas = np.arange(n_t) * dt

    rr, tt = np.meshgrid(radii, thetas, indexing="ij")
    interior = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])
    boundary = np.column_stack([radius * np.cos(thetas), radius * np.sin(thetas)])

    bulk_w = np.repeat(radii * dr * dt, n_t)  # annular sector cells, sum = pi R^2 exactly
    surface_w = np.full(n_t, radius * dt)  # uniform arc length, sum = 2 pi R exactly

    geom = MeshGeometry("disk", interior, boundary, bulk_w, surface_w)

    def idx(j: int, k: int) -> int:
        return j * n_t + (k % n_t)

    edges, lengths, weights = [], [], []
    for j in range(n_r - 1):
        face_r = (j + 1) * dr
        for k in range(n_t):
            edges.append((idx(j, k), idx(j + 1, k)))
            lengths.append(dr)
            weights.append(face_r * dt * dr)
    for k in range(n_t):  # last ring to the boundary circle, half spacing
        edges.append((idx(n_r - 1, k), n_r * n_t + k))
        lengths.append(dr / 2)
        weights.append(radius * dt * (dr / 2))
    for j in range(n_r):  # angular edges on interior rings
        arc = radii[j] * dt
        for k in range(n_t):
            edges.append((idx(j, k), idx(j, k + 1)))
            lengths.append(arc)
            weights.append(arc * dr)

    sedges = np.array([[k, (k + 1) % n_t] for k in range(n_t)], dtype=np.intp)
    slengths = np.full(n_t, radius * dt)
    sweights = np.full(n_t, radius * dt)
    return (
        geom,
        np.asarray(edges, dtype=np.intp),
        np.asarray(lengths, dtype=float),
        np.asarray(weights, dtype=float),
        sedges,
        slengths,
        sweights,
    )


def _assemble_form(n: int, edges: np.ndarray, lengths: np.ndarray, weights: np.ndarray):
    """Stiffness D^T diag(w/len^2) D and the signed incidence matrix D."""
    m = edges.shape[0]
    if m == 0:
        empty = sp.csr_matrix((n, n))
        return empty, sp.csr_matrix((0, n))
    rows = np.repeat(np.arange(m), 2)
    cols = edges.ravel()
    vals = np.tile([-1.0, 1.0], m)
    incidence = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    conduct = sp.diags(weights / lengths**2)
    stiffness = (incidence.T @ conduct @ incidence).tocsr()
    return stiffness, incidence
