"""srdlab: a desk-scale laboratory for stochastic reaction-diffusion
systems with dynamic boundary conditions.

Builds bulk-surface meshes whose discrete Green and surface-divergence
identities hold exactly, discretizes the Brownian driver as a binomial
scenario tree with exact conditional expectations, solves the forward
state system and backward adjoint systems, computes two-player Nash
equilibria by damped best response, and runs empirical probes of the
weighted identities, Carleman-type estimates, interpolation inequality,
backward uniqueness, and conditional stability.
"""

from .dynamics import (
    AdjointTrajectory,
    BulkSurfaceStepper,
    Coefficients,
    ControlPair,
    StateTrajectory,
    backward_solve,
    coupled_residual,
    forward_solve,
    mean_trajectory,
)
from .errors import (
    AdaptednessError,
    InvalidSpecError,
    NonContractionError,
    NumericalError,
    ShapeError,
    SrdlabError,
)
from .mesh import (
    DiscreteOperators,
    MeshGeometry,
    MeshSpec,
    RegionMasks,
    build_mesh,
    green_identity_residual,
)
from .nash import NashReport, nash_solve, verify_nash
from .noise import PathBundle, ScenarioTree, build_tree, sample_paths, tree_expectation
from .objectives import ObjectiveSpec, evaluate_functional, gateaux_derivative
from .problem import Problem

__version__ = "0.1.0"
