"""Binomial scenario tree for the Brownian driver, plus a path sampler.

The tree replaces the Brownian motion by +-sqrt(dt) coin flips, which makes
conditional expectations (and hence backward equations) exact instead of
regression-based. Per step the increment moments match Brownian moments
exactly through order three: E[dW] = 0, E[dW^2] = dt, E[dW^3] = 0.

The tree object itself stores only the recombining view: level k holds k+1
distinct W-values with binomial probabilities, O(K^2) memory in total.
Adapted processes that do not recombine (most PDE solutions do not, since
implicit diffusion steps do not commute with the noise) are stored per raw
binary path: 2^k rows at level k, row p encoding the increment signs in the
bits of p (bit k-1-j is step j; set bit = up). Both representations, and
the single-row deterministic one, share the same expectation and
child-indexing helpers below.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import InvalidSpecError, ShapeError

__all__ = [
    "ScenarioTree",
    "PathBundle",
    "build_tree",
    "tree_expectation",
    "sample_paths",
    "level_probabilities",
    "child_rows",
    "expand_to_paths",
]

# purpose codes for subseed derivation (documented, stable)
SEED_PATHS = 1
SEED_INSTANCES = 2
SEED_DIRECTIONS = 3
SEED_FAMILIES = 4


@dataclass(frozen=True)
class ScenarioTree:
    """Recombining binomial discretization of W on [0, T] with K steps."""

    depth: int
    horizon: float

    @property
    def dt(self) -> float:
        return self.horizon / self.depth

    @property
    def dw(self) -> float:
        """Magnitude of one increment, sqrt(dt)."""
        return float(np.sqrt(self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.depth + 1)

    @property
    def n_nodes(self) -> int:
        """Total recombining node count, (K+1)(K+2)/2."""
        return (self.depth + 1) * (self.depth + 2) // 2

    def level_values(self, k: int) -> np.ndarray:
        """W-values of the k+1 distinct recombining nodes at level k."""
        self._check_level(k)
        return (2 * np.arange(k + 1) - k) * self.dw

    def level_probabilities(self, k: int) -> np.ndarray:
        """Binomial node probabilities at level k; sums to 1 exactly."""
        self._check_level(k)
        return np.array([comb(k, j) for j in range(k + 1)], dtype=float) / 2.0**k

    def path_values(self, k: int) -> np.ndarray:
        """W-values of the 2^k raw path nodes at level k."""
        self._check_level(k)
        ups = _popcount(np.arange(2**k, dtype=np.uint64))
        return (2 * ups.astype(float) - k) * self.dw

    def path_increments(self, k: int) -> np.ndarray:
        """(2^k, k) signed increments along each raw path."""
        self._check_level(k)
        p = np.arange(2**k, dtype=np.uint64)[:, None]
        bits = (p >> np.arange(k - 1, -1, -1, dtype=np.uint64)[None, :]) & 1
        return (2 * bits.astype(float) - 1) * self.dw

    def to_rows(self):
        """Recombining node table: (level, node-index, W-value, probability)."""
        rows = []
        for k in range(self.depth + 1):
            values = self.level_values(k)
            probs = self.level_probabilities(k)
            for j in range(k + 1):
                rows.append((k, j, float(values[j]), float(probs[j])))
        return rows

    def _check_level(self, k: int) -> None:
        if not 0 <= k <= self.depth:
            raise ShapeError(f"level {k} outside 0..{self.depth}")


@dataclass(frozen=True)
class PathBundle:
    """Monte Carlo increments, n paths by K steps, reproducible from a seed."""

    horizon: float
    seed: int
    increments: np.ndarray  # (n, K)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def depth(self) -> int:
        return self.increments.shape[1]

    def terminal_values(self) -> np.ndarray:
        return self.increments.sum(axis=1)

    def cumulative(self) -> np.ndarray:
        """(n, K+1) W-values including W(0) = 0."""
        w = np.zeros((self.n_paths, self.depth + 1))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w


def build_tree(depth: int, horizon: float) -> ScenarioTree:
    """Binomial tree with K = depth steps on [0, horizon]."""
    if depth < 1:
        raise InvalidSpecError(f"tree depth must be >= 1, got {depth}")
    if horizon <= 0:
        raise InvalidSpecError(f"horizon must be positive, got {horizon}")
    return ScenarioTree(depth=depth, horizon=horizon)


def level_probabilities(tree: ScenarioTree, k: int, n_rows: int) -> np.ndarray:
    """Node probabilities for any of the three level representations.

    n_rows = 1 (deterministic), k+1 (recombining), or 2^k (raw paths).
    """
    if n_rows == 1:
        return np.ones(1)
    if n_rows == k + 1:
        return tree.level_probabilities(k)
    if n_rows == 2**k:
        return np.full(n_rows, 0.5**k)
    raise ShapeError(f"{n_rows} rows match no representation of level {k}")


def child_rows(k: int, n_rows: int, branch: int) -> np.ndarray:
    """Row indices of the level-(k+1) children for each level-k row.

    branch = 0 is the down move (-sqrt(dt)), branch = 1 the up move.
    """
    rows = np.arange(n_rows)
    if n_rows == 1:
        return rows  # deterministic process: single row at every level
    if n_rows == k + 1:
        return rows + branch
    if n_rows == 2**k:
        return 2 * rows + branch
    raise ShapeError(f"{n_rows} rows match no representation of level {k}")


def expand_to_paths(values: np.ndarray, k: int) -> np.ndarray:
    """Broadcast a level-k array to the raw-path representation (2^k rows)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n_rows = values.shape[0]
    if n_rows == 2**k:
        return values
    if n_rows == 1:
        return np.broadcast_to(values, (2**k,) + values.shape[1:])
    if n_rows == k + 1:
        ups = _popcount(np.arange(2**k, dtype=np.uint64))
        return values[ups]
    raise ShapeError(f"{n_rows} rows match no representation of level {k}")


def tree_expectation(tree: ScenarioTree, values: np.ndarray, level: int) -> float | np.ndarray:
    """Probability-weighted sum of per-node values at one level; exact.

    Accepts one value per recombining node (level+1 values) or per raw
    path node (2^level values); trailing field axes are averaged rowwise.
    """
    values = np.asarray(values, dtype=float)
    probs = level_probabilities(tree, level, values.shape[0])
    return probs @ values


def sample_paths(n: int, depth: int, horizon: float, seed: int) -> PathBundle:
    """Gaussian increment bundle with per-path subseeds spawned from seed.

    The subseed derivation (SeedSequence(seed, SEED_PATHS).spawn) makes the
    bundle independent of generation order, so parallel producers would
    agree bit-for-bit.
    """
    if n < 1:
        raise InvalidSpecError(f"path count must be >= 1, got {n}")
    tree = build_tree(depth, horizon)  # validates depth/horizon
    root = np.random.SeedSequence(entropy=seed, spawn_key=(SEED_PATHS,))
    children = root.spawn(n)
    increments = np.empty((n, depth))
    scale = tree.dw
    for i, child in enumerate(children):
        increments[i] = np.random.default_rng(child).standard_normal(depth) * scale
    return PathBundle(horizon=horizon, seed=seed, increments=increments)


def subseed(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Deterministic generator for a (purpose, index) slot under a master seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(purpose, index)))


def _popcount(values: np.ndarray) -> np.ndarray:
    counts = np.zeros(values.shape, dtype=np.int64)
    v = values.copy()
    while v.any():
        counts += (v & 1).astype(np.int64)
        v >>= 1
    return counts
