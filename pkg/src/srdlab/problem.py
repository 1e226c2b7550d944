"""Bundle of one fully specified experiment instance.

Groups the immutable pieces every probe needs (mesh, operators, regions,
tree, coefficients, objective, initial state) and caches the factorized
implicit operator so repeated solves share it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import BulkSurfaceStepper, Coefficients
from .mesh import DiscreteOperators, MeshGeometry, RegionMasks
from .noise import ScenarioTree
from .objectives import ObjectiveSpec

__all__ = ["Problem"]


@dataclass
class Problem:
    geom: MeshGeometry
    ops: DiscreteOperators
    masks: RegionMasks
    tree: ScenarioTree
    coeffs: Coefficients
    objective: ObjectiveSpec
    initial: np.ndarray  # stacked (interior, boundary) state
    _stepper: BulkSurfaceStepper | None = field(default=None, repr=False)

    @property
    def stepper(self) -> BulkSurfaceStepper:
        if self._stepper is None:
            self._stepper = BulkSurfaceStepper(self.ops, self.tree.dt)
        return self._stepper

    def with_initial(self, initial: np.ndarray) -> "Problem":
        return Problem(
            geom=self.geom,
            ops=self.ops,
            masks=self.masks,
            tree=self.tree,
            coeffs=self.coeffs,
            objective=self.objective,
            initial=np.asarray(initial, dtype=float),
            _stepper=self._stepper,
        )
