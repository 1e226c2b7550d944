"""Exception taxonomy shared by all srdlab modules.

Validation problems (bad specs, bad shapes, non-adapted data) are kept
separate from numerical failures so the CLI can map them to distinct
exit codes.
"""


class SrdlabError(Exception):
    """Base class for all srdlab errors."""


class InvalidSpecError(SrdlabError, ValueError):
    """A parameter or configuration violates a documented invariant."""


class ShapeError(SrdlabError, ValueError):
    """An array is not dimensioned to the mesh, tree level, or mask."""


class AdaptednessError(SrdlabError, ValueError):
    """A process value depends on information not available at its time."""


class NumericalError(SrdlabError, RuntimeError):
    """A linear solve or iteration failed for numerical reasons."""


class NonContractionError(NumericalError):
    """Best-response iteration diverged (control weights too small)."""
