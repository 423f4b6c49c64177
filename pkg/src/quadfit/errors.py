"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: InputError -> 2, NumericalError -> 3,
NoConsensusError -> 4.
"""


class QuadfitError(Exception):
    pass


class InputError(QuadfitError):
    """Malformed or inconsistent user input (files, shapes, flags)."""


class NumericalError(QuadfitError):
    """NaN/Inf, divergence, or an ill-conditioned solve."""


class DegenerateGeometryError(NumericalError):
    """Rank-deficient or otherwise degenerate geometric configuration."""


class NoConsensusError(QuadfitError):
    """RANSAC found no model with enough inliers."""
