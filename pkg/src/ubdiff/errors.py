"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code raises them
instead of bare ``ValueError`` where the distinction matters to a caller.
"""


class UBDiffError(Exception):
    """Base class for package errors."""


class DatasetError(UBDiffError, ValueError):
    """Malformed dataset: bad manifest, shape mismatch, truncated tensor."""


class MissingArtifactError(UBDiffError, FileNotFoundError):
    """A file or checkpoint a step depends on does not exist."""


class NumericalError(UBDiffError, ArithmeticError):
    """NaN/Inf encountered during simulation or training."""


class CFLError(UBDiffError, ValueError):
    """Time step violates the explicit-scheme stability bound."""

    def __init__(self, dt: float, dt_max: float):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(
            f"dt={dt:.6g} s exceeds the stability limit; admissible dt <= {dt_max:.6g} s"
        )
