"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation problems exit 2,
artifact/format problems exit 3, numeric failures (NaN/Inf) exit 4.
"""


class DualPruneError(Exception):
    """Base class for all package errors."""


class ValidationError(DualPruneError):
    """Bad input: config values, shapes of user-supplied data, missing files."""


class ShapeError(ValidationError):
    """Tensor shape mismatch; the message names the op and the shapes."""


class ArtifactError(DualPruneError):
    """Corrupt or incompatible on-disk artifact (checkpoint, scores, mask)."""


class NumericError(DualPruneError):
    """Non-finite value where the contract requires finite results."""
