"""Exception hierarchy for SNOWS pruning.

Every exception carries the process exit code the CLI maps it to:
2 for validation problems, 3 for numerical failures and 4 for I/O.
"""

from typing import Optional


class SnowsError(Exception):
    """Base class for all SNOWS errors."""

    exit_code = 1


class ValidationError(SnowsError):
    exit_code = 2


class DimensionError(ValidationError):
    """Shapes do not agree."""


class DtypeError(ValidationError):
    """Operands carry different or unsupported dtypes."""


class StructuralError(ValidationError):
    """A structural precondition (manifest layout, N:M divisibility) is violated."""


class MaskError(ValidationError):
    """Mask inconsistent with its weight, or an imported mask fails validation."""


class ConfigError(ValidationError):
    """Invalid configuration value."""


class NumericalError(SnowsError):
    exit_code = 3


class CurvatureError(NumericalError):
    """Non-positive curvature pᵀB(p) met inside CG."""

    def __init__(self, curvature: float, iteration: int):
        super().__init__(
            f"non-positive curvature p^T B(p) = {curvature:.6e} at CG iteration {iteration}; "
            "increase the damping lambda"
        )
        self.curvature = curvature
        self.iteration = iteration


class NonDescentError(NumericalError):
    """The search direction is not a descent direction."""

    def __init__(self, slope: float):
        super().__init__(f"search direction is not a descent direction (delta^T g = {slope:.6e})")
        self.slope = slope


class LineSearchError(NumericalError):
    """No step size above the floor satisfied the sufficient decrease test."""

    def __init__(self, alpha_min: float):
        super().__init__(f"Armijo backtracking fell below alpha_min = {alpha_min:.3e}")
        self.alpha_min = alpha_min


class SingularSystemError(NumericalError):
    """A dense system is singular or not positive definite."""

    def __init__(self, message: str, min_eigenvalue: Optional[float] = None):
        if min_eigenvalue is not None:
            message = f"{message} (smallest eigenvalue estimate {min_eigenvalue:.6e})"
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class DivergenceError(NumericalError):
    """A non-finite value appeared during an iterative method."""


class CheckpointError(SnowsError):
    exit_code = 4


class DatasetError(SnowsError):
    """A dataset file is unreadable or not a whole number of records."""

    exit_code = 4


class PruningAborted(SnowsError):
    """A layer failed; the committed prefix was saved for resumption."""

    exit_code = 4

    def __init__(self, layer: str, checkpoint_path: Optional[str], cause: BaseException):
        where = f"; resumable checkpoint at {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"pruning aborted at layer {layer!r}: {cause}{where}")
        self.layer = layer
        self.checkpoint_path = checkpoint_path
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", PruningAborted.exit_code)
