from typing import List, Optional, Sequence


class OedError(Exception):
    """Base class for toolkit errors."""


class ConfigValidationError(OedError, ValueError):
    """Run configuration failed validation; lists every invalid field."""

    def __init__(self, errors: Sequence[str]):
        self.errors: List[str] = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class NumericalError(OedError, ArithmeticError):
    """A solver, eigensolver or training loop failed numerically."""


class SolverError(NumericalError):
    """Sparse linear solve broke down."""

    def __init__(self, message: str, residual: Optional[float] = None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (residual norm {residual:.3e})"
        super().__init__(message)


class ConvergenceError(NumericalError):
    """Iteration stopped without meeting its tolerance."""

    def __init__(self, message: str, iteration: int, residual: Optional[float] = None):
        self.iteration = iteration
        self.residual = residual
        detail = f"{message} at iteration {iteration}"
        if residual is not None:
            detail += f" (last residual {residual:.3e})"
        super().__init__(detail)


class EvaluationError(NumericalError):
    """Evaluator failed inside a sampling loop."""

    def __init__(self, message: str, **indices: int):
        self.indices = indices
        where = ", ".join(f"{key}={value}" for key, value in indices.items())
        super().__init__(f"{message} [{where}]" if where else message)


class ArtifactError(OedError, OSError):
    """Artifact file is missing, corrupt or inconsistent with its header."""
