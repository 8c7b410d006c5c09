"""
Exception hierarchy for stadv
"""

from typing import Any, Dict, Optional, Sequence


class StadvError(Exception):
    """Base class for every error raised by the toolkit"""


class ShapeError(StadvError, ValueError):
    """Tensor or model dimension mismatch"""

    def __init__(self, primitive: str, left: Sequence[int], right: Sequence[int] = (), detail: str = ""):
        self.primitive = primitive
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{primitive}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DataError(StadvError, ValueError):
    """Ingestion, normalization or windowing failure"""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(StadvError, ValueError):
    """Invalid parameter or parameter combination"""


class TrainingDivergedError(StadvError):
    """Training loss became non-finite"""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class AttackError(StadvError):
    """Attack loss became non-finite"""

    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"non-finite attack loss at iteration {iteration} (loss={loss})")


class BoundViolationError(StadvError):
    """An empirical embedding gap exceeded the worst-case bound"""

    def __init__(self, trial_seed: int, gap: float, bound: float, data: Optional[Dict[str, Any]] = None):
        self.trial_seed = trial_seed
        self.gap = gap
        self.bound = bound
        self.data = data or {}
        super().__init__(f"bound violated in trial seed {trial_seed}: gap={gap!r} > bound={bound!r}")


class NumericalError(StadvError, ArithmeticError):
    """A primitive produced NaN or Inf"""

    def __init__(self, primitive: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: produced non-finite values")
