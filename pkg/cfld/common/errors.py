"""Error types raised across the package.

Every error derives from `CfldError` and from the closest builtin, so callers can keep
catching `ValueError`, `IndexError` and friends.
"""


class CfldError(Exception):
    """Base class for all package errors."""


class ShapeError(CfldError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class NumericError(CfldError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(CfldError, RuntimeError):
    """An API was called outside its documented preconditions."""


class OracleError(CfldError, RuntimeError):
    """The finite-difference oracle could not be evaluated reliably."""


class ScheduleError(CfldError, IndexError):
    """Timestep outside the variance schedule."""


class PlanError(ScheduleError):
    """DDIM substeps are not strictly descending."""


class SingularityError(ScheduleError):
    """Inversion of the forward process at a step where it is not invertible."""


class TrainingError(CfldError, RuntimeError):
    """Optimisation diverged.

    Carries the step index and the batch seed so the failing step can be replayed.
    """

    def __init__(self, message: str, step: int, seed: int | None = None):
        super().__init__(f"{message} (step={step}, seed={seed})")
        self.step = step
        self.seed = seed


class PartitionError(CfldError, ValueError):
    """Frozen and trainable parameter sets are inconsistent."""


class CheckpointError(CfldError, ValueError):
    """Checkpoint file is malformed or does not match the model."""


class ConfigError(CfldError, ValueError):
    """Unknown or malformed configuration key."""


class ArgumentError(CfldError, ValueError):
    """Argument outside its accepted range."""
