"""
Exception hierarchy for physnet3d
"""
from typing import Optional


class PhysNetError(Exception):
    """Base class for every error raised by the toolkit"""


class ParameterError(PhysNetError, ValueError):
    """A scalar parameter is outside its allowed range"""


class DimensionError(PhysNetError, ValueError):
    """Grid resolutions or array shapes do not agree"""


ShapeError = DimensionError


class FormatError(PhysNetError):
    """A file on disk is malformed (bad magic, truncated, wrong version)"""


class RangeError(ParameterError):
    """A physical quantity is outside its admissible range"""

    def __init__(self, field: str, value: float, message: str = ""):
        self.field = field
        self.value = value
        super().__init__(message or f"{field}={value} is out of range")


class SingularMaterialError(ParameterError):
    """Poisson's ratio at or above the incompressible limit"""


class UngroundedError(PhysNetError):
    """The occupied region does not touch the ground plane"""


class GroundingError(PhysNetError):
    """The stiffness system is singular because the solid is not constrained"""


class SolverError(PhysNetError):
    """Iterative solve did not reach the requested tolerance"""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (relative residual {residual:.3e})")


class SizeError(DimensionError):
    """A shape does not fit inside the voxel grid"""


class GenerationError(PhysNetError):
    """Dataset generation failed as a whole"""


class WeightsError(PhysNetError):
    """Checkpoint does not match the network configuration"""


class ConfigError(PhysNetError):
    """Invalid or inconsistent run configuration"""


class NonFiniteLossError(PhysNetError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, iteration: int, last_good_checkpoint: Optional[str] = None):
        self.iteration = iteration
        self.last_good_checkpoint = last_good_checkpoint
        where = last_good_checkpoint or "none written yet"
        super().__init__(
            f"non-finite loss at iteration {iteration}; last good checkpoint: {where}")


class EvaluationError(PhysNetError):
    """Evaluation could not be performed"""


class ExperimentError(PhysNetError):
    """An experiment could not be run"""
