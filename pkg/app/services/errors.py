"""
Exception hierarchy shared by every service module
"""
from typing import Optional


class LabError(Exception):
    """Base class for all errors raised by the lab"""


class GridMismatchError(LabError):
    """Two fields that must share a grid do not"""


class ConfigError(LabError):
    """Invalid run configuration; `key` names the offending setting"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


class TruncationError(LabError):
    """Invalid noise basis truncation or basis index"""


class NonZeroMeanError(LabError):
    """Poisson right-hand side with a non-zero spatial mean"""

    def __init__(self, mean: float):
        super().__init__(f"Poisson right-hand side has non-zero mean {mean:.6e}")
        self.mean = mean


class VariantError(LabError):
    """A model variant was handed a field it cannot evolve"""


class BlowUpError(LabError):
    """Non-finite values or runaway growth during time stepping"""

    def __init__(self, reason: str, step: int, time: float, particle: Optional[int] = None):
        where = f"step {step} (t={time:.6g})"
        if particle is not None:
            where += f", particle {particle}"
        super().__init__(f"{reason} at {where}")
        self.reason = reason
        self.step = step
        self.time = time
        self.particle = particle


class LoopSpacingError(LabError):
    """A material loop is too coarsely resolved to integrate along"""


class ConvergenceError(LabError):
    """An iteration stopped without reaching its tolerance"""
