"""Exception hierarchy shared across the package."""


class VPTError(Exception):
    """Base class for every error raised by vptoken."""

    exit_code = 1


class InvalidConfigError(VPTError, ValueError):
    exit_code = 2


class OutOfRangeError(VPTError, IndexError):
    exit_code = 3


class DegenerateRegionError(VPTError, ValueError):
    exit_code = 4


class MalformedGroupError(VPTError, ValueError):
    exit_code = 5


class InvertedRegionError(VPTError, ValueError):
    exit_code = 6


class ShapeError(VPTError, ValueError):
    exit_code = 7


class CausalityError(VPTError, ValueError):
    exit_code = 8


class ControlArityError(VPTError, ValueError):
    exit_code = 9


class MaskConstructionError(VPTError, AssertionError):
    exit_code = 10


class TrainingError(VPTError, RuntimeError):
    exit_code = 11


class PromptError(VPTError, ValueError):
    exit_code = 12


class BuilderError(VPTError, ValueError):
    exit_code = 13


class MetricError(VPTError, ValueError):
    exit_code = 14


class CheckpointError(VPTError, ValueError):
    exit_code = 15
