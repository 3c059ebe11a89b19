"""Exception hierarchy shared across the package."""


class RalleError(Exception):
    """Base class for all package errors."""


class AlignmentError(RalleError, ValueError):
    """Durations and frame sequences disagree, or a duration is not positive."""


class LayoutError(RalleError, ValueError):
    pass


class MaskError(RalleError, ValueError):
    pass


class ConfigError(RalleError, ValueError):
    pass


class SamplingError(RalleError, ValueError):
    pass


class TrainingDiverged(RalleError, RuntimeError):
    pass


class EvalError(RalleError, ValueError):
    pass


class EmptyLossError(RalleError, ValueError):
    """Every target position is a prompt position; there is nothing to learn from."""


class CheckpointError(RalleError, ValueError):
    pass
