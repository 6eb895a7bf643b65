"""Exception hierarchy shared by the library and the CLI (which maps them to exit codes)."""


class FlowUQError(Exception):
    pass


class ConfigError(FlowUQError, ValueError):
    """Invalid configuration, dimensions or arguments. CLI exit code 2."""


class DimensionError(ConfigError):
    pass


class NumericError(FlowUQError, ArithmeticError):
    """Non-finite values met during evaluation or training. CLI exit code 3.

    ``partial`` optionally carries whatever was computed before the abort
    (the training loop stores its partial loss trace there).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class UnsupportedError(FlowUQError, NotImplementedError):
    pass


class CheckpointError(FlowUQError, OSError):
    """Base class for checkpoint load failures. CLI exit code 4."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointDimError(CheckpointError):
    pass
