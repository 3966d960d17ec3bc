"""Exception types shared across the package."""


class HyperloopError(Exception):
    """Base class for all package errors."""


class DimensionError(HyperloopError, ValueError):
    """Operand shapes or axes are incompatible."""


class ContractError(HyperloopError, ValueError):
    """A precondition of an operation was violated."""


class GraphStateError(HyperloopError, RuntimeError):
    """The compute graph was used in an invalid state (e.g. backward twice)."""


class ConfigError(HyperloopError, ValueError):
    """A configuration document or object is inconsistent."""


class InputError(HyperloopError, ValueError):
    """Model input is outside the accepted domain (e.g. token id >= vocab)."""


class TrainingError(HyperloopError, RuntimeError):
    """Training diverged (NaN loss or gradient)."""


class CheckpointError(HyperloopError, ValueError):
    """A checkpoint file is malformed or incompatible."""
