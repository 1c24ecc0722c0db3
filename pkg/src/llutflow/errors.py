"""Exception types shared across the toolflow.

Each family maps onto one CLI exit code (see :mod:`llutflow.cli`).
"""


class LlutError(Exception):
    """Base class for all toolflow errors."""


class ConfigError(LlutError, ValueError):
    """Invalid model configuration or mismatched tensor shapes."""


class ShapeError(ConfigError):
    pass


class DataError(LlutError, ValueError):
    """Malformed or missing dataset input."""


class TrainingError(LlutError, RuntimeError):
    """Training could not proceed (divergence, degenerate batch)."""


class AutodiffError(LlutError, ValueError):
    pass


class CodecError(LlutError, ValueError):
    """A value is not representable in the requested code space."""


class CompileError(LlutError, RuntimeError):
    pass


class TableFormatError(CompileError, ValueError):
    """A table file or manifest failed to parse or verify."""


class NetlistError(LlutError, ValueError):
    pass


class CheckpointError(LlutError, ValueError):
    """Checkpoint file is corrupted, tampered with, or of an unknown version."""


class VerificationError(LlutError, RuntimeError):
    """The netlist disagrees with the model it was compiled from."""
