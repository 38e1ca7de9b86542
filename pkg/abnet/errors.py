"""
Exception hierarchy for abnet.

Every error raised on purpose by the library derives from AbnetError so the
CLI can turn it into a one-line diagnostic.
"""


class AbnetError(Exception):
    """Base class for all abnet errors."""

    pass


class ConfigurationError(AbnetError):
    """Invalid or unknown configuration value."""

    pass


class DataError(AbnetError):
    """Malformed or empty input data."""

    pass


class DimensionError(AbnetError):
    """Tensor extents do not agree."""

    pass


class NumericError(AbnetError):
    """An operation produced NaN/Inf or received a fully masked row."""

    pass


class EmptyLossError(AbnetError):
    """A loss was requested over zero positions."""

    pass


class BackwardStateError(AbnetError):
    """backward() called twice on the same loss."""

    pass


class LengthError(AbnetError):
    """Sequence longer than the configured maximum."""

    pass


class ContractError(AbnetError):
    """Caller broke an input contract (missing [LENGTH] prefix, no length head, ...)."""

    pass


class TrainingDivergedError(AbnetError):
    """Loss became non-finite during training."""

    pass


class CheckpointError(AbnetError):
    """Base class for checkpoint load failures."""

    pass


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""

    pass


class CheckpointTruncatedError(CheckpointError):
    """File ended before a declared field or tensor could be read."""

    pass


class CheckpointLayoutError(CheckpointError):
    """Declared extents, names or lengths disagree with the data or the config."""

    pass


class StageError(AbnetError):
    """A pipeline stage failed."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")
