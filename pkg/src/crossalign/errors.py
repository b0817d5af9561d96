"""Exception types shared across the package."""


class CrossAlignError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CrossAlignError):
    """Operand shapes are incompatible; the message names both shapes."""


class RankError(CrossAlignError):
    """An operation received a tensor of the wrong rank (e.g. non-scalar backward root)."""


class NonFiniteError(CrossAlignError):
    """A public operation produced NaN or Inf values."""


class NormalizationError(CrossAlignError):
    """An input that must be a probability distribution does not sum to one."""


class DegenerateVectorError(CrossAlignError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class DegenerateBatchError(CrossAlignError):
    """The batch is too small for a batch-relative statistic to be meaningful."""


class ConfigurationError(CrossAlignError):
    """Invalid configuration values (e.g. grid not divisible by patch size)."""


class SplitViolationError(CrossAlignError):
    """A sample or class crossed the seen/unseen split boundary."""


class NoNegativeError(CrossAlignError):
    """A batch contains a single class, so no negative can be drawn."""


class FormatError(CrossAlignError):
    """A serialized file is malformed. ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    """A serialized file declares a format version this build cannot read."""


class EmptyInputError(CrossAlignError):
    """An operation that needs at least one element received none."""


class CheckpointMismatchError(CrossAlignError):
    """Checkpoint and dataset/config disagree; the message lists the differing keys."""
