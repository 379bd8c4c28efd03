"""Exception taxonomy shared across the toolkit.

The CLI maps these onto distinct exit codes: configuration problems exit 2,
data problems exit 3, numeric problems exit 4.
"""


class ToolkitError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ToolkitError):
    """Invalid or inconsistent configuration."""


class ProtocolError(ConfigError):
    """An experiment protocol guard was violated (e.g. mismatched paired configs)."""


class DimensionError(ToolkitError):
    """Tensor shape mismatch; the message names the offending shapes."""


class ContractError(ToolkitError):
    """A call violated an operation precondition."""


class NumericError(ToolkitError):
    """Numeric domain violation or non-finite values."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


class DataError(ToolkitError):
    """Base class for dataset and file problems."""


class ParseError(DataError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class OrderingError(DataError):
    """Timestamps out of order or duplicated."""


class AlignmentError(DataError):
    """Values and time stamps (or paired sequences) are misaligned."""


class CapacityError(DataError):
    """A series or segment is too short for the requested operation."""


class DegenerateFeatureError(DataError):
    """A feature has zero variance on the training segment."""


class IntegrityError(DataError):
    """A serialized artifact is truncated, corrupt, or inconsistent."""


class MigrationError(DataError):
    """A serialized artifact has an unsupported format version."""


class CompletenessError(DataError):
    """A report grid is missing a required (dataset, variant) combination."""
