"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: invalid configuration or
input parses exit 2, numeric failures exit 3, over-length inputs exit 4,
oracle check failures exit 5.
"""


class KermitError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(KermitError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(KermitError, ValueError):
    """Malformed textual input (vocabulary file, JSONL data, pair layout)."""


class ConfigError(KermitError, ValueError):
    """Inconsistent or out-of-range configuration."""


class ConstraintError(KermitError):
    """An operation would violate a structural constraint, e.g. inserting
    into a frozen slot."""


class SizeLimitError(KermitError):
    """Exhaustive-enumeration helpers refuse inputs past their size guard."""


class LengthError(KermitError):
    """A canvas (plus sentinels) exceeds the model's position table."""


class NumericError(KermitError):
    """A non-finite value appeared where one is not allowed."""


class OracleFailure(KermitError):
    """A self-check suite found a deviation beyond tolerance."""


class CheckpointError(KermitError):
    """Base class for checkpoint serialization errors."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or structurally invalid checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before all declared payload was read."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor shapes disagree with the stored configuration."""
