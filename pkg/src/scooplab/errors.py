"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and StageError to exit code 3;
everything else is a bug.
"""


class ScooplabError(Exception):
    """Base class for all package errors."""


class ConfigError(ScooplabError):
    """Invalid configuration (bad geometry, bad plan, malformed config file)."""


class ParseError(ScooplabError):
    """A stored file could not be decoded."""

    def __init__(self, message, path=None, line=None, offset=None):
        detail = message
        if path is not None:
            detail += f" [{path}"
            if line is not None:
                detail += f":{line}"
            detail += "]"
        if offset is not None:
            detail += f" (byte offset {offset})"
        super().__init__(detail)
        self.path = path
        self.line = line
        self.offset = offset


class EmptyDatasetError(ScooplabError):
    """A training set or demonstration has no usable steps."""


class DuplicateIdError(ScooplabError):
    """Two demonstrations or datasets share an id."""


class ProtocolError(ScooplabError):
    """Takeover/wire protocol contract violated by the caller."""


class DimensionalityError(ScooplabError):
    """Estimator needs more samples than dimensions; project the embeddings first."""


class NumericError(ScooplabError):
    """A numeric precondition failed (singular covariance, non-finite values)."""


class StageError(ScooplabError):
    """A protocol stage failed; completed artifacts are retained."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
