"""Exception types shared across the package."""


class LayergateError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(LayergateError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(LayergateError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(LayergateError):
    """A configuration value is out of its legal range."""


class NumericError(LayergateError):
    """A computation produced a non-finite value."""

    def __init__(self, message, step=None, batch_id=None):
        super().__init__(message)
        self.step = step
        self.batch_id = batch_id


class NotStableError(LayergateError):
    """Training never satisfied the stability criterion within its step budget."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class CheckpointError(LayergateError):
    """Base class for checkpoint file problems."""


class ChecksumError(CheckpointError):
    """Stored checksum does not match the file contents."""


class VersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class TruncatedError(CheckpointError):
    """Checkpoint file ends before the declared payload."""
