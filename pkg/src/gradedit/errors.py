"""Exception hierarchy shared by every gradedit module."""


class GradEditError(Exception):
    """Base class for all errors raised by gradedit."""


class ConfigError(GradEditError, ValueError):
    """Invalid or inconsistent configuration (unknown key, bad range, missing layer)."""


class ContractError(GradEditError, ValueError):
    """A call violated a shape or value precondition."""


class TrainingDivergedError(GradEditError, RuntimeError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {message}")


class AttackError(GradEditError, RuntimeError):
    """Raised when an attack or oracle produces unusable output mid-run."""


class OracleStateError(GradEditError, RuntimeError):
    """Oracle used in an order its state does not allow (e.g. sp not computed)."""


class ParseError(GradEditError):
    """Base class for tensor file / checkpoint parsing failures."""


class BadMagicError(ParseError):
    pass


class UnsupportedVersionError(ParseError):
    pass


class TruncatedFileError(ParseError):
    pass


class CheckpointMismatchError(ParseError):
    """Checkpoint contents do not match the requested architecture."""
