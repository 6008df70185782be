"""
Exception hierarchy for SplitHE

Every failure the training stack can report derives from SplitHEException.
Each class carries the process exit code the CLI returns for it, so the
command layer never has to guess how to map an error to a status.
"""


class SplitHEException(Exception):
    """
    Base class for all SplitHE errors.

    Subclasses set `exit_code` and build their own message from the
    structured fields they keep.
    """
    exit_code = 1


# ============================================================================
# NN CORE
# ============================================================================

class DimensionError(SplitHEException):
    """Raised when a tensor does not have the shape a layer expects."""
    exit_code = 1

    def __init__(self, axis, expected, actual, where=''):
        self.axis = axis
        self.expected = expected
        self.actual = actual
        self.where = where
        prefix = f"{where}: " if where else ''
        super().__init__(f"{prefix}dimension mismatch on axis '{axis}': expected {expected}, got {actual}")


class InvalidStateError(SplitHEException):
    """Raised when an operation runs before the state it depends on exists."""
    exit_code = 1


class DivergenceError(SplitHEException):
    """Raised when the loss stops being a finite number."""
    exit_code = 4

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch}: loss={loss}")


# ============================================================================
# HOMOMORPHIC ENCRYPTION
# ============================================================================

class ParameterError(SplitHEException):
    """Raised for invalid HE parameter sets."""
    exit_code = 7

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"Invalid HE parameter '{field}': {message}")


class PrecisionError(SplitHEException):
    """Raised when scaled values do not fit the coefficient modulus."""
    exit_code = 7


class LevelError(SplitHEException):
    """Raised when two operands live at different levels or scales."""
    exit_code = 7

    def __init__(self, left, right, what='level'):
        self.left = left
        self.right = right
        super().__init__(f"Operand {what} mismatch: {left} vs {right}")


class LevelExhaustedError(SplitHEException):
    """Raised when a ciphertext has no prime left to drop."""
    exit_code = 7

    def __init__(self):
        super().__init__("Cannot rescale a ciphertext at level 0: modulus chain exhausted")


class MissingKeyError(SplitHEException):
    """Raised when a context lacks the key an operation needs."""
    exit_code = 7

    def __init__(self, key_name):
        self.key_name = key_name
        super().__init__(f"Context holds no {key_name}")


# ============================================================================
# WIRE / PROTOCOL
# ============================================================================

class ProtocolError(SplitHEException):
    """Raised for unknown message types and out-of-order messages."""
    exit_code = 5


class IncompleteFrameError(ProtocolError):
    """Raised when a frame ends before its declared length."""

    def __init__(self, expected, received):
        self.expected = expected
        self.received = received
        super().__init__(f"Incomplete frame: expected {expected} bytes, received {received}")


class HandshakeError(ProtocolError):
    """Raised when the two parties disagree on the training configuration."""

    def __init__(self, field, local, remote):
        self.field = field
        super().__init__(f"Handshake mismatch on '{field}': local={local!r}, remote={remote!r}")


class TransportError(SplitHEException):
    """Raised when the connection is lost or cannot be opened."""
    exit_code = 3

    def __init__(self, message, progress=None):
        self.progress = progress
        if progress:
            message = f"{message} (progress: {progress})"
        super().__init__(message)


# ============================================================================
# DATA / CLI
# ============================================================================

class DatasetParseError(SplitHEException):
    """Raised for malformed dataset rows."""
    exit_code = 6

    def __init__(self, row, message):
        self.row = row
        super().__init__(f"Malformed dataset row {row}: {message}")


class UsageError(SplitHEException):
    """Raised for invalid configuration values or CLI arguments."""
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"Invalid value for '{field}': {message}")
