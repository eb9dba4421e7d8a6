"""Exception types shared across the toolkit."""


class DocshadeError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(DocshadeError):
    """Operand shapes are incompatible."""


class CountMismatch(DocshadeError):
    """Number of provided items disagrees with the declared count."""


class OutOfRange(DocshadeError):
    """A scalar argument lies outside its documented domain."""


class TooSmall(DocshadeError):
    """Input raster is too small for the requested operation."""


class EmptyReference(DocshadeError):
    """Reference string or token sequence is empty."""


class ZeroVector(DocshadeError):
    """A vector argument has zero norm."""


class EmptyTextureSet(DocshadeError):
    """No readable texture images were found."""


class NonFiniteDetected(DocshadeError):
    """NaN or infinity encountered on the gradient tape."""


class CheckpointMismatch(DocshadeError):
    """Checkpoint contents disagree with the expected configuration."""


class TrainingAborted(DocshadeError):
    """Training stopped after repeated non-finite steps."""


class FirewallViolation(DocshadeError):
    """A diagnostic-only ground truth leaked onto the gradient tape."""


class DataIoError(DocshadeError):
    """Dataset or checkpoint file could not be read or written."""


class UsageError(DocshadeError):
    """Invalid command-line or configuration input."""
