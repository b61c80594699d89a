"""Exception hierarchy shared by all modules."""


class ManifoldInversionError(Exception):
    """Base class for package errors."""


class DimensionError(ManifoldInversionError, ValueError):
    """Shapes do not conform."""


class NumericError(ManifoldInversionError, ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""


class CapacityError(ManifoldInversionError):
    """A dense object would exceed the configured size ceiling."""

    def __init__(self, required: int, allowed: int):
        self.required = required
        self.allowed = allowed
        super().__init__(f"dense Jacobian needs {required} entries, ceiling is {allowed}")


class DegenerateTangentError(ManifoldInversionError):
    """Jacobian is rank deficient, so no k-dimensional tangent space exists."""

    def __init__(self, singular_values, tol: float):
        self.singular_values = list(map(float, singular_values))
        self.tol = tol
        spectrum = ", ".join(f"{s:.3e}" for s in self.singular_values)
        super().__init__(f"rank-deficient Jacobian (relative tol {tol:g}); spectrum: [{spectrum}]")


class ZeroGradientError(ManifoldInversionError, ValueError):
    """Alignment score requested for a zero vector."""


class TrainingDivergedError(ManifoldInversionError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class DegenerateDecoderError(ManifoldInversionError):
    pass


class DatasetFormatError(ManifoldInversionError):
    """Malformed or inconsistent dataset directory."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class MissingFieldError(DatasetFormatError):
    def __init__(self, field: str, where: str = "manifest"):
        self.field = field
        super().__init__(f"{where} is missing required field {field!r}")


class ConfigError(ManifoldInversionError):
    pass


class MissingArtifactError(ManifoldInversionError):
    pass
