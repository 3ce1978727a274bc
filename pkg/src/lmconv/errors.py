"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Bad shapes, dimensions or out-of-range values."""


class Unsupported(ValueError):
    """Configuration outside what the layer implements (e.g. even kernels)."""


class NumericFailure(FloatingPointError):
    """A non-finite value appeared in activations, losses or gradients."""

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class ContractViolation(RuntimeError):
    """An operation was invoked without the state it requires."""


class FormatError(ValueError):
    """Malformed file contents (IDX, PNM, checkpoint, mask dumps)."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
