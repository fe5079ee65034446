"""Exception types shared across the package."""


class DimensionError(ValueError):
    """An array does not have the shape an operation expects."""


class NumericalError(ArithmeticError):
    """A loss, gradient or parameter became non-finite."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        # last finite state, when the raiser had one
        self.checkpoint = checkpoint


class DegenerateRepresentation(NumericalError):
    """An encoder produced a zero-norm feature vector."""


class ConfigError(ValueError):
    """A configuration document is malformed or references missing artifacts."""


class AttackError(ValueError):
    """An attack was requested that the target agent cannot support."""
