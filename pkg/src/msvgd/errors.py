"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input lies outside the open domain an operation is defined on."""


class NumericsError(ArithmeticError):
    """A computation left the representable range (underflow to a boundary,
    non-finite intermediate, loss of injectivity)."""

    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""
