"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A model or configuration parameter lies outside its admissible domain."""


class DegenerateSampleError(RuntimeError):
    """A realized sample is degenerate (zero sum of squares, zero residuals, ...)."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced an inconsistent result."""


class ConfigError(ValueError):
    """A run configuration (file or CLI) is malformed or inconsistent."""
