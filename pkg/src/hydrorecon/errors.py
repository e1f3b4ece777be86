"""Exception hierarchy shared across the pipeline."""


class HydroReconError(Exception):
    """Base class for all package errors."""


class DataError(HydroReconError, ValueError):
    """Input data is missing, malformed or unusable."""


class ConfigError(HydroReconError, ValueError):
    """A configuration value is invalid."""


class SupportError(HydroReconError, ValueError):
    """A parameter value lies outside the support of its distribution."""

    def __init__(self, name, value):
        super().__init__(f"parameter {name!r} out of support: {value!r}")
        self.name = name
        self.value = value


class NumericalError(HydroReconError, FloatingPointError):
    """A density evaluated to a non-finite value during sampling."""
