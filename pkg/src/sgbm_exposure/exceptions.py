"""Custom exceptions for SGBM Exposure."""


class SgbmExposureError(Exception):
    """Base exception for SGBM Exposure errors."""

    pass


class ConfigurationError(SgbmExposureError):
    """Raised when a run configuration is invalid or contains unknown fields."""

    pass


class ModelError(SgbmExposureError):
    """Raised when model, contract or time-grid parameters are invalid."""

    pass


class SimulationError(SgbmExposureError):
    """Raised when a path simulation request is invalid."""

    pass


class MomentError(SgbmExposureError):
    """Raised when a discounted moment or characteristic function cannot be evaluated."""

    pass


class BundlingError(SgbmExposureError):
    """Raised when bundling settings or bundle rules are inconsistent with the data."""

    pass


class RegressionError(SgbmExposureError):
    """Raised when a basis or regression request is unsupported."""

    pass


class GreeksUnavailableError(RegressionError):
    """Raised when exposure Greeks are requested from a basis that cannot provide them."""

    pass


class EstimatorError(SgbmExposureError):
    """Raised when the backward sweep or path estimator lacks required inputs."""

    pass


class CreditError(SgbmExposureError):
    """Raised when credit inputs or oracle pricing requests are invalid."""

    pass


class ReportError(SgbmExposureError):
    """Raised when exposure reports cannot be read or compared."""

    pass
