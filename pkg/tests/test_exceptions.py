"""Tests for exceptions module."""

import pytest

from sgbm_exposure.exceptions import (
    BundlingError,
    ConfigurationError,
    CreditError,
    EstimatorError,
    GreeksUnavailableError,
    ModelError,
    MomentError,
    RegressionError,
    ReportError,
    SgbmExposureError,
    SimulationError,
)


class TestExceptions:
    """Test cases for custom exceptions."""

    def test_base_exception(self) -> None:
        """Test base SgbmExposureError exception."""
        error = SgbmExposureError("Test error")
        assert str(error) == "Test error"
        assert isinstance(error, Exception)

    def test_configuration_error(self) -> None:
        """Test ConfigurationError exception."""
        error = ConfigurationError("Unknown field 'model.kapa' (line 4)")
        assert str(error) == "Unknown field 'model.kapa' (line 4)"
        assert isinstance(error, SgbmExposureError)

    def test_greeks_unavailable_is_regression_error(self) -> None:
        """Test that GreeksUnavailableError is caught as a RegressionError."""
        with pytest.raises(RegressionError, match="order 0"):
            raise GreeksUnavailableError("Basis order 0 has no x-derivatives")

    def test_exception_raising(self) -> None:
        """Test that exceptions can be raised and caught."""
        with pytest.raises(ModelError, match="Spot"):
            raise ModelError("Spot price must be positive")

        with pytest.raises(MomentError, match="degree"):
            raise MomentError("Moment degree 4 above cap")

        with pytest.raises(CreditError, match="bounds"):
            raise CreditError("Price outside the no-arbitrage bounds")

    def test_exception_inheritance(self) -> None:
        """Test that all custom exceptions inherit from base exception."""
        exceptions = [
            ConfigurationError("test"),
            ModelError("test"),
            SimulationError("test"),
            MomentError("test"),
            BundlingError("test"),
            RegressionError("test"),
            GreeksUnavailableError("test"),
            EstimatorError("test"),
            CreditError("test"),
            ReportError("test"),
        ]

        for exc in exceptions:
            assert isinstance(exc, SgbmExposureError)
            assert isinstance(exc, Exception)
