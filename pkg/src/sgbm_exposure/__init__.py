"""
SGBM Exposure - credit exposure profiles by bundled regression on discounted moments.

This package computes expected and potential future exposure, exposure Greeks and
CVA for European, Bermudan and down-and-out barrier options under Black-Scholes,
Heston, Black-Scholes Hull-White and Heston Hull-White dynamics.
"""

__version__ = "0.1.0"
__author__ = "Wicz-Cloud"
__license__ = "MIT"

from sgbm_exposure.credit import CreditSpec, cva
from sgbm_exposure.engine import (
    ExposureReport,
    SweepConfig,
    backward_sweep,
    path_estimator,
)
from sgbm_exposure.models import ContractSpec, ModelSpec, TimeGrid, preset
from sgbm_exposure.paths import simulate

__all__ = [
    "ContractSpec",
    "CreditSpec",
    "ExposureReport",
    "ModelSpec",
    "SweepConfig",
    "TimeGrid",
    "backward_sweep",
    "cva",
    "path_estimator",
    "preset",
    "simulate",
]
