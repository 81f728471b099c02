"""Shared fixtures: small models and grids for fast tests."""

import math

import pytest

from sgbm_exposure.models import Family, ModelSpec, TimeGrid, preset


@pytest.fixture
def heston_model() -> ModelSpec:
    """Heston parameters of the TestA preset."""
    return preset("TestA")[0]


@pytest.fixture
def hhw_model() -> ModelSpec:
    """Heston Hull-White parameters with rho_xr = 0.2."""
    return preset("TestB_rho02_T5")[0]


@pytest.fixture
def bs_model() -> ModelSpec:
    return ModelSpec(Family.BS, s0=100.0, r0=0.02, sigma=math.sqrt(0.05))


@pytest.fixture
def bshw_model() -> ModelSpec:
    return ModelSpec(
        Family.BSHW,
        s0=100.0,
        r0=0.02,
        lam=0.01,
        theta=0.02,
        eta=0.01,
        sigma=math.sqrt(0.05),
        rho_xr=0.2,
    )


@pytest.fixture
def small_grid() -> TimeGrid:
    """Four quarterly monitoring dates on (0, 1] with weekly-ish substeps."""
    return TimeGrid.uniform(1.0, 4, 0.05)
