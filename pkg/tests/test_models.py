"""Tests for models module."""

import math

import numpy as np
import pytest

from sgbm_exposure.exceptions import ModelError
from sgbm_exposure.models import (
    ContractKind,
    ContractSpec,
    Family,
    ModelSpec,
    TimeGrid,
    bermudan,
    check_setup,
    down_and_out,
    european,
    payoff,
    preset,
    preset_names,
)


class TestModelSpec:
    """Test cases for ModelSpec."""

    def test_factors_per_family(
        self, bs_model: ModelSpec, heston_model: ModelSpec, bshw_model: ModelSpec, hhw_model: ModelSpec
    ) -> None:
        """Test state factors and dimensions of the four families."""
        assert bs_model.factors == ("x",)
        assert heston_model.factors == ("x", "v")
        assert bshw_model.factors == ("x", "r")
        assert hhw_model.factors == ("x", "v", "r")
        assert hhw_model.n_dims == 3

    def test_log_spot(self, heston_model: ModelSpec) -> None:
        """Test that x0 is the log of the spot."""
        assert heston_model.x0 == pytest.approx(math.log(100.0))

    def test_feller_flag_is_reported_not_enforced(self, heston_model: ModelSpec) -> None:
        """Test that a Feller violation still yields a valid model."""
        assert heston_model.feller_satisfied is False
        relaxed = ModelSpec(
            Family.HESTON, s0=100.0, r0=0.0, v0=0.04, kappa=2.0, vbar=0.04, gamma=0.2
        )
        assert relaxed.feller_satisfied is True

    def test_negative_spot_rejected(self) -> None:
        """Test that a non-positive spot raises ModelError."""
        with pytest.raises(ModelError, match="Spot price"):
            ModelSpec(Family.BS, s0=-1.0, r0=0.0, sigma=0.2)

    def test_correlation_out_of_range(self) -> None:
        """Test that correlations outside [-1, 1] are rejected."""
        with pytest.raises(ModelError, match="rho_xv"):
            ModelSpec(
                Family.HESTON, s0=100.0, r0=0.0, v0=0.04, kappa=1.0, vbar=0.04, gamma=0.3, rho_xv=-1.5
            )

    def test_indefinite_correlation_matrix(self) -> None:
        """Test that an indefinite correlation matrix is rejected."""
        with pytest.raises(ModelError, match="positive semi-definite"):
            ModelSpec(
                Family.HHW,
                s0=100.0,
                r0=0.02,
                v0=0.05,
                kappa=0.3,
                vbar=0.05,
                gamma=0.6,
                lam=0.01,
                theta=0.02,
                eta=0.01,
                rho_xv=0.9,
                rho_xr=0.9,
            )

    def test_black_scholes_needs_sigma(self) -> None:
        """Test that the constant-volatility families require sigma > 0."""
        with pytest.raises(ModelError, match="sigma"):
            ModelSpec(Family.BS, s0=100.0, r0=0.02)

    def test_constant_rate_bond(self, bs_model: ModelSpec) -> None:
        """Test the deterministic-rate zero-coupon bond."""
        assert bs_model.zero_coupon_bond(2.0) == pytest.approx(math.exp(-0.04))

    def test_hull_white_bond_without_rate_volatility(self) -> None:
        """Test that the Hull-White bond at r0 = theta and eta = 0 is a flat discount."""
        model = ModelSpec(
            Family.BSHW, s0=100.0, r0=0.02, lam=0.5, theta=0.02, eta=0.0, sigma=0.2
        )
        assert model.zero_coupon_bond(5.0) == pytest.approx(math.exp(-0.1), rel=1e-12)

    def test_hull_white_bond_convexity(self, bshw_model: ModelSpec) -> None:
        """Test that rate volatility raises the bond price above the flat discount."""
        assert bshw_model.zero_coupon_bond(10.0) > math.exp(-0.2)

    def test_dict_round_trip(self, hhw_model: ModelSpec) -> None:
        """Test that to_dict and from_dict reproduce the model."""
        assert ModelSpec.from_dict(hhw_model.to_dict()) == hhw_model

    def test_from_dict_unknown_field(self, hhw_model: ModelSpec) -> None:
        """Test that unknown fields are rejected."""
        data = hhw_model.to_dict() | {"kapa": 1.0}
        with pytest.raises(ModelError, match="kapa"):
            ModelSpec.from_dict(data)


class TestContractSpec:
    """Test cases for ContractSpec and payoffs."""

    def test_put_payoff(self) -> None:
        """Test max(K - S, 0) for a put."""
        contract = european(-1, 100.0, 1.0)
        np.testing.assert_allclose(payoff(contract, [90.0, 100.0, 110.0]), [10.0, 0.0, 0.0])

    def test_call_payoff(self) -> None:
        """Test max(S - K, 0) for a call."""
        contract = european(1, 100.0, 1.0)
        np.testing.assert_allclose(payoff(contract, [90.0, 120.0]), [0.0, 20.0])

    def test_invalid_omega(self) -> None:
        """Test that omega must be +1 or -1."""
        with pytest.raises(ModelError, match="omega"):
            ContractSpec(ContractKind.EUROPEAN, 0, 100.0, 1.0)

    def test_barrier_needs_level(self) -> None:
        """Test that a barrier contract requires a barrier level."""
        with pytest.raises(ModelError, match="barrier"):
            ContractSpec(ContractKind.BARRIER, -1, 100.0, 1.0)

    def test_bermudan_needs_exercise_dates(self) -> None:
        """Test that a Bermudan contract requires exercise dates."""
        with pytest.raises(ModelError, match="exercise date"):
            ContractSpec(ContractKind.BERMUDAN, -1, 100.0, 1.0)

    def test_bermudan_exercises_after_inception(self) -> None:
        """Test that the Bermudan builder uses every date after t_0."""
        grid = TimeGrid.uniform(1.0, 10, 0.05)
        contract = bermudan(-1, 100.0, grid)
        assert contract.exercise_dates == grid.dates[1:]
        assert contract.tenor == pytest.approx(1.0)

    def test_dict_round_trip(self) -> None:
        """Test that contracts serialize to plain data and back."""
        contract = down_and_out(-1, 100.0, 1.0, 80.0)
        assert ContractSpec.from_dict(contract.to_dict()) == contract


class TestTimeGrid:
    """Test cases for TimeGrid."""

    def test_uniform_grid(self) -> None:
        """Test equally spaced dates and substep counts."""
        grid = TimeGrid.uniform(1.0, 10, 0.05)
        assert grid.M == 10
        assert grid.tenor == pytest.approx(1.0)
        assert all(grid.substeps(m) == 2 for m in range(grid.M))

    def test_substep_must_divide_intervals(self) -> None:
        """Test that an incompatible substep is rejected."""
        with pytest.raises(ModelError, match="does not divide"):
            TimeGrid((0.0, 0.5, 1.0), 0.3)

    def test_first_date_is_zero(self) -> None:
        """Test that grids start at t_0 = 0."""
        with pytest.raises(ModelError, match="First monitoring date"):
            TimeGrid((0.1, 0.5), 0.1)

    def test_dates_increase(self) -> None:
        """Test that dates must be strictly increasing."""
        with pytest.raises(ModelError, match="strictly increasing"):
            TimeGrid((0.0, 0.5, 0.5), 0.1)

    def test_index_of(self) -> None:
        """Test lookup of monitoring dates."""
        grid = TimeGrid.uniform(1.0, 4, 0.05)
        assert grid.index_of(0.5) == 2
        assert grid.index_of(0.3) is None


class TestSetupAndPresets:
    """Test cases for consistency checks and presets."""

    def test_tenor_mismatch(self, heston_model: ModelSpec) -> None:
        """Test that the grid must end at the contract tenor."""
        grid = TimeGrid.uniform(2.0, 4, 0.05)
        with pytest.raises(ModelError, match="tenor"):
            check_setup(heston_model, european(-1, 100.0, 1.0), grid)

    def test_barrier_above_spot(self, heston_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that a down-and-out barrier must lie below the spot."""
        with pytest.raises(ModelError, match="barrier"):
            check_setup(heston_model, down_and_out(-1, 100.0, 1.0, 120.0), small_grid)

    def test_all_presets_build(self) -> None:
        """Test that every preset yields a consistent setup."""
        for name in preset_names():
            model, contract, grid = preset(name)
            check_setup(model, contract, grid)

    def test_test_a_preset(self) -> None:
        """Test the Heston Bermudan preset."""
        model, contract, grid = preset("TestA")
        assert model.family is Family.HESTON
        assert contract.kind is ContractKind.BERMUDAN
        assert contract.strike == pytest.approx(100.0)
        assert grid.M == 10
        assert model.kappa == pytest.approx(1.15)

    def test_barrier_preset_level(self) -> None:
        """Test that barrier presets knock out at 80."""
        _, contract, _ = preset("TestA_Barrier")
        assert contract.barrier == pytest.approx(80.0)

    def test_european_implied_vol_preset(self) -> None:
        """Test the ten-year European preset grid."""
        model, contract, grid = preset("TestB_rho02_T10_European")
        assert model.rho_xr == pytest.approx(0.2)
        assert contract.kind is ContractKind.EUROPEAN
        assert grid.M == 200

    def test_impact_black_scholes_volatility(self) -> None:
        """Test that the model-impact BS preset uses sigma = sqrt(0.05)."""
        model, _, _ = preset("Impact_BS_T1")
        assert model.family is Family.BS
        assert model.sigma == pytest.approx(math.sqrt(0.05))

    def test_unknown_preset(self) -> None:
        """Test that unknown preset names raise ModelError."""
        with pytest.raises(ModelError, match="Unknown preset"):
            preset("TestC")
