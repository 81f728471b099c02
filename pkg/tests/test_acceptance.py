"""Large-N acceptance runs against reference values.

Deselected by default; run with ``pytest -m slow``.
"""

import dataclasses
import math
import os
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from sgbm_exposure.config import RunConfig
from sgbm_exposure.credit import black_scholes_price, mc_european_oracle
from sgbm_exposure.engine import SweepConfig, backward_sweep, bump_delta, path_estimator, relative_l2
from sgbm_exposure.models import TimeGrid, european, preset
from sgbm_exposure.moments import validate_backends
from sgbm_exposure.paths import simulate
from sgbm_exposure.runner import implied_vols, run

pytestmark = pytest.mark.slow

SEEDS = [1, 2, 3, 4, 5]


def _run(name: str, tmp_path: Path, paths: int, seeds: list[int] = SEEDS, **regression) -> dict:
    config = RunConfig.from_preset(name)
    config.output_dir = tmp_path
    config.log_level = "WARNING"
    config.simulation.paths = paths
    config.simulation.seeds = tuple(seeds)
    for key, value in regression.items():
        setattr(config.regression, key, value)
    with patch.dict(os.environ, {}, clear=True):
        return run(config).summary["estimators"]


class TestHestonBermudan:
    """Bermudan put under the TestA Heston parameters."""

    def test_values_greeks_and_cva(self, tmp_path: Path) -> None:
        """Test V0, Delta, Gamma and CVA of both estimators."""
        stats = _run("TestA", tmp_path, 100_000)
        direct, path = stats["direct"], stats["path"]

        assert direct["V0"]["mean"] == pytest.approx(5.486, rel=0.01)
        assert path["V0"]["mean"] == pytest.approx(5.476, rel=0.01)
        assert direct["DeltaEE0"]["mean"] == pytest.approx(-0.328, rel=0.02)
        assert direct["GammaEE0"]["mean"] == pytest.approx(0.0247, rel=0.05)
        assert direct["CVA"]["mean"] == pytest.approx(0.0926, rel=0.03)

    def test_path_estimator_brackets_direct(self, heston_model) -> None:
        """Test V0_path <= V0_direct + 3 standard errors and the shrinking profile gap."""
        _, contract, grid = preset("TestA")
        gaps = {}
        for label, config in {
            "coarse": SweepConfig(order=1, iterations=1),
            "fine": SweepConfig(order=2, iterations=3),
        }.items():
            paths = simulate(heston_model, grid, 100_000, seed=1)
            sweep = backward_sweep(paths, contract, config)
            fresh = path_estimator(sweep)
            assert fresh.value <= sweep.report.value + 3.0 * (fresh.value_stderr or 0.0)
            gaps[label] = relative_l2(sweep.report.ee, fresh.ee)
        assert gaps["fine"] < gaps["coarse"]

    def test_bump_delta(self, heston_model) -> None:
        """Test the regression Delta against common-random-number bumps."""
        _, contract, grid = preset("TestA")
        config = SweepConfig(order=2, iterations=3)
        paths = simulate(heston_model, grid, 100_000, seed=1)
        delta = backward_sweep(paths, contract, config).report.delta[0]
        assert delta == pytest.approx(bump_delta(heston_model, contract, grid, 100_000, 1, config), rel=0.01)


class TestHestonBarrier:
    """Down-and-out put with L = 80 under TestA."""

    def test_values_greeks_and_cva(self, tmp_path: Path) -> None:
        """Test V0, Delta, Gamma and CVA of the direct estimator."""
        direct = _run("TestA_Barrier", tmp_path, 100_000)["direct"]

        assert direct["V0"]["mean"] == pytest.approx(1.2300, rel=0.01)
        assert direct["DeltaEE0"]["mean"] == pytest.approx(-0.0609, rel=0.05)
        assert direct["GammaEE0"]["mean"] == pytest.approx(0.0020, rel=0.30)
        assert direct["CVA"]["mean"] == pytest.approx(0.0363, rel=0.03)


class TestHestonHullWhite:
    """Bermudan and European contracts under Heston Hull-White."""

    @pytest.mark.parametrize(
        ("name", "value", "cva"),
        [("TestB_rho02_T5", 11.37, 0.983), ("TestB_rho06_T10", 15.92, 2.968)],
    )
    def test_bermudan(self, tmp_path: Path, name: str, value: float, cva: float) -> None:
        """Test V0 and CVA with 512 bundles."""
        direct = _run(name, tmp_path, 200_000, seeds=[1], sqrt_variance_table=True)["direct"]
        assert direct["V0"]["mean"] == pytest.approx(value, rel=0.015)
        assert direct["CVA"]["mean"] == pytest.approx(cva, rel=0.03)

    def test_implied_vols(self, tmp_path: Path) -> None:
        """Test the implied volatility strip of the ten-year European put."""
        config = RunConfig.from_preset("TestB_rho02_T10_European")
        config.output_dir = tmp_path
        config.log_level = "WARNING"
        config.simulation.paths = 200_000
        config.regression.sqrt_variance_table = True
        strikes = [40.0, 80.0, 100.0, 120.0, 180.0]
        table = implied_vols(config, strikes)

        expected = np.array([25.96, 19.95, 18.34, 17.43, 17.32]) / 100.0
        np.testing.assert_allclose(table["sgbm_vol"], expected, atol=0.001)
        assert np.all(table["vol_gap"] < 0.001)

    def test_bump_delta(self, hhw_model) -> None:
        """Test the regression Delta against common-random-number bumps."""
        _, contract, grid = preset("TestB_rho02_T5")
        config = SweepConfig(order=2, iterations=3, sqrt_variance_table=True)
        paths = simulate(hhw_model, grid, 100_000, seed=1)
        delta = backward_sweep(paths, contract, config).report.delta[0]
        assert delta == pytest.approx(bump_delta(hhw_model, contract, grid, 100_000, 1, config), rel=0.01)


class TestDegenerateModels:
    """Limits that collapse onto simpler dynamics."""

    def test_heston_without_vol_of_vol_is_black_scholes(self) -> None:
        """Test the European put of a flat-variance Heston model."""
        model = dataclasses.replace(preset("TestA")[0], gamma=1e-12)
        grid = TimeGrid.uniform(1.0, 10, 0.05)
        price, stderr = mc_european_oracle(model, european(-1, 100.0, 1.0), grid, 200_000, 1)
        expected = black_scholes_price(100.0, 100.0, 1.0, model.r0, math.sqrt(model.v0), -1)
        assert abs(price - expected) < 3.0 * stderr

    def test_european_matches_cash_flow_monte_carlo(self, heston_model) -> None:
        """Test SGBM with intermediate dates against single-step discounted cash flows."""
        grid = TimeGrid.uniform(1.0, 10, 0.05)
        contract = european(-1, 100.0, 1.0)
        paths = simulate(heston_model, grid, 100_000, seed=2)
        value = backward_sweep(paths, contract, SweepConfig(iterations=3)).report.value
        price, stderr = mc_european_oracle(heston_model, contract, grid, 100_000, 2)
        assert abs(value - price) < 3.0 * stderr

    def test_hull_white_without_rate_vol_is_heston(self) -> None:
        """Test that HHW with eta -> 0 reproduces the Heston EE profile."""
        hhw, contract, grid = preset("Impact_HHW_T1")
        hhw = dataclasses.replace(hhw, eta=1e-12)
        heston = preset("Impact_Heston_T1")[0]
        config = SweepConfig(order=2, iterations=3, sqrt_variance_table=True)
        profiles = [
            backward_sweep(simulate(model, grid, 100_000, seed=1), contract, config).report.ee
            for model in (heston, hhw)
        ]
        assert relative_l2(*profiles) < 1e-2


class TestMomentBackends:
    """Closed-form against generic Heston moments."""

    def test_backends_agree(self, heston_model) -> None:
        """Test agreement to 1e-6 relative on a 10 x 10 (tau, v) grid."""
        taus = np.linspace(0.1, 1.0, 10).tolist()
        variances = (np.linspace(0.1, 3.0, 10) * heston_model.vbar).tolist()
        table = validate_backends(heston_model, taus, variances, tolerance=1e-6)
        assert table["ok"].all()


class TestDeterminism:
    """Reruns are byte-identical regardless of thread count."""

    def test_thread_count_does_not_change_outputs(self, tmp_path: Path) -> None:
        """Test identical report files for one and four workers."""
        texts = []
        for workers in (1, 4):
            config = RunConfig.from_preset("TestA")
            config.output_dir = tmp_path / f"w{workers}"
            config.log_level = "WARNING"
            config.simulation.paths = 40_000
            config.simulation.workers = workers
            with patch.dict(os.environ, {}, clear=True):
                run(config)
            texts.append((config.output_dir / "exposure_path_seed1.csv").read_text(encoding="utf-8"))
        assert texts[0] == texts[1]
