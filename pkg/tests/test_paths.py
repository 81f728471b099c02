"""Tests for paths module."""

import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from sgbm_exposure.exceptions import SimulationError
from sgbm_exposure.models import ModelSpec, TimeGrid
from sgbm_exposure.paths import (
    BLOCK_SIZE,
    export_paths,
    sample_moment,
    sample_moment_error,
    simulate,
)


class TestSimulate:
    """Test cases for path simulation."""

    def test_shapes_and_initial_state(self, heston_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test array shapes, missing factors and the initial state."""
        paths = simulate(heston_model, small_grid, 500, seed=1)

        assert paths.x.shape == (500, 5)
        assert paths.v is not None and paths.v.shape == (500, 5)
        assert paths.r is None
        np.testing.assert_allclose(paths.x[:, 0], heston_model.x0)
        np.testing.assert_allclose(paths.disc[:, 0], 1.0)
        np.testing.assert_allclose(paths.rate(2), heston_model.r0)

    def test_variance_never_negative(self, hhw_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that the QE variance stays non-negative when Feller fails."""
        paths = simulate(hhw_model, small_grid, 2000, seed=3)
        assert paths.v is not None
        assert np.all(paths.v >= 0.0)

    def test_same_seed_is_reproducible(self, hhw_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that a seed fixes the paths."""
        first = simulate(hhw_model, small_grid, 300, seed=7)
        second = simulate(hhw_model, small_grid, 300, seed=7)
        np.testing.assert_array_equal(first.x, second.x)
        np.testing.assert_array_equal(first.disc, second.disc)

    def test_streams_are_independent(self, heston_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that another stream on the same seed gives other paths."""
        first = simulate(heston_model, small_grid, 300, seed=7)
        second = simulate(heston_model, small_grid, 300, seed=7, stream=1)
        assert not np.array_equal(first.x, second.x)

    def test_worker_count_does_not_change_paths(self, bs_model: ModelSpec) -> None:
        """Test that threaded block generation matches the serial result."""
        grid = TimeGrid((0.0, 0.5, 1.0), 0.25)
        n = BLOCK_SIZE + 100
        serial = simulate(bs_model, grid, n, seed=11)
        threaded = simulate(bs_model, grid, n, seed=11, workers=3)
        np.testing.assert_array_equal(serial.x, threaded.x)

    def test_too_few_paths(self, bs_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that fewer than two paths raise SimulationError."""
        with pytest.raises(SimulationError, match="at least 2 paths"):
            simulate(bs_model, small_grid, 1, seed=0)

    def test_discounted_asset_is_martingale(self, bs_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test E[D(0,T) S_T] = S0 within four standard errors."""
        paths = simulate(bs_model, small_grid, 20_000, seed=5)
        discounted = np.exp(paths.x[:, -1]) * paths.disc[:, -1]
        stderr = discounted.std(ddof=1) / math.sqrt(discounted.size)
        assert abs(discounted.mean() - bs_model.s0) < 4.0 * stderr

    def test_discount_matches_bond(self, bshw_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that the mean pathwise discount reproduces the zero-coupon bond."""
        paths = simulate(bshw_model, small_grid, 20_000, seed=5)
        disc = paths.disc[:, -1]
        stderr = disc.std(ddof=1) / math.sqrt(disc.size)
        bond = bshw_model.zero_coupon_bond(1.0)
        assert abs(disc.mean() - bond) < 4.0 * stderr + 1e-5


class TestBarrierMonitoring:
    """Test cases for running-minimum tracking."""

    def test_requires_tracking(self, heston_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that knock-out queries need tracked minima."""
        paths = simulate(heston_model, small_grid, 100, seed=1)
        with pytest.raises(SimulationError, match="barrier monitoring"):
            paths.knocked_out(1, math.log(80.0))

    def test_running_minimum_properties(self, heston_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that the running minimum bounds the path and knock-outs persist."""
        paths = simulate(heston_model, small_grid, 2000, seed=2, track_minimum=True)
        assert paths.running_min is not None
        assert np.all(paths.running_min <= paths.x)
        log_barrier = math.log(90.0)
        previous = paths.knocked_out(0, log_barrier)
        assert not previous.any()
        for m in range(1, small_grid.M + 1):
            current = paths.knocked_out(m, log_barrier)
            assert np.all(current[previous])
            previous = current
        assert previous.any()


class TestSampleMoments:
    """Test cases for cross-sectional moments and path export."""

    def test_initial_moment(self, heston_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that date-0 moments equal the initial state."""
        paths = simulate(heston_model, small_grid, 200, seed=1)
        assert sample_moment(paths, 0, (1, 0)) == pytest.approx(heston_model.x0)
        assert sample_moment(paths, 0, (0, 1)) == pytest.approx(heston_model.v0)
        assert sample_moment_error(paths, 0, (1, 0)) == pytest.approx(0.0, abs=1e-12)

    def test_invalid_exponents(self, heston_model: ModelSpec, small_grid: TimeGrid) -> None:
        """Test that exponents must match the factor count."""
        paths = simulate(heston_model, small_grid, 200, seed=1)
        with pytest.raises(SimulationError, match="Exponents"):
            sample_moment(paths, 1, (1, 0, 0))
        with pytest.raises(SimulationError, match="out of range"):
            sample_moment(paths, 9, (1, 0))

    def test_export_paths(self, hhw_model: ModelSpec, small_grid: TimeGrid, tmp_path: Path) -> None:
        """Test the long CSV path dump."""
        paths = simulate(hhw_model, small_grid, 20, seed=1)
        target = export_paths(paths, tmp_path / "dump" / "paths.csv")

        frame = pd.read_csv(target)
        assert list(frame.columns) == ["path", "date", "t", "x", "v", "r", "disc"]
        assert len(frame) == 20 * 5
        np.testing.assert_allclose(frame.loc[frame["date"] == 2, "x"], paths.x[:, 2])
