"""Tests for bundling module."""

import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from sgbm_exposure.bundling import (
    UNASSIGNED,
    BundleMethod,
    active_filter,
    classify,
    dump_assignment,
    equal_number,
    min_bundle_size,
    recursive_bifurcation,
    regression_pools,
    rotate2d,
    rotate3d,
    single_bundle,
)
from sgbm_exposure.exceptions import BundlingError


@pytest.fixture
def cloud() -> np.ndarray:
    """Correlated two-factor cloud."""
    rng = np.random.default_rng(3)
    x = rng.standard_normal(4000)
    v = 0.5 * x + 0.3 * rng.standard_normal(4000)
    return np.column_stack([x, v])


class TestRotation:
    """Test cases for the decorrelating rotations."""

    def test_positive_slope_flattens_line(self) -> None:
        """Test that d2 = 2 d1 rotates onto the first axis."""
        d1 = np.linspace(-1.0, 1.0, 11)
        _, q2, angle = rotate2d(d1, 2.0 * d1)
        np.testing.assert_allclose(q2, 0.0, atol=1e-12)
        assert angle == pytest.approx(math.atan(2.0))

    def test_negative_slope(self) -> None:
        """Test the sign handling for a negative slope."""
        d1 = np.linspace(-1.0, 1.0, 11)
        _, q2, angle = rotate2d(d1, -d1)
        np.testing.assert_allclose(q2, 0.0, atol=1e-12)
        assert angle == pytest.approx(0.75 * math.pi)

    def test_zero_slope_is_identity(self) -> None:
        """Test that uncorrelated columns are left in place."""
        d1 = np.array([-1.0, 1.0, -1.0, 1.0])
        d2 = np.array([1.0, 1.0, -1.0, -1.0])
        q1, q2, angle = rotate2d(d1, d2)
        np.testing.assert_allclose(q1, d1)
        np.testing.assert_allclose(q2, d2)
        assert angle == 0.0

    def test_rotate3d_preserves_norms(self) -> None:
        """Test that the three-dimensional rotation is orthogonal."""
        rng = np.random.default_rng(0)
        d1 = rng.standard_normal(200)
        d2 = 0.4 * d1 + rng.standard_normal(200)
        d3 = -0.2 * d1 + rng.standard_normal(200)
        q1, q2, q3, _, _ = rotate3d(d1, d2, d3)
        np.testing.assert_allclose(q1**2 + q2**2 + q3**2, d1**2 + d2**2 + d3**2)

    def test_malformed_columns(self) -> None:
        """Test that mismatched columns raise BundlingError."""
        with pytest.raises(BundlingError, match="equal length"):
            rotate2d([1.0, 2.0, 3.0], [1.0, 2.0])
        with pytest.raises(BundlingError, match="two observations"):
            rotate2d([1.0], [2.0])


class TestRecursiveBifurcation:
    """Test cases for recursive bifurcation."""

    def test_one_dimensional_quartiles(self) -> None:
        """Test that two levels on evenly spaced data give ordered quarters."""
        data = np.arange(1000, dtype=float)
        assignment, rule = recursive_bifurcation(data, 2)

        assert assignment.n_bundles == 4
        np.testing.assert_array_equal(assignment.sizes(), [250, 250, 250, 250])
        np.testing.assert_array_equal(assignment.bundle, np.arange(1000) // 250)
        assert rule.levels == 2

    def test_bundle_count_two_factors(self, cloud: np.ndarray) -> None:
        """Test (2^n)^j bundles covering every path."""
        assignment, rule = recursive_bifurcation(cloud, 3)
        assert assignment.n_bundles == 64
        assert assignment.sizes().sum() == cloud.shape[0]
        assert rule.angles and rule.rotation.shape == (2, 2)

    def test_inactive_paths_unassigned(self, cloud: np.ndarray) -> None:
        """Test that inactive paths are left out of every bundle."""
        active = np.arange(cloud.shape[0]) % 3 != 0
        assignment, _ = recursive_bifurcation(cloud, 2, active=active)
        assert np.all(assignment.bundle[~active] == UNASSIGNED)
        assert assignment.sizes().sum() == active.sum()

    def test_classify_reproduces_assignment(self, cloud: np.ndarray) -> None:
        """Test that the stored rule reproduces the fitted assignment bit for bit."""
        active = np.arange(cloud.shape[0]) % 5 != 0
        assignment, rule = recursive_bifurcation(cloud, 3, active=active, m=4)
        again = classify(rule, cloud, active, m=4)
        np.testing.assert_array_equal(again.bundle, assignment.bundle)

    def test_three_factor_cloud(self) -> None:
        """Test eight-way splits in three dimensions."""
        rng = np.random.default_rng(5)
        data = rng.standard_normal((3000, 3))
        assignment, rule = recursive_bifurcation(data, 2)
        assert assignment.n_bundles == 64
        again = classify(rule, data)
        np.testing.assert_array_equal(again.bundle, assignment.bundle)

    def test_empty_nodes_inherit_thresholds(self) -> None:
        """Test that a node emptied by the data still gets usable thresholds."""
        data = np.concatenate([np.arange(100, dtype=float), [10_000.0]])
        assignment, rule = recursive_bifurcation(data, 3)
        np.testing.assert_array_equal(assignment.sizes(), [25, 25, 25, 25, 1, 0, 0, 0])
        assert rule.thresholds[2][3, 0] == pytest.approx(10_000.0)
        fresh = classify(rule, np.array([20_000.0]))
        assert fresh.bundle[0] == 7

    def test_invalid_iterations(self, cloud: np.ndarray) -> None:
        """Test that zero levels are rejected."""
        with pytest.raises(BundlingError, match="at least one iteration"):
            recursive_bifurcation(cloud, 0)

    def test_classify_dimension_mismatch(self, cloud: np.ndarray) -> None:
        """Test that a rule refuses data of another dimension."""
        _, rule = recursive_bifurcation(cloud, 1)
        with pytest.raises(BundlingError, match="expects 2 columns"):
            classify(rule, cloud[:, :1])


class TestEqualNumber:
    """Test cases for equal-number bundling."""

    def test_equal_sizes(self) -> None:
        """Test that nested quantile groups have equal occupancy."""
        rng = np.random.default_rng(1)
        data = rng.standard_normal((1000, 2))
        assignment, rule = equal_number(data, (4, 5))
        assert assignment.n_bundles == 20
        np.testing.assert_array_equal(assignment.sizes(), np.full(20, 50))
        assert rule.splits == (4, 5)

    def test_first_level_orders_by_leading_column(self) -> None:
        """Test that group ids increase with the leading column."""
        data = np.arange(100, dtype=float)[::-1]
        assignment, _ = equal_number(data, (4,))
        np.testing.assert_array_equal(assignment.bundle, (99 - np.arange(100)) // 25)

    def test_ties_reproduced_by_classify(self) -> None:
        """Test that ties are split by path index and reproduced exactly."""
        data = np.column_stack([np.repeat([1.0, 2.0], 50), np.zeros(100)])
        assignment, rule = equal_number(data, (4, 2))
        again = classify(rule, data)
        np.testing.assert_array_equal(again.bundle, assignment.bundle)
        np.testing.assert_array_equal(assignment.sizes(), [13, 12] * 4)

    def test_outliers_go_to_outer_bundles(self) -> None:
        """Test that values beyond the fitted range classify into the end groups."""
        data = np.arange(100, dtype=float)
        _, rule = equal_number(data, (4,))
        fresh = classify(rule, np.array([-50.0, 500.0]))
        np.testing.assert_array_equal(fresh.bundle, [0, 3])

    def test_too_many_bundles(self) -> None:
        """Test that more bundles than active paths are rejected."""
        with pytest.raises(BundlingError, match="bundles requested"):
            equal_number(np.arange(10, dtype=float), (20,))

    def test_invalid_splits(self) -> None:
        """Test that splits longer than the column count are rejected."""
        with pytest.raises(BundlingError, match="Invalid splits"):
            equal_number(np.arange(10, dtype=float), (2, 2))

    def test_balanced_remainder(self) -> None:
        """Test that leftover paths go to the leading groups."""
        assignment, _ = equal_number(np.arange(10, dtype=float), (3,))
        np.testing.assert_array_equal(assignment.sizes(), [4, 3, 3])


class TestPoolsAndHelpers:
    """Test cases for regression pools and helpers."""

    def test_min_bundle_size(self) -> None:
        """Test the occupancy floor max(2 H, 10)."""
        assert min_bundle_size(3) == 10
        assert min_bundle_size(10) == 20

    def test_bifurcation_pools_use_ancestor(self) -> None:
        """Test that sparse bifurcation bundles borrow their ancestor's paths."""
        data = np.concatenate([np.arange(100, dtype=float), [10_000.0]])
        assignment, rule = recursive_bifurcation(data, 2)
        pools, fallback = regression_pools(assignment, rule, min_size=10)

        np.testing.assert_array_equal(fallback, [False, False, True, True])
        assert pools[0].size == 50
        assert pools[2].size == 101
        assert pools[3].size == 101

    def test_equal_number_pools_widen_window(self) -> None:
        """Test that equal-number pools widen symmetrically."""
        data = np.arange(100, dtype=float)
        assignment, rule = equal_number(data, (10,))
        pools, fallback = regression_pools(assignment, rule, min_size=25)

        assert fallback.all()
        assert pools[0].size == 30
        assert pools[5].size == 30
        np.testing.assert_array_equal(np.sort(pools[5]), np.arange(40, 70))

    def test_single_bundle(self) -> None:
        """Test the one-bundle assignment used at t_0."""
        active = np.array([True, False, True, True])
        assignment, rule = single_bundle(np.ones((4, 2)), BundleMethod.BIFURCATION, active)
        np.testing.assert_array_equal(assignment.bundle, [0, UNASSIGNED, 0, 0])
        assert rule.n_bundles == 1

    def test_active_filter(self) -> None:
        """Test that knocked-out and exercised paths are excluded."""
        mask = active_filter(
            4, knocked_out=np.array([True, False, False, False]), exercised=np.array([0, 1, 0, 0])
        )
        np.testing.assert_array_equal(mask, [False, False, True, True])

    def test_dump_assignment(self, cloud: np.ndarray, tmp_path: Path) -> None:
        """Test the (path, date, bundle) CSV dump."""
        active = np.arange(cloud.shape[0]) % 2 == 0
        first, _ = recursive_bifurcation(cloud, 1, active=active, m=1)
        second, _ = recursive_bifurcation(cloud, 1, m=2)
        target = dump_assignment([first, second], tmp_path / "bundles.csv")

        frame = pd.read_csv(target)
        assert list(frame.columns) == ["path", "date", "bundle"]
        assert len(frame) == active.sum() + cloud.shape[0]
        assert set(frame["date"]) == {1, 2}
