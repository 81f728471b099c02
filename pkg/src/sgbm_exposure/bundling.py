"""Partitioning of path clouds into bundles.

Two methods are supported: recursive bifurcation of rotated (decorrelated) data
at per-bundle means, and equal-number bundling by nested quantile cuts. Each
bundling returns a ``BundleRule`` that reproduces the assignment on the data it
was built from and classifies fresh paths without refitting.
"""

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd

from sgbm_exposure.exceptions import BundlingError
from sgbm_exposure.logger import setup_logger

logger = setup_logger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]

UNASSIGNED = -1


class BundleMethod(str, Enum):
    """Bundling algorithms."""

    BIFURCATION = "bifurcation"
    EQUAL_NUMBER = "equal_number"


@dataclass(frozen=True, eq=False)
class BundleAssignment:
    """Path-to-bundle map at one monitoring date.

    Attributes:
        m: Date index
        bundle: Bundle id per path, ``UNASSIGNED`` for inactive paths
        n_bundles: Total number of bundles J
        active: Mask of paths taking part in bundling
    """

    m: int
    bundle: IntArray
    n_bundles: int
    active: BoolArray

    def sizes(self) -> IntArray:
        """Number of paths in each bundle."""
        return np.bincount(self.bundle[self.active], minlength=self.n_bundles)

    def members(self, j: int) -> IntArray:
        return np.flatnonzero(self.bundle == j)

    @property
    def empty_bundles(self) -> int:
        return int(np.sum(self.sizes() == 0))


@dataclass(frozen=True, eq=False)
class BundleRule:
    """Persisted classification rule of one bundling.

    Bifurcation rules store the rotation and, per level, the split thresholds of
    every node (nodes emptied by the data inherit their parent's thresholds).
    Equal-number rules store, per level and parent group, the (value, path index)
    keys of the first member of each quantile group after the first.
    """

    method: BundleMethod
    n_dims: int
    n_bundles: int
    rotation: FloatArray
    angles: tuple[float, ...] = ()
    thresholds: tuple[FloatArray, ...] = ()
    splits: tuple[int, ...] = ()
    boundary_values: tuple[FloatArray, ...] = ()
    boundary_indices: tuple[IntArray, ...] = ()
    levels: int = 0


def _slope_angle(cov: float, var: float) -> tuple[float, float]:
    """(cos, sin) of the rotation angle for slope cov/var, with sign(0) = +1."""
    k = cov / var
    norm = math.sqrt(1.0 + k * k)
    sign = 1.0 if k >= 0 else -1.0
    return sign / norm, abs(k) / norm


def _sample_moments(d1: FloatArray, other: FloatArray) -> tuple[float, float]:
    centred = d1 - d1.mean()
    return float(np.mean(centred * (other - other.mean()))), float(np.mean(centred**2))


def _rotation_2d(d1: FloatArray, d2: FloatArray) -> tuple[FloatArray, float]:
    cov, var = _sample_moments(d1, d2)
    if var == 0:
        logger.warning("Zero variance in the leading column: rotation skipped")
        return np.eye(2), 0.0
    c, s = _slope_angle(cov, var)
    return np.array([[c, s], [-s, c]]), math.atan2(s, c)


def _rotation_3d(d1: FloatArray, d2: FloatArray, d3: FloatArray) -> tuple[FloatArray, tuple[float, float]]:
    cov12, var = _sample_moments(d1, d2)
    cov13, _ = _sample_moments(d1, d3)
    if var == 0:
        logger.warning("Zero variance in the leading column: rotation skipped")
        return np.eye(3), (0.0, 0.0)
    c1, s1 = _slope_angle(cov12, var)
    c2, s2 = _slope_angle(cov13, var)
    matrix = np.array(
        [
            [c1 * s2, s1, -c1 * c2],
            [-s1 * s2, c1, s1 * c2],
            [c2, 0.0, s2],
        ]
    )
    return matrix, (math.atan2(s1, c1), math.atan2(s2, c2))


def _check_columns(*columns: npt.ArrayLike) -> list[FloatArray]:
    arrays = [np.asarray(c, dtype=np.float64) for c in columns]
    if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
        raise BundlingError("Columns must be one-dimensional and of equal length")
    if arrays[0].size < 2:
        raise BundlingError("At least two observations are needed to estimate a rotation")
    return arrays


def rotate2d(d1: npt.ArrayLike, d2: npt.ArrayLike) -> tuple[FloatArray, FloatArray, float]:
    """Rotate a (log-asset, second factor) cloud by its regression slope.

    Args:
        d1: Leading column (log-asset)
        d2: Second column

    Returns:
        Tuple (q1, q2, alpha1) with alpha1 in radians

    Raises:
        BundlingError: If the columns are malformed
    """
    a, b = _check_columns(d1, d2)
    matrix, angle = _rotation_2d(a, b)
    q = np.column_stack([a, b]) @ matrix.T
    return q[:, 0], q[:, 1], angle


def rotate3d(
    d1: npt.ArrayLike, d2: npt.ArrayLike, d3: npt.ArrayLike
) -> tuple[FloatArray, FloatArray, FloatArray, float, float]:
    """Three-dimensional analogue of ``rotate2d`` with slopes against d1.

    Returns:
        Tuple (q1, q2, q3, alpha1, alpha2) with angles in radians

    Raises:
        BundlingError: If the columns are malformed
    """
    a, b, c = _check_columns(d1, d2, d3)
    matrix, (alpha1, alpha2) = _rotation_3d(a, b, c)
    q = np.column_stack([a, b, c]) @ matrix.T
    return q[:, 0], q[:, 1], q[:, 2], alpha1, alpha2


def rotation_for(data: FloatArray) -> tuple[FloatArray, tuple[float, ...]]:
    """Rotation matrix and angles for an (N, n) cloud, n in {1, 2, 3}."""
    n = data.shape[1]
    if data.shape[0] < 2 or n == 1:
        return np.eye(n), ()
    if n == 2:
        matrix, angle = _rotation_2d(data[:, 0], data[:, 1])
        return matrix, (angle,)
    if n == 3:
        matrix, angles = _rotation_3d(data[:, 0], data[:, 1], data[:, 2])
        return matrix, angles
    raise BundlingError(f"Rotation supports 1 to 3 dimensions, got {n}")


def active_filter(
    n_paths: int,
    knocked_out: BoolArray | None = None,
    exercised: BoolArray | None = None,
) -> BoolArray:
    """Mask of paths still alive: neither knocked out nor exercised."""
    mask = np.ones(n_paths, dtype=bool)
    if knocked_out is not None:
        mask &= ~np.asarray(knocked_out, dtype=bool)
    if exercised is not None:
        mask &= ~np.asarray(exercised, dtype=bool)
    return mask


def _prepare(data: npt.ArrayLike, active: BoolArray | None) -> tuple[FloatArray, BoolArray]:
    cloud = np.asarray(data, dtype=np.float64)
    if cloud.ndim == 1:
        cloud = cloud[:, None]
    mask = np.ones(cloud.shape[0], dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if mask.shape != (cloud.shape[0],):
        raise BundlingError(f"Active mask length {mask.shape} does not match {cloud.shape[0]} paths")
    return cloud, mask


def _split_codes(q: FloatArray, thresholds: FloatArray, ids: IntArray) -> IntArray:
    n = q.shape[1]
    bits = (q > thresholds[ids]).astype(np.int64)
    weights = 1 << np.arange(n - 1, -1, -1)
    return bits @ weights


def recursive_bifurcation(
    data: npt.ArrayLike,
    iterations: int,
    active: BoolArray | None = None,
    m: int = 0,
    rotate: bool = True,
) -> tuple[BundleAssignment, BundleRule]:
    """Bundle an (N, n) cloud into (2^n)^iterations bundles by recursive mean splits.

    Args:
        data: State columns in rotation order
        iterations: Number of bifurcation levels j >= 1
        active: Paths taking part (default: all)
        m: Date index recorded on the assignment
        rotate: Decorrelate the columns before splitting

    Returns:
        Tuple (BundleAssignment, BundleRule)

    Raises:
        BundlingError: If ``iterations`` < 1 or the dimension is unsupported
    """
    if iterations < 1:
        raise BundlingError(f"Bifurcation needs at least one iteration, got {iterations}")
    cloud, mask = _prepare(data, active)
    n = cloud.shape[1]
    if n > 3:
        raise BundlingError(f"Bifurcation supports 1 to 3 dimensions, got {n}")
    branching = 2**n
    n_bundles = branching**iterations

    subset = cloud[mask]
    matrix, angles = rotation_for(subset) if rotate else (np.eye(n), ())
    q = subset @ matrix.T

    ids = np.zeros(q.shape[0], dtype=np.int64)
    thresholds: list[FloatArray] = []
    parent = np.zeros((1, n))
    for level in range(iterations):
        n_nodes = branching**level
        counts = np.bincount(ids, minlength=n_nodes)
        means = np.empty((n_nodes, n))
        for d in range(n):
            sums = np.bincount(ids, weights=q[:, d], minlength=n_nodes)
            with np.errstate(invalid="ignore", divide="ignore"):
                means[:, d] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        inherited = parent[np.arange(n_nodes) // branching] if level else parent
        means = np.where(np.isnan(means), inherited, means)
        thresholds.append(means)
        if q.shape[0]:
            ids = ids * branching + _split_codes(q, means, ids)
        parent = means

    bundle = np.full(cloud.shape[0], UNASSIGNED, dtype=np.int64)
    bundle[mask] = ids
    assignment = BundleAssignment(m=m, bundle=bundle, n_bundles=n_bundles, active=mask)
    rule = BundleRule(
        method=BundleMethod.BIFURCATION,
        n_dims=n,
        n_bundles=n_bundles,
        rotation=matrix,
        angles=angles,
        thresholds=tuple(thresholds),
        levels=iterations,
    )
    if assignment.empty_bundles:
        logger.debug(f"Date {m}: {assignment.empty_bundles} of {n_bundles} bundles empty")
    return assignment, rule


def equal_number(
    data: npt.ArrayLike,
    splits: tuple[int, ...],
    active: BoolArray | None = None,
    m: int = 0,
) -> tuple[BundleAssignment, BundleRule]:
    """Bundle by nested quantile groups, one level per column in priority order.

    Args:
        data: State columns in priority order; only the first ``len(splits)`` are used
        splits: Group counts (J1[, J2[, J3]])
        active: Paths taking part (default: all)
        m: Date index recorded on the assignment

    Returns:
        Tuple (BundleAssignment, BundleRule)

    Raises:
        BundlingError: If the splits are invalid or exceed the active path count
    """
    cloud, mask = _prepare(data, active)
    if not splits or any(s < 1 for s in splits) or len(splits) > cloud.shape[1]:
        raise BundlingError(f"Invalid splits {splits} for {cloud.shape[1]} columns")
    n_bundles = math.prod(splits)
    index = np.flatnonzero(mask)
    if index.size and n_bundles > index.size:
        raise BundlingError(f"{n_bundles} bundles requested for {index.size} active paths")

    ids = np.zeros(index.size, dtype=np.int64)
    values: list[FloatArray] = []
    indices: list[IntArray] = []
    n_groups = 1
    for level, count in enumerate(splits):
        column = cloud[index, level]
        level_values = np.full((n_groups, count - 1), np.inf)
        level_indices = np.full((n_groups, count - 1), np.iinfo(np.int64).max, dtype=np.int64)
        new_ids = np.empty_like(ids)
        for g in range(n_groups):
            members = np.flatnonzero(ids == g)
            order = members[np.argsort(column[members], kind="stable")]
            chunks = np.array_split(order, count)
            for sub, chunk in enumerate(chunks):
                new_ids[chunk] = g * count + sub
                if sub and chunk.size:
                    level_values[g, sub - 1] = column[chunk[0]]
                    level_indices[g, sub - 1] = index[chunk[0]]
        ids = new_ids
        values.append(level_values)
        indices.append(level_indices)
        n_groups *= count

    bundle = np.full(cloud.shape[0], UNASSIGNED, dtype=np.int64)
    bundle[index] = ids
    assignment = BundleAssignment(m=m, bundle=bundle, n_bundles=n_bundles, active=mask)
    rule = BundleRule(
        method=BundleMethod.EQUAL_NUMBER,
        n_dims=len(splits),
        n_bundles=n_bundles,
        rotation=np.eye(len(splits)),
        splits=tuple(splits),
        boundary_values=tuple(values),
        boundary_indices=tuple(indices),
        levels=len(splits),
    )
    return assignment, rule


def classify(
    rule: BundleRule,
    data: npt.ArrayLike,
    active: BoolArray | None = None,
    m: int = 0,
) -> BundleAssignment:
    """Assign paths to bundles with a stored rule, without refitting.

    Values beyond the stored thresholds fall into the outermost bundles. Applied
    to the data the rule was built from, the original assignment is reproduced.

    Raises:
        BundlingError: If the data dimension does not match the rule
    """
    cloud, mask = _prepare(data, active)
    index = np.flatnonzero(mask)

    if rule.method is BundleMethod.BIFURCATION:
        if cloud.shape[1] != rule.n_dims:
            raise BundlingError(f"Rule expects {rule.n_dims} columns, got {cloud.shape[1]}")
        q = cloud[index] @ rule.rotation.T
        ids = np.zeros(index.size, dtype=np.int64)
        branching = 2**rule.n_dims
        for means in rule.thresholds:
            ids = ids * branching + _split_codes(q, means, ids)
    else:
        if cloud.shape[1] < rule.n_dims:
            raise BundlingError(f"Rule expects {rule.n_dims} columns, got {cloud.shape[1]}")
        ids = np.zeros(index.size, dtype=np.int64)
        for level, count in enumerate(rule.splits):
            column = cloud[index, level]
            bvals = rule.boundary_values[level][ids]
            bidx = rule.boundary_indices[level][ids]
            sub = np.zeros(index.size, dtype=np.int64)
            for k in range(count - 1):
                sub += (bvals[:, k] < column) | ((bvals[:, k] == column) & (bidx[:, k] <= index))
            ids = ids * count + sub

    bundle = np.full(cloud.shape[0], UNASSIGNED, dtype=np.int64)
    bundle[index] = ids
    return BundleAssignment(m=m, bundle=bundle, n_bundles=rule.n_bundles, active=mask)


def min_bundle_size(n_basis: int) -> int:
    """Smallest occupancy a bundle needs for its own regression."""
    return max(2 * n_basis, 10)


def regression_pools(
    assignment: BundleAssignment, rule: BundleRule, min_size: int
) -> tuple[list[IntArray], BoolArray]:
    """Paths used to fit each bundle, pooling sparse bundles with their neighbours.

    Bifurcation bundles below ``min_size`` use their nearest ancestor node with
    enough paths; equal-number bundles widen a window of adjacent bundle ids.
    Empty bundles receive a pool as well so fresh paths landing there can be valued.

    Returns:
        Tuple (pools, fallback) where ``pools[j]`` indexes the paths for bundle j
        and ``fallback[j]`` marks pooled bundles
    """
    sizes = assignment.sizes()
    order = np.argsort(assignment.bundle, kind="stable")
    sorted_ids = assignment.bundle[order]
    starts = np.searchsorted(sorted_ids, np.arange(assignment.n_bundles), side="left")
    ends = np.searchsorted(sorted_ids, np.arange(assignment.n_bundles), side="right")

    def span(lo: int, hi: int) -> IntArray:
        return order[starts[lo] : ends[hi]]

    pools: list[IntArray] = []
    fallback = np.zeros(assignment.n_bundles, dtype=bool)
    cumulative = np.concatenate([[0], np.cumsum(sizes)])
    branching = 2**rule.n_dims

    for j in range(assignment.n_bundles):
        if sizes[j] >= min_size:
            pools.append(span(j, j))
            continue
        fallback[j] = True
        if rule.method is BundleMethod.BIFURCATION:
            width = 1
            lo = j
            while width < assignment.n_bundles:
                width *= branching
                lo = (j // width) * width
                if cumulative[lo + width] - cumulative[lo] >= min_size:
                    break
            pools.append(span(lo, lo + width - 1))
        else:
            lo = hi = j
            while cumulative[hi + 1] - cumulative[lo] < min_size and (
                lo > 0 or hi < assignment.n_bundles - 1
            ):
                lo = max(lo - 1, 0)
                hi = min(hi + 1, assignment.n_bundles - 1)
            pools.append(span(lo, hi))
    return pools, fallback


def dump_assignment(assignments: list[BundleAssignment], path: str | Path) -> Path:
    """Write (path, date, bundle) rows for every active path to CSV."""
    frames = [
        pd.DataFrame(
            {
                "path": np.flatnonzero(a.active),
                "date": a.m,
                "bundle": a.bundle[a.active],
            }
        )
        for a in assignments
    ]
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    if frames:
        table = pd.concat(frames, ignore_index=True)
    else:
        table = pd.DataFrame(columns=["path", "date", "bundle"])
    table.to_csv(target, index=False)
    return target


def single_bundle(
    data: npt.ArrayLike, method: BundleMethod, active: BoolArray | None = None, m: int = 0
) -> tuple[BundleAssignment, BundleRule]:
    """One bundle holding every active path, as used at t_0 where all paths coincide."""
    cloud, mask = _prepare(data, active)
    n = cloud.shape[1]
    bundle = np.where(mask, 0, UNASSIGNED).astype(np.int64)
    rule = BundleRule(method=method, n_dims=n, n_bundles=1, rotation=np.eye(n))
    return BundleAssignment(m=m, bundle=bundle, n_bundles=1, active=mask), rule
