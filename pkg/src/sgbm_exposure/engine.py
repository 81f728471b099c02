"""Backward SGBM valuation, exposure profiles and the path estimator.

The backward sweep bundles the alive paths at each date t_m, regresses the
t_{m+1} option values on t_{m+1} monomials per bundle and turns the fitted
coefficients into continuation values by replacing every monomial with its
discounted moment over (t_m, t_{m+1}). Exposures follow from the continuation
values once the exercise policy has been resolved forward in time.
"""

import dataclasses
import math
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd

from sgbm_exposure.bundling import (
    BundleAssignment,
    BundleMethod,
    BundleRule,
    active_filter,
    classify,
    equal_number,
    min_bundle_size,
    recursive_bifurcation,
    regression_pools,
    single_bundle,
)
from sgbm_exposure.credit import CreditSpec, cva
from sgbm_exposure.exceptions import EstimatorError, ModelError
from sgbm_exposure.logger import setup_logger
from sgbm_exposure.models import (
    ContractKind,
    ContractSpec,
    Family,
    ModelSpec,
    TimeGrid,
    check_setup,
    payoff,
)
from sgbm_exposure.moments import Backend
from sgbm_exposure.paths import PathGrid, simulate
from sgbm_exposure.regression import (
    BasisSpec,
    CoefficientTable,
    MomentBasis,
    basis_values,
    enumerate_basis,
    fit_bundle,
    require_greeks_basis,
)

logger = setup_logger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]
IntArray = npt.NDArray[np.int64]

NO_STOP = -1
REPORT_COLUMNS = ("t", "EE", "EEstar", "PFE", "DeltaEE", "GammaEE")


class Status(IntEnum):
    """Path status at a monitoring date."""

    ALIVE = 0
    EXERCISED = 1
    KNOCKED_OUT = 2
    EXPIRED = 3


class Estimator(str, Enum):
    """Exposure estimators."""

    DIRECT = "direct"
    PATH = "path"


@dataclass(frozen=True)
class SweepConfig:
    """Settings of one backward sweep.

    Attributes:
        order: Basis order p
        method: Bundling method
        iterations: Bifurcation levels j, giving (2^n)^j bundles
        splits: Equal-number group counts (J1[, J2[, J3]])
        backend: Discounted-moment backend
        pfe_alpha: PFE confidence level
        sqrt_variance_table: Interpolate the HHW G1/G2 quadratures from a table
        keep_matrix: Keep per-path values and exposures for every date
        keep_bundles: Keep the bundle assignment of every date
    """

    order: int = 2
    method: BundleMethod = BundleMethod.BIFURCATION
    iterations: int = 3
    splits: tuple[int, ...] = ()
    backend: Backend = Backend.AUTO
    pfe_alpha: float = 0.975
    sqrt_variance_table: bool = False
    keep_matrix: bool = False
    keep_bundles: bool = False

    def validate(self) -> None:
        """Validate the sweep settings.

        Raises:
            EstimatorError: If a setting is out of range
        """
        if self.order < 0:
            raise EstimatorError(f"Basis order must be >= 0, got {self.order}")
        if self.method is BundleMethod.BIFURCATION and self.iterations < 1:
            raise EstimatorError(f"Bifurcation needs iterations >= 1, got {self.iterations}")
        if self.method is BundleMethod.EQUAL_NUMBER and (
            not self.splits or any(s < 1 for s in self.splits)
        ):
            raise EstimatorError(f"Equal-number bundling needs positive splits, got {self.splits}")
        if not 0 < self.pfe_alpha < 1:
            raise EstimatorError(f"PFE confidence must lie in (0, 1), got {self.pfe_alpha}")

    def n_bundles(self, n_dims: int) -> int:
        if self.method is BundleMethod.BIFURCATION:
            return int((2**n_dims) ** self.iterations)
        return math.prod(self.splits)


@dataclass(frozen=True, eq=False)
class ExposureMatrix:
    """Per-path option values, exposures and exposure x-derivatives, shape (N, M+1)."""

    value: FloatArray
    exposure: FloatArray
    dx: FloatArray
    dxx: FloatArray
    status: npt.NDArray[np.int8]


@dataclass(frozen=True, eq=False)
class CashFlowRecord:
    """Stopping date index (``NO_STOP`` when nothing is paid), cash flow and D(0, tau)."""

    stop: IntArray
    cash: FloatArray
    discount: FloatArray

    def present_value(self) -> FloatArray:
        return self.cash * self.discount


@dataclass(frozen=True, eq=False)
class ExposureReport:
    """Exposure profile of one estimator on one seed."""

    estimator: Estimator
    times: FloatArray
    ee: FloatArray
    ee_star: FloatArray
    pfe: FloatArray
    delta: FloatArray
    gamma: FloatArray
    value: float
    seed: int
    n_paths: int
    n_bundles: int
    order: int
    pfe_alpha: float
    value_stderr: float | None = None
    cva: float | None = None

    def with_cva(self, credit: CreditSpec) -> "ExposureReport":
        return dataclasses.replace(self, cva=cva(self.ee_star[:-1], credit, self.times))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": self.times,
                "EE": self.ee,
                "EEstar": self.ee_star,
                "PFE": self.pfe,
                "DeltaEE": self.delta,
                "GammaEE": self.gamma,
            },
            columns=list(REPORT_COLUMNS),
        )

    def write_csv(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(target, index=False)
        return target

    def summary(self) -> dict[str, Any]:
        return {
            "estimator": self.estimator.value,
            "V0": self.value,
            "V0_stderr": self.value_stderr,
            "CVA": self.cva,
            "DeltaEE0": _finite_or_none(self.delta[0]),
            "GammaEE0": _finite_or_none(self.gamma[0]),
            "seed": self.seed,
            "N": self.n_paths,
            "J": self.n_bundles,
            "p": self.order,
            "pfe_alpha": self.pfe_alpha,
        }


def _finite_or_none(value: float) -> float | None:
    return float(value) if np.isfinite(value) else None


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Artifacts of a backward sweep, reused by the path estimator."""

    report: ExposureReport
    coefficients: CoefficientTable
    rules: dict[int, BundleRule]
    cash_flows: CashFlowRecord
    config: SweepConfig
    contract: ContractSpec
    model: ModelSpec
    grid: TimeGrid
    seed: int
    n_paths: int
    matrix: ExposureMatrix | None = None
    assignments: tuple[BundleAssignment, ...] = ()


def pfe(exposures: npt.ArrayLike, alpha: float) -> float:
    """Nearest-rank empirical alpha-quantile: the ceil(alpha N)-th smallest exposure.

    Raises:
        EstimatorError: If alpha is outside (0, 1)
    """
    if not 0 < alpha < 1:
        raise EstimatorError(f"PFE confidence must lie in (0, 1), got {alpha}")
    values = np.asarray(exposures, dtype=np.float64)
    if values.size == 0:
        return 0.0
    rank = math.ceil(round(alpha * values.size, 9))
    return float(np.partition(values, rank - 1)[rank - 1])


def relative_l2(reference: npt.ArrayLike, other: npt.ArrayLike) -> float:
    """(sum (a - b)^2 / sum a^2)^(1/2), zero for identical profiles."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(other, dtype=np.float64)
    finite = np.isfinite(a) & np.isfinite(b)
    a, b = a[finite], b[finite]
    norm = float(np.sum(a**2))
    gap = float(np.sum((a - b) ** 2))
    if norm == 0:
        return 0.0 if gap == 0 else math.inf
    return math.sqrt(gap / norm)


# ---------------------------------------------------------------------------
# Shared sweep plumbing
# ---------------------------------------------------------------------------


def _bundle_order(model: ModelSpec, method: BundleMethod) -> tuple[str, ...]:
    """Column order used for bundling: rotation order, or x -> r -> v priority."""
    if method is BundleMethod.EQUAL_NUMBER and model.family is Family.HHW:
        return ("x", "r", "v")
    return model.factors


def _knock_matrix(paths: PathGrid, contract: ContractSpec) -> BoolArray | None:
    if contract.kind is not ContractKind.BARRIER:
        return None
    assert contract.barrier is not None
    if paths.running_min is None:
        raise EstimatorError("Barrier valuation needs paths simulated with barrier monitoring")
    return paths.running_min <= math.log(contract.barrier)


def _alive_at(
    knocked: BoolArray | None, m: int, n_paths: int, exercised: BoolArray | None = None
) -> BoolArray:
    return active_filter(n_paths, None if knocked is None else knocked[:, m], exercised)


def _exercise_indices(contract: ContractSpec, grid: TimeGrid) -> set[int]:
    if contract.kind is not ContractKind.BERMUDAN:
        return set()
    indices = {grid.index_of(t) for t in contract.exercise_dates}
    if None in indices:
        raise EstimatorError("Exercise date missing from the monitoring grid")
    if grid.M not in indices:
        raise EstimatorError("Bermudan contracts must be exercisable at maturity")
    return {int(i) for i in indices if i is not None}


def _check_inputs(paths: PathGrid, contract: ContractSpec) -> None:
    try:
        check_setup(paths.model, contract, paths.grid)
    except ModelError as e:
        raise EstimatorError(str(e)) from e


def _terminal_value(paths: PathGrid, contract: ContractSpec, knocked: BoolArray | None) -> FloatArray:
    value = payoff(contract, np.exp(paths.x[:, -1]))
    if knocked is not None:
        value = np.where(knocked[:, -1], 0.0, value)
    return value


def _state_inputs(
    paths: PathGrid, m: int, idx: IntArray
) -> tuple[FloatArray, FloatArray | None, FloatArray | None]:
    x = paths.x[idx, m]
    v = paths.v[idx, m] if paths.v is not None else None
    r = paths.r[idx, m] if paths.r is not None else None
    return x, v, r


def _continuation(
    moments: MomentBasis,
    paths: PathGrid,
    m: int,
    rows: FloatArray,
    assignment: BundleAssignment,
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Continuation value and its x-derivatives for every path (zero where inactive)."""
    n = paths.n_paths
    c = np.zeros(n)
    dc = np.zeros(n)
    d2c = np.zeros(n)
    idx = np.flatnonzero(assignment.active)
    if idx.size == 0:
        return c, dc, d2c
    tau = paths.grid.dates[m + 1] - paths.grid.dates[m]
    if m == 0:
        # All paths share X_0
        phi, dphi, d2phi = moments.evaluate(tau, *_state_inputs(paths, m, idx[:1]))
        beta = rows[assignment.bundle[idx[:1]]]
        c[idx] = np.sum(phi * beta, axis=1)[0]
        dc[idx] = np.sum(dphi * beta, axis=1)[0]
        d2c[idx] = np.sum(d2phi * beta, axis=1)[0]
        return c, dc, d2c
    phi, dphi, d2phi = moments.evaluate(tau, *_state_inputs(paths, m, idx))
    beta = rows[assignment.bundle[idx]]
    c[idx] = np.sum(phi * beta, axis=1)
    dc[idx] = np.sum(dphi * beta, axis=1)
    d2c[idx] = np.sum(d2phi * beta, axis=1)
    return c, dc, d2c


def _bundle_date(
    paths: PathGrid, config: SweepConfig, active: BoolArray, m: int
) -> tuple[BundleAssignment, BundleRule]:
    data = paths.columns(m, _bundle_order(paths.model, config.method))
    if m == 0:
        return single_bundle(data, config.method, active, m)
    if config.method is BundleMethod.BIFURCATION:
        return recursive_bifurcation(data, config.iterations, active, m)
    n_active = int(active.sum())
    if n_active < config.n_bundles(paths.n_dims):
        logger.warning(
            f"Date {m}: {n_active} active paths cannot fill {config.n_bundles(paths.n_dims)} "
            "equal-number bundles; using a single bundle"
        )
        return single_bundle(data, config.method, active, m)
    return equal_number(data, config.splits, active, m)


def _fit_date(
    assignment: BundleAssignment,
    rule: BundleRule,
    regressors: FloatArray,
    targets: FloatArray,
    basis: BasisSpec,
) -> tuple[FloatArray, BoolArray, int]:
    rows = np.zeros((assignment.n_bundles, basis.size))
    if not assignment.active.any():
        return rows, np.ones(assignment.n_bundles, dtype=bool), 0
    pools, fallback = regression_pools(assignment, rule, min_bundle_size(basis.size))
    deficient = 0
    for j, pool in enumerate(pools):
        fit = fit_bundle(targets[pool], regressors[pool])
        rows[j] = fit.coefficients
        deficient += int(fit.rank_deficient)
    return rows, fallback, deficient


def _stopping(
    paths: PathGrid,
    contract: ContractSpec,
    candidates: dict[int, BoolArray],
    knocked: BoolArray | None,
) -> CashFlowRecord:
    """Resolve the first exercise (or the terminal payment) of every path."""
    n, big_m = paths.n_paths, paths.grid.M
    stop = np.full(n, NO_STOP, dtype=np.int64)
    for m in sorted(candidates):
        stop[(stop == NO_STOP) & candidates[m]] = m
    terminal = payoff(contract, np.exp(paths.x[:, big_m])) > 0
    if knocked is not None:
        terminal &= ~knocked[:, big_m]
    stop[(stop == NO_STOP) & terminal] = big_m

    paid = stop != NO_STOP
    rows = np.flatnonzero(paid)
    cash = np.zeros(n)
    discount = np.zeros(n)
    cash[rows] = payoff(contract, np.exp(paths.x[rows, stop[rows]]))
    discount[rows] = paths.disc[rows, stop[rows]]
    return CashFlowRecord(stop=stop, cash=cash, discount=discount)


def _alive_matrix_fn(
    cash_flows: CashFlowRecord | None, knocked: BoolArray | None, n_paths: int, big_m: int
) -> Callable[[int], BoolArray]:
    """Alive mask per date: not knocked out and not yet exercised."""
    if cash_flows is None:
        return lambda m: _alive_at(knocked, m, n_paths)
    exit_index = np.where(cash_flows.stop == NO_STOP, big_m + 1, cash_flows.stop)
    return lambda m: _alive_at(knocked, m, n_paths, exercised=exit_index <= m)


class _ExposureAccumulator:
    """Collects per-date exposure statistics once path status is known."""

    def __init__(
        self,
        paths: PathGrid,
        basis: BasisSpec,
        alpha: float,
        keep_matrix: bool,
        alive: Callable[[int], BoolArray] | None,
    ) -> None:
        self.paths = paths
        self.basis = basis
        self.alpha = alpha
        self.alive = alive
        big_m = paths.grid.M
        self.ee = np.zeros(big_m + 1)
        self.ee_star = np.zeros(big_m + 1)
        self.pfe = np.zeros(big_m + 1)
        self.delta = np.zeros(big_m + 1) if basis.p >= 1 else np.full(big_m + 1, np.nan)
        self.gamma = np.zeros(big_m + 1) if basis.p >= 2 else np.full(big_m + 1, np.nan)
        self._pending: dict[int, tuple[FloatArray, FloatArray, FloatArray]] = {}
        self.matrix: dict[str, FloatArray] | None = None
        if keep_matrix:
            shape = (paths.n_paths, big_m + 1)
            self.matrix = {k: np.zeros(shape) for k in ("exposure", "dx", "dxx")}

    def add(self, m: int, c: FloatArray, dc: FloatArray, d2c: FloatArray) -> None:
        if self.alive is None:
            self._pending[m] = (c, dc, d2c)
        else:
            self._aggregate(m, c, dc, d2c, self.alive(m))

    def finalize(self, alive: Callable[[int], BoolArray]) -> None:
        for m, (c, dc, d2c) in sorted(self._pending.items()):
            self._aggregate(m, c, dc, d2c, alive(m))
        self._pending.clear()

    def _aggregate(
        self, m: int, c: FloatArray, dc: FloatArray, d2c: FloatArray, alive: BoolArray
    ) -> None:
        positive = alive & (c > 0)
        exposure = np.where(positive, c, 0.0)
        dx = np.where(positive, dc, 0.0)
        dxx = np.where(positive, d2c, 0.0)
        s0 = self.paths.model.s0
        self.ee[m] = exposure.mean()
        self.ee_star[m] = np.mean(self.paths.disc[:, m] * exposure)
        self.pfe[m] = pfe(exposure, self.alpha)
        if self.basis.p >= 1:
            self.delta[m] = dx.mean() / s0
        if self.basis.p >= 2:
            self.gamma[m] = np.mean(dxx - dx) / s0**2
        if self.matrix is not None:
            self.matrix["exposure"][:, m] = exposure
            self.matrix["dx"][:, m] = dx
            self.matrix["dxx"][:, m] = dxx


def _status_matrix(
    cash_flows: CashFlowRecord,
    knocked: BoolArray | None,
    contract: ContractSpec,
    n_paths: int,
    big_m: int,
) -> npt.NDArray[np.int8]:
    status = np.full((n_paths, big_m + 1), Status.ALIVE, dtype=np.int8)
    dates = np.arange(big_m + 1)[None, :]
    if contract.kind is ContractKind.BERMUDAN:
        exercised = (cash_flows.stop[:, None] != NO_STOP) & (cash_flows.stop[:, None] <= dates)
        status[exercised] = Status.EXERCISED
    if knocked is not None:
        status[knocked & (status == Status.ALIVE)] = Status.KNOCKED_OUT
    status[:, big_m][status[:, big_m] == Status.ALIVE] = Status.EXPIRED
    return status


# ---------------------------------------------------------------------------
# Direct estimator
# ---------------------------------------------------------------------------


def backward_sweep(
    paths: PathGrid, contract: ContractSpec, config: SweepConfig | None = None
) -> SweepResult:
    """Value the contract backward over the monitoring dates and build the direct report.

    Args:
        paths: Regression-pass paths (barrier contracts need barrier monitoring)
        contract: Contract to value
        config: Sweep settings

    Returns:
        SweepResult with the direct ExposureReport, coefficients and bundle rules

    Raises:
        EstimatorError: If the contract does not fit the grid
        RegressionError: If the basis order needs unavailable moments
    """
    config = config or SweepConfig()
    config.validate()
    _check_inputs(paths, contract)
    model, grid = paths.model, paths.grid
    n, big_m = paths.n_paths, grid.M

    basis = enumerate_basis(model.n_dims, config.order)
    moments = MomentBasis(model, basis, config.backend, config.sqrt_variance_table)
    knocked = _knock_matrix(paths, contract)
    exercise = _exercise_indices(contract, grid)
    bermudan = contract.kind is ContractKind.BERMUDAN

    table = CoefficientTable(basis=basis)
    rules: dict[int, BundleRule] = {}
    assignments: list[BundleAssignment] = []
    candidates: dict[int, BoolArray] = {}
    accumulator = _ExposureAccumulator(
        paths,
        basis,
        config.pfe_alpha,
        config.keep_matrix,
        None if bermudan else _alive_matrix_fn(None, knocked, n, big_m),
    )
    values = np.zeros((n, big_m + 1)) if config.keep_matrix else None

    value_next = _terminal_value(paths, contract, knocked)
    if values is not None:
        values[:, big_m] = value_next
    regressors_next = basis_values(basis, paths.columns(big_m))
    continuation = np.zeros(n)

    for m in range(big_m - 1, -1, -1):
        active = _alive_at(knocked, m, n)
        assignment, rule = _bundle_date(paths, config, active, m)
        rows, fallback, deficient = _fit_date(assignment, rule, regressors_next, value_next, basis)
        table.store(m, rows, fallback, deficient)
        rules[m] = rule
        if config.keep_bundles:
            assignments.append(assignment)
        if fallback.any() or deficient:
            logger.warning(
                f"Date {m}: {int(fallback.sum())} of {assignment.n_bundles} bundles pooled, "
                f"{deficient} rank-deficient fits"
            )
        logger.debug(
            f"Date {m}: {int(active.sum())} active paths, {assignment.empty_bundles} empty bundles"
        )

        continuation, dc, d2c = _continuation(moments, paths, m, rows, assignment)
        if m in exercise:
            gain = payoff(contract, np.exp(paths.x[:, m]))
            candidates[m] = active & (gain > continuation)
            value = np.where(active, np.maximum(continuation, gain), 0.0)
        else:
            value = np.where(active, continuation, 0.0)
        accumulator.add(m, continuation, dc, d2c)
        if values is not None:
            values[:, m] = value
        value_next = value
        regressors_next = basis_values(basis, paths.columns(m))

    cash_flows = _stopping(paths, contract, candidates, knocked)
    accumulator.finalize(_alive_matrix_fn(cash_flows if bermudan else None, knocked, n, big_m))
    value0 = float(continuation[0])

    report = ExposureReport(
        estimator=Estimator.DIRECT,
        times=grid.as_array(),
        ee=accumulator.ee,
        ee_star=accumulator.ee_star,
        pfe=accumulator.pfe,
        delta=accumulator.delta,
        gamma=accumulator.gamma,
        value=value0,
        seed=paths.seed,
        n_paths=n,
        n_bundles=config.n_bundles(model.n_dims),
        order=config.order,
        pfe_alpha=config.pfe_alpha,
    )
    logger.info(
        f"Direct estimator: V0={value0:.6f}, EE*(0)={report.ee_star[0]:.6f} "
        f"(N={n}, J={report.n_bundles}, p={config.order})"
    )

    matrix = None
    if config.keep_matrix and values is not None and accumulator.matrix is not None:
        matrix = ExposureMatrix(
            value=values,
            exposure=accumulator.matrix["exposure"],
            dx=accumulator.matrix["dx"],
            dxx=accumulator.matrix["dxx"],
            status=_status_matrix(cash_flows, knocked, contract, n, big_m),
        )
    return SweepResult(
        report=report,
        coefficients=table,
        rules=rules,
        cash_flows=cash_flows,
        config=config,
        contract=contract,
        model=model,
        grid=grid,
        seed=paths.seed,
        n_paths=n,
        matrix=matrix,
        assignments=tuple(reversed(assignments)),
    )


def greeks(result: SweepResult) -> tuple[FloatArray, FloatArray]:
    """Delta and Gamma of the EE profile from a completed sweep.

    Gamma is NaN throughout for an order-1 basis.

    Raises:
        GreeksUnavailableError: If the basis order is 0
    """
    require_greeks_basis(result.coefficients.basis)
    return result.report.delta, result.report.gamma


# ---------------------------------------------------------------------------
# Path estimator
# ---------------------------------------------------------------------------


def evaluate_path_estimator(sweep: SweepResult, paths: PathGrid) -> ExposureReport:
    """Value fresh paths with the stored rules and coefficients of a sweep.

    Exercise decisions use the pass-1 continuation function; EE and EE* come
    from the realized discounted cash flows, while PFE, Delta and Gamma use the
    out-of-sample exposures max(c, 0).

    Raises:
        EstimatorError: If a rule or coefficient set is missing for some date
    """
    contract, config = sweep.contract, sweep.config
    _check_inputs(paths, contract)
    grid = paths.grid
    n, big_m = paths.n_paths, grid.M
    if grid.dates != sweep.grid.dates:
        raise EstimatorError("Path-estimator paths use a different monitoring grid")
    stored = sweep.coefficients.coefficients
    missing = [m for m in range(big_m) if m not in sweep.rules or m not in stored]
    if missing:
        raise EstimatorError(f"Missing bundle rules or coefficients for date indices {missing}")

    basis = sweep.coefficients.basis
    moments = MomentBasis(paths.model, basis, config.backend, config.sqrt_variance_table)
    knocked = _knock_matrix(paths, contract)
    exercise = _exercise_indices(contract, grid)
    bermudan = contract.kind is ContractKind.BERMUDAN
    accumulator = _ExposureAccumulator(
        paths,
        basis,
        config.pfe_alpha,
        False,
        None if bermudan else _alive_matrix_fn(None, knocked, n, big_m),
    )

    candidates: dict[int, BoolArray] = {}
    order = _bundle_order(paths.model, config.method)
    for m in range(big_m - 1, -1, -1):
        active = _alive_at(knocked, m, n)
        assignment = classify(sweep.rules[m], paths.columns(m, order), active, m)
        continuation, dc, d2c = _continuation(
            moments, paths, m, sweep.coefficients.rows(m), assignment
        )
        if m in exercise:
            gain = payoff(contract, np.exp(paths.x[:, m]))
            candidates[m] = active & (gain > continuation)
        accumulator.add(m, continuation, dc, d2c)

    cash_flows = _stopping(paths, contract, candidates, knocked)
    accumulator.finalize(_alive_matrix_fn(cash_flows if bermudan else None, knocked, n, big_m))

    present = cash_flows.present_value()
    ee = np.zeros(big_m + 1)
    ee_star = np.zeros(big_m + 1)
    for m in range(big_m + 1):
        later = cash_flows.stop > m
        ee[m] = np.sum(present[later] / paths.disc[later, m]) / n
        ee_star[m] = np.sum(present[later]) / n

    value0 = float(present.mean())
    stderr = float(present.std(ddof=1) / math.sqrt(n))
    report = ExposureReport(
        estimator=Estimator.PATH,
        times=grid.as_array(),
        ee=ee,
        ee_star=ee_star,
        pfe=accumulator.pfe,
        delta=accumulator.delta,
        gamma=accumulator.gamma,
        value=value0,
        value_stderr=stderr,
        seed=paths.seed,
        n_paths=n,
        n_bundles=sweep.report.n_bundles,
        order=sweep.report.order,
        pfe_alpha=config.pfe_alpha,
    )
    logger.info(f"Path estimator: V0={value0:.6f} ({stderr:.2e}) from {n} fresh paths")
    return report


def path_estimator(
    sweep: SweepResult,
    n_paths: int | None = None,
    seed: int | None = None,
    workers: int = 1,
) -> ExposureReport:
    """Simulate a fresh path set (twice the regression size by default) and value it.

    Args:
        sweep: Completed backward sweep
        n_paths: Fresh path count (default 2N)
        seed: RNG seed (default: the sweep's seed on an independent stream)
        workers: Simulation threads

    Returns:
        Path-estimator ExposureReport
    """
    fresh = simulate(
        sweep.model,
        sweep.grid,
        n_paths or 2 * sweep.n_paths,
        sweep.seed if seed is None else seed,
        stream=1,
        track_minimum=sweep.contract.kind is ContractKind.BARRIER,
        workers=workers,
    )
    return evaluate_path_estimator(sweep, fresh)


def bump_delta(
    model: ModelSpec,
    contract: ContractSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    config: SweepConfig | None = None,
    bump: float = 0.01,
    workers: int = 1,
) -> float:
    """Central finite difference of EE(0) under relative spot bumps with common random numbers.

    Returns:
        (EE_up(0) - EE_down(0)) / (2 bump S0)
    """
    barrier = contract.kind is ContractKind.BARRIER
    levels = []
    for sign in (1.0, -1.0):
        bumped = dataclasses.replace(model, s0=model.s0 * (1.0 + sign * bump))
        paths = simulate(bumped, grid, n_paths, seed, track_minimum=barrier, workers=workers)
        levels.append(backward_sweep(paths, contract, config).report.ee[0])
    return float((levels[0] - levels[1]) / (2.0 * bump * model.s0))
