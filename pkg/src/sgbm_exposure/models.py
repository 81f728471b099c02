"""Model parameterizations, contract definitions and monitoring schedules."""

import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any

import numpy as np
import numpy.typing as npt

from sgbm_exposure.exceptions import ModelError

# Vol-of-vol at or below this level is treated as deterministic variance
DEGENERATE_VOL_OF_VOL = 1e-12

_DIVISIBILITY_TOLERANCE = 1e-12


class Family(str, Enum):
    """Asset dynamics supported by the engine."""

    BS = "BS"
    HESTON = "Heston"
    BSHW = "BSHW"
    HHW = "HHW"


class ContractKind(str, Enum):
    """Option contract types."""

    EUROPEAN = "European"
    BERMUDAN = "Bermudan"
    BARRIER = "DownAndOutBarrier"


@dataclass(frozen=True)
class ModelSpec:
    """Parameters of the risk-neutral asset dynamics.

    Fields that a family does not use keep their defaults and are ignored: the
    variance block (``v0``, ``kappa``, ``vbar``, ``gamma``, ``rho_xv``) for BS and
    BSHW, the Hull-White block (``lam``, ``theta``, ``eta``, ``rho_xr``) for BS and
    Heston, and ``sigma`` for Heston and HHW. ``r0`` is the constant rate for
    deterministic-rate families and the initial short rate otherwise.

    Attributes:
        family: Dynamics family
        s0: Spot price
        r0: Initial (or constant) short rate
        v0: Initial variance
        kappa: Variance mean-reversion speed
        vbar: Long-run variance
        gamma: Vol-of-vol
        lam: Short-rate mean-reversion speed
        theta: Short-rate mean level
        eta: Short-rate volatility
        sigma: Constant asset volatility (BS, BSHW)
        rho_xv: Asset-variance correlation
        rho_xr: Asset-rate correlation
    """

    family: Family
    s0: float
    r0: float
    v0: float = 0.0
    kappa: float = 0.0
    vbar: float = 0.0
    gamma: float = 0.0
    lam: float = 0.0
    theta: float = 0.0
    eta: float = 0.0
    sigma: float = 0.0
    rho_xv: float = 0.0
    rho_xr: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", Family(self.family))
        self.validate()

    def validate(self) -> None:
        """Validate parameter ranges.

        Raises:
            ModelError: If a parameter is out of range or the correlation
                matrix is not positive semi-definite
        """
        if not self.s0 > 0:
            raise ModelError(f"Spot price must be positive, got {self.s0}")
        for name in ("kappa", "gamma", "lam", "eta", "sigma", "v0", "vbar"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ModelError(f"Parameter {name} must be finite and >= 0, got {value}")
        for name in ("rho_xv", "rho_xr"):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ModelError(f"Correlation {name} must lie in [-1, 1], got {value}")

        if self.stochastic_vol and self.kappa <= 0:
            raise ModelError(f"{self.family.value} requires kappa > 0")
        if not self.stochastic_vol and self.sigma <= 0:
            raise ModelError(f"{self.family.value} requires sigma > 0")
        if self.stochastic_rate and self.lam <= 0:
            raise ModelError(f"{self.family.value} requires lam > 0")
        if self.family is Family.HHW and self.gamma <= DEGENERATE_VOL_OF_VOL:
            if self.v0 == 0 and self.vbar == 0:
                raise ModelError("HHW with zero vol-of-vol needs a positive variance level")

        eigenvalues = np.linalg.eigvalsh(self.correlation_matrix())
        if eigenvalues.min() < -1e-12:
            raise ModelError(
                f"Correlation matrix is not positive semi-definite "
                f"(rho_xv={self.rho_xv}, rho_xr={self.rho_xr})"
            )

    @property
    def x0(self) -> float:
        """Initial log-price."""
        return math.log(self.s0)

    @property
    def stochastic_vol(self) -> bool:
        return self.family in (Family.HESTON, Family.HHW)

    @property
    def stochastic_rate(self) -> bool:
        return self.family in (Family.BSHW, Family.HHW)

    @property
    def degenerate_vol(self) -> bool:
        """True when the variance process is numerically deterministic."""
        return self.stochastic_vol and self.gamma <= DEGENERATE_VOL_OF_VOL

    @property
    def feller_satisfied(self) -> bool:
        """Feller condition 2*kappa*vbar >= gamma^2 (reported, never enforced)."""
        return 2.0 * self.kappa * self.vbar >= self.gamma**2

    @property
    def factors(self) -> tuple[str, ...]:
        """Names of the stochastic state factors, in state-vector order."""
        names = ["x"]
        if self.stochastic_vol:
            names.append("v")
        if self.stochastic_rate:
            names.append("r")
        return tuple(names)

    @property
    def n_dims(self) -> int:
        return len(self.factors)

    @property
    def max_moment_degree(self) -> int:
        """Highest total monomial degree with available discounted moments."""
        return 2 if self.family is Family.HHW else 3

    def correlation_matrix(self) -> npt.NDArray[np.float64]:
        """Correlation of (W^x, W^v, W^r); corr(W^v, W^r) is zero."""
        rho_xv = self.rho_xv if self.stochastic_vol else 0.0
        rho_xr = self.rho_xr if self.stochastic_rate else 0.0
        return np.array(
            [
                [1.0, rho_xv, rho_xr],
                [rho_xv, 1.0, 0.0],
                [rho_xr, 0.0, 1.0],
            ]
        )

    def asset_loadings(self) -> tuple[float, float, float]:
        """Loadings of W^x on independent normals (Z_v, Z_r, Z_perp).

        This is the last row of the lower Cholesky factor of the correlation
        matrix ordered as (W^v, W^r, W^x).

        Returns:
            Tuple of loadings on the variance shock, the rate shock and the
            idiosyncratic shock
        """
        corr = self.correlation_matrix()
        ordered = corr[np.ix_([1, 2, 0], [1, 2, 0])]
        try:
            lower = np.linalg.cholesky(ordered)
            row = lower[2]
            return float(row[0]), float(row[1]), float(row[2])
        except np.linalg.LinAlgError:
            # Semi-definite boundary (|rho| summing to one)
            rho_xv, rho_xr = corr[0, 1], corr[0, 2]
            rest = max(1.0 - rho_xv**2 - rho_xr**2, 0.0)
            return float(rho_xv), float(rho_xr), math.sqrt(rest)

    def zero_coupon_bond(self, tau: float, r_t: float | None = None) -> float:
        """Model zero-coupon bond price P(t, t+tau).

        Args:
            tau: Time to maturity in years
            r_t: Short rate at t (defaults to r0)

        Returns:
            Bond price
        """
        rate = self.r0 if r_t is None else r_t
        if not self.stochastic_rate:
            return math.exp(-rate * tau)
        b = -math.expm1(-self.lam * tau) / self.lam
        a = (self.theta - self.eta**2 / (2.0 * self.lam**2)) * (b - tau) - (
            self.eta**2 * b**2 / (4.0 * self.lam)
        )
        return math.exp(a - b * rate)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["family"] = self.family.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelSpec":
        _check_keys(cls, data, "model")
        return cls(**data)


@dataclass(frozen=True)
class ContractSpec:
    """Option contract definition.

    Attributes:
        kind: Contract type
        omega: +1 for a call, -1 for a put
        strike: Strike price K
        tenor: Maturity T in years
        barrier: Down-and-out barrier level L (barrier contracts only)
        exercise_dates: Bermudan exercise dates, a subset of the monitoring dates
    """

    kind: ContractKind
    omega: int
    strike: float
    tenor: float
    barrier: float | None = None
    exercise_dates: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ContractKind(self.kind))
        object.__setattr__(self, "exercise_dates", tuple(float(t) for t in self.exercise_dates))
        self.validate()

    def validate(self) -> None:
        """Validate the contract on its own.

        Raises:
            ModelError: If a contract field is invalid
        """
        if self.omega not in (1, -1):
            raise ModelError(f"omega must be +1 (call) or -1 (put), got {self.omega}")
        if not self.strike > 0:
            raise ModelError(f"Strike must be positive, got {self.strike}")
        if not self.tenor > 0:
            raise ModelError(f"Tenor must be positive, got {self.tenor}")
        if self.kind is ContractKind.BARRIER:
            if self.barrier is None or not self.barrier > 0:
                raise ModelError("Down-and-out barrier contracts need a positive barrier level")
        elif self.barrier is not None:
            raise ModelError(f"Barrier level given for a {self.kind.value} contract")
        if self.kind is ContractKind.BERMUDAN:
            if not self.exercise_dates:
                raise ModelError("Bermudan contracts need at least one exercise date")
            if min(self.exercise_dates) <= 0:
                raise ModelError("Exercise dates must be strictly positive")
        elif self.exercise_dates:
            raise ModelError(f"Exercise dates given for a {self.kind.value} contract")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        data["exercise_dates"] = list(self.exercise_dates)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ContractSpec":
        _check_keys(cls, data, "contract")
        return cls(**data)


@dataclass(frozen=True)
class TimeGrid:
    """Monitoring dates plus the simulation substep.

    Attributes:
        dates: Monitoring dates t_0 = 0 < t_1 < ... < t_M
        dt_qe: Simulation substep; must divide every monitoring interval
    """

    dates: tuple[float, ...]
    dt_qe: float
    _substeps: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        dates = tuple(float(t) for t in self.dates)
        object.__setattr__(self, "dates", dates)

        if len(dates) < 2:
            raise ModelError("A time grid needs at least two monitoring dates (M >= 1)")
        if dates[0] != 0.0:
            raise ModelError(f"First monitoring date must be 0, got {dates[0]}")
        if any(b <= a for a, b in zip(dates[:-1], dates[1:], strict=True)):
            raise ModelError("Monitoring dates must be strictly increasing")
        if not self.dt_qe > 0:
            raise ModelError(f"Simulation substep must be positive, got {self.dt_qe}")

        substeps = []
        for a, b in zip(dates[:-1], dates[1:], strict=True):
            ratio = (b - a) / self.dt_qe
            count = round(ratio)
            if count < 1 or abs(ratio - count) > _DIVISIBILITY_TOLERANCE * ratio:
                raise ModelError(
                    f"Substep {self.dt_qe} does not divide monitoring interval [{a}, {b}]"
                )
            substeps.append(count)
        object.__setattr__(self, "_substeps", tuple(substeps))

    @classmethod
    def uniform(cls, tenor: float, n_intervals: int, dt_qe: float) -> "TimeGrid":
        """Build an equally spaced grid with ``n_intervals`` intervals on [0, tenor]."""
        if n_intervals < 1:
            raise ModelError(f"Number of monitoring intervals must be >= 1, got {n_intervals}")
        return cls(tuple(np.linspace(0.0, tenor, n_intervals + 1).tolist()), dt_qe)

    @property
    def M(self) -> int:  # noqa: N802
        return len(self.dates) - 1

    @property
    def tenor(self) -> float:
        return self.dates[-1]

    def as_array(self) -> npt.NDArray[np.float64]:
        return np.asarray(self.dates)

    def substeps(self, m: int) -> int:
        """Number of simulation substeps between t_m and t_{m+1}."""
        return self._substeps[m]

    def index_of(self, t: float) -> int | None:
        """Index of the monitoring date equal to ``t`` (1e-12 relative), or None."""
        for m, date in enumerate(self.dates):
            if abs(date - t) <= _DIVISIBILITY_TOLERANCE * max(1.0, abs(t)):
                return m
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"dates": list(self.dates), "dt_qe": self.dt_qe}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TimeGrid":
        unknown = set(data) - {"dates", "dt_qe"}
        if unknown:
            raise ModelError(f"Unknown grid field(s): {', '.join(sorted(unknown))}")
        return cls(tuple(data["dates"]), data["dt_qe"])


def _check_keys(cls: type, data: dict[str, Any], section: str) -> None:
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ModelError(f"Unknown {section} field(s): {', '.join(sorted(unknown))}")


def payoff(contract: ContractSpec, spot: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Exercise value max(omega * (S - K), 0).

    Args:
        contract: Contract providing omega and the strike
        spot: Spot price(s), strictly positive

    Returns:
        Payoff array with the shape of ``spot``
    """
    s = np.asarray(spot, dtype=np.float64)
    return np.maximum(contract.omega * (s - contract.strike), 0.0)


def check_setup(model: ModelSpec, contract: ContractSpec, grid: TimeGrid) -> None:
    """Check that model, contract and grid describe one consistent valuation.

    Raises:
        ModelError: If the grid does not end at the tenor, an exercise date is
            not a monitoring date, or the barrier is not below the spot
    """
    if abs(grid.tenor - contract.tenor) > _DIVISIBILITY_TOLERANCE * contract.tenor:
        raise ModelError(f"Grid ends at {grid.tenor} but the contract tenor is {contract.tenor}")
    for t in contract.exercise_dates:
        if grid.index_of(t) is None:
            raise ModelError(f"Exercise date {t} is not a monitoring date")
    if contract.kind is ContractKind.BARRIER:
        assert contract.barrier is not None
        if not 0 < contract.barrier < model.s0:
            raise ModelError(
                f"Down-and-out barrier {contract.barrier} must lie in (0, S0={model.s0})"
            )


def european(omega: int, strike: float, tenor: float) -> ContractSpec:
    return ContractSpec(ContractKind.EUROPEAN, omega, strike, tenor)


def bermudan(omega: int, strike: float, grid: TimeGrid) -> ContractSpec:
    """Bermudan contract exercisable at every monitoring date after t_0."""
    return ContractSpec(
        ContractKind.BERMUDAN, omega, strike, grid.tenor, exercise_dates=grid.dates[1:]
    )


def down_and_out(omega: int, strike: float, tenor: float, barrier: float) -> ContractSpec:
    return ContractSpec(ContractKind.BARRIER, omega, strike, tenor, barrier=barrier)


Preset = tuple[ModelSpec, ContractSpec, TimeGrid]

_DT_QE = 0.05


def _test_a_model() -> ModelSpec:
    return ModelSpec(
        Family.HESTON,
        s0=100.0,
        r0=0.04,
        v0=0.0348,
        kappa=1.15,
        vbar=0.0348,
        gamma=0.39,
        rho_xv=-0.64,
    )


def _test_b_model(rho_xr: float) -> ModelSpec:
    return ModelSpec(
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
        rho_xv=-0.3,
        rho_xr=rho_xr,
    )


def _impact_model(family: Family) -> ModelSpec:
    base = _test_b_model(0.2)
    if family is Family.HHW:
        return base
    if family is Family.HESTON:
        return replace(base, family=Family.HESTON, lam=0.0, theta=0.0, eta=0.0, rho_xr=0.0)
    sigma = math.sqrt(base.v0)
    if family is Family.BSHW:
        return ModelSpec(
            Family.BSHW,
            s0=base.s0,
            r0=base.r0,
            lam=base.lam,
            theta=base.theta,
            eta=base.eta,
            sigma=sigma,
            rho_xr=base.rho_xr,
        )
    return ModelSpec(Family.BS, s0=base.s0, r0=base.r0, sigma=sigma)


def _bermudan_preset(model: ModelSpec, tenor: float) -> Preset:
    grid = TimeGrid.uniform(tenor, 10, _DT_QE)
    return model, bermudan(-1, 100.0, grid), grid


def _barrier_preset(model: ModelSpec, tenor: float) -> Preset:
    grid = TimeGrid.uniform(tenor, 10, _DT_QE)
    return model, down_and_out(-1, 100.0, tenor, 0.8 * model.s0), grid


def _european_preset(model: ModelSpec, tenor: float) -> Preset:
    grid = TimeGrid.uniform(tenor, round(tenor / _DT_QE), _DT_QE)
    return model, european(-1, 100.0, tenor), grid


_PRESETS: dict[str, Callable[[], Preset]] = {
    "TestA": lambda: _bermudan_preset(_test_a_model(), 1.0),
    "TestB_rho02_T5": lambda: _bermudan_preset(_test_b_model(0.2), 5.0),
    "TestB_rho06_T10": lambda: _bermudan_preset(_test_b_model(0.6), 10.0),
    "TestA_Barrier": lambda: _barrier_preset(_test_a_model(), 1.0),
    "TestB_rho02_T5_Barrier": lambda: _barrier_preset(_test_b_model(0.2), 5.0),
    "TestB_rho06_T10_Barrier": lambda: _barrier_preset(_test_b_model(0.6), 10.0),
    "TestB_rho02_T10_European": lambda: _european_preset(_test_b_model(0.2), 10.0),
}
for _family in Family:
    for _tenor in (1, 5):
        _PRESETS[f"Impact_{_family.value}_T{_tenor}"] = (
            lambda f=_family, t=_tenor: _bermudan_preset(_impact_model(f), float(t))
        )


def preset_names() -> list[str]:
    return list(_PRESETS)


def preset(name: str) -> Preset:
    """Build a named parameter set.

    Args:
        name: Preset name, see ``preset_names()``

    Returns:
        Tuple of (model, contract, grid)

    Raises:
        ModelError: If the preset name is unknown
    """
    try:
        builder = _PRESETS[name]
    except KeyError:
        raise ModelError(
            f"Unknown preset: {name}. Must be one of {', '.join(preset_names())}"
        ) from None
    return builder()
