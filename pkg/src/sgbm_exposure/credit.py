"""Default probabilities, CVA and reference pricers."""

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas
from scipy.optimize import brentq, newton
from scipy.stats import norm

from sgbm_exposure.exceptions import CreditError
from sgbm_exposure.logger import setup_logger
from sgbm_exposure.models import ContractKind, ContractSpec, ModelSpec, TimeGrid, payoff
from sgbm_exposure.paths import simulate

logger = setup_logger(__name__)

VOL_BRACKET = (1e-6, 5.0)
PRICE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class CreditSpec:
    """Counterparty credit inputs.

    Attributes:
        hazard_rate: Constant default intensity h (1/year)
        recovery: Recovery rate delta in [0, 1)
        pfe_alpha: PFE confidence level in (0, 1)
    """

    hazard_rate: float = 0.03
    recovery: float = 0.0
    pfe_alpha: float = 0.975

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Validate the credit parameters.

        Raises:
            CreditError: If any parameter is out of range
        """
        if not (math.isfinite(self.hazard_rate) and self.hazard_rate >= 0):
            raise CreditError(f"Hazard rate must be finite and >= 0, got {self.hazard_rate}")
        if not 0 <= self.recovery < 1:
            raise CreditError(f"Recovery must lie in [0, 1), got {self.recovery}")
        if not 0 < self.pfe_alpha < 1:
            raise CreditError(f"PFE confidence must lie in (0, 1), got {self.pfe_alpha}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def pd_curve(t: npt.ArrayLike, hazard_rate: float) -> npt.NDArray[np.float64]:
    """Default probability PD(t) = 1 - exp(-h t) for a constant hazard rate.

    Raises:
        CreditError: If a time is negative
    """
    times = np.asarray(t, dtype=np.float64)
    if np.any(times < 0):
        raise CreditError("Default probability needs t >= 0")
    return -np.expm1(-hazard_rate * times)


def pd(t: float, hazard_rate: float) -> float:
    """Scalar form of ``pd_curve``."""
    return float(pd_curve(t, hazard_rate))


def cva(ee_star: npt.ArrayLike, credit: CreditSpec, dates: Sequence[float]) -> float:
    """Discrete unilateral CVA, (1 - delta) sum_m EE*(t_m) (PD(t_{m+1}) - PD(t_m)).

    Args:
        ee_star: Discounted expected exposures at t_0..t_{M-1}
        credit: Hazard rate and recovery
        dates: Monitoring dates t_0..t_M

    Returns:
        CVA in currency units

    Raises:
        CreditError: If the exposure and date counts do not match
    """
    exposures = np.asarray(ee_star, dtype=np.float64)
    times = np.asarray(dates, dtype=np.float64)
    if exposures.size != times.size - 1:
        raise CreditError(
            f"Expected {times.size - 1} exposure values for {times.size} dates, "
            f"got {exposures.size}"
        )
    increments = np.diff(pd_curve(times, credit.hazard_rate))
    return float((1.0 - credit.recovery) * np.sum(exposures * increments))


def black_scholes_price(
    s0: float, strike: float, tenor: float, rate: float, sigma: float, omega: int = -1
) -> float:
    """Black-Scholes price of a European call (omega=1) or put (omega=-1)."""
    if sigma <= 0 or tenor <= 0:
        return max(omega * (s0 - strike * math.exp(-rate * tenor)), 0.0)
    root = sigma * math.sqrt(tenor)
    d1 = (math.log(s0 / strike) + (rate + 0.5 * sigma**2) * tenor) / root
    d2 = d1 - root
    return float(
        omega * (s0 * norm.cdf(omega * d1) - strike * math.exp(-rate * tenor) * norm.cdf(omega * d2))
    )


def _vega(s0: float, strike: float, tenor: float, rate: float, sigma: float) -> float:
    root = sigma * math.sqrt(tenor)
    d1 = (math.log(s0 / strike) + (rate + 0.5 * sigma**2) * tenor) / root
    return float(s0 * norm.pdf(d1) * math.sqrt(tenor))


def implied_vol(
    price: float, s0: float, strike: float, tenor: float, rate: float, omega: int = -1
) -> float:
    """Black-Scholes implied volatility by Newton steps with a bracketing fallback.

    Args:
        price: Option price
        s0: Spot
        strike: Strike
        tenor: Time to maturity
        rate: Continuously compounded rate
        omega: +1 call, -1 put

    Returns:
        Volatility reproducing ``price`` to 1e-10

    Raises:
        CreditError: If the price violates the no-arbitrage bounds
    """
    discounted_strike = strike * math.exp(-rate * tenor)
    if omega == 1:
        lower, upper = max(s0 - discounted_strike, 0.0), s0
    else:
        lower, upper = max(discounted_strike - s0, 0.0), discounted_strike
    if not lower < price < upper:
        raise CreditError(
            f"Price {price} outside the no-arbitrage bounds ({lower}, {upper}) for K={strike}"
        )

    def objective(sigma: float) -> float:
        return black_scholes_price(s0, strike, tenor, rate, sigma, omega) - price

    low, high = VOL_BRACKET
    try:
        sigma = float(
            newton(
                objective,
                0.2,
                fprime=lambda s: _vega(s0, strike, tenor, rate, s),
                tol=1e-14,
                maxiter=50,
            )
        )
        if low <= sigma <= high and abs(objective(sigma)) < PRICE_TOLERANCE:
            return sigma
    except (RuntimeError, ZeroDivisionError, OverflowError):
        pass

    try:
        return float(brentq(objective, low, high, xtol=1e-15, maxiter=500))
    except ValueError as e:
        raise CreditError(f"No implied volatility in {VOL_BRACKET} for price {price}") from e


def effective_rate(bond: float, tenor: float) -> float:
    """Flat rate -ln P(0, T) / T matching a zero-coupon bond price."""
    return -math.log(bond) / tenor


def implied_vol_table(
    strikes: Sequence[float],
    prices: Sequence[float],
    s0: float,
    tenor: float,
    bond: float,
    omega: int = -1,
) -> pandas.DataFrame:
    """Implied volatilities for a strike strip under the bond-implied flat rate.

    Returns:
        DataFrame with columns strike, price, implied_vol
    """
    if len(strikes) != len(prices):
        raise CreditError(f"{len(strikes)} strikes but {len(prices)} prices")
    rate = effective_rate(bond, tenor)
    vols = [implied_vol(p, s0, k, tenor, rate, omega) for k, p in zip(strikes, prices, strict=True)]
    return pandas.DataFrame({"strike": list(strikes), "price": list(prices), "implied_vol": vols})


def mc_european_oracle(
    model: ModelSpec,
    contract: ContractSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    workers: int = 1,
) -> tuple[float, float]:
    """Plain Monte Carlo price of a European or down-and-out contract.

    Terminal payoffs are discounted pathwise; knocked-out paths pay nothing.

    Returns:
        Tuple (price, standard error)

    Raises:
        CreditError: If the contract has early exercise
    """
    if contract.kind is ContractKind.BERMUDAN:
        raise CreditError("The Monte Carlo oracle prices contracts without early exercise only")
    barrier = contract.kind is ContractKind.BARRIER
    paths = simulate(model, grid, n_paths, seed, stream=2, track_minimum=barrier, workers=workers)
    cash = payoff(contract, np.exp(paths.x[:, -1])) * paths.disc[:, -1]
    if barrier:
        assert contract.barrier is not None
        cash = np.where(paths.knocked_out(grid.M, math.log(contract.barrier)), 0.0, cash)
    price = float(cash.mean())
    stderr = float(cash.std(ddof=1) / math.sqrt(n_paths))
    logger.debug(f"Monte Carlo oracle: {price:.6f} ({stderr:.2e}) from {n_paths} paths")
    return price, stderr
