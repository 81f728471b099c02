"""Forward simulation of the stochastic grid."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.special import ndtr

from sgbm_exposure.exceptions import SimulationError
from sgbm_exposure.logger import setup_logger
from sgbm_exposure.models import ModelSpec, TimeGrid

logger = setup_logger(__name__)

FloatArray = npt.NDArray[np.float64]

# Paths are generated in blocks of this size; each block owns one RNG key
BLOCK_SIZE = 16_384

PSI_CRITICAL = 1.5


@dataclass(frozen=True)
class RngStream:
    """Counter-based normal source keyed by (seed, stream, block).

    Within a block, draws advance substep by substep, so every draw is a fixed
    function of (seed, stream, path index, substep index) for a given block size.
    """

    seed: int
    stream: int = 0

    def block_generator(self, block: int) -> np.random.Generator:
        key = np.random.SeedSequence([self.seed, self.stream, block])
        return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True, eq=False)
class PathGrid:
    """Realized states at the monitoring dates.

    Arrays have shape (N, M+1). ``v`` and ``r`` are None when the factor is not
    stochastic for the model family. ``running_min`` holds the minimum simulated
    log-price over all substeps up to each monitoring date when requested.

    Attributes:
        model: Model the paths were simulated under
        grid: Monitoring dates and substep
        x: Log-prices
        v: Variances
        r: Short rates
        disc: Pathwise discount factors D(0, t_m)
        running_min: Running minimum of the log-price
        seed: RNG seed
        stream: RNG stream (0 for the regression pass, 1 for the path-estimator pass)
    """

    model: ModelSpec
    grid: TimeGrid
    x: FloatArray
    v: FloatArray | None
    r: FloatArray | None
    disc: FloatArray
    running_min: FloatArray | None
    seed: int
    stream: int = 0

    @property
    def n_paths(self) -> int:
        return int(self.x.shape[0])

    @property
    def n_dims(self) -> int:
        return self.model.n_dims

    @property
    def factors(self) -> tuple[str, ...]:
        return self.model.factors

    def variance(self, m: int) -> FloatArray:
        """Variance at date m (constant v0 for families without stochastic volatility)."""
        if self.v is None:
            return np.full(self.n_paths, self.model.v0)
        return self.v[:, m]

    def rate(self, m: int) -> FloatArray:
        """Short rate at date m (constant r0 for deterministic-rate families)."""
        if self.r is None:
            return np.full(self.n_paths, self.model.r0)
        return self.r[:, m]

    def factor(self, name: str, m: int) -> FloatArray:
        if name == "x":
            return self.x[:, m]
        if name == "v":
            return self.variance(m)
        if name == "r":
            return self.rate(m)
        raise SimulationError(f"Unknown state factor: {name}")

    def columns(self, m: int, order: tuple[str, ...] | None = None) -> FloatArray:
        """State columns at date m as an (N, n) array, in ``order`` or factor order."""
        names = order or self.factors
        return np.column_stack([self.factor(name, m) for name in names])

    def knocked_out(self, m: int, log_barrier: float) -> npt.NDArray[np.bool_]:
        """Paths whose log-price touched ``log_barrier`` at any substep up to t_m."""
        if self.running_min is None:
            raise SimulationError("Paths were simulated without barrier monitoring")
        return self.running_min[:, m] <= log_barrier


def simulate(
    model: ModelSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    stream: int = 0,
    track_minimum: bool = False,
    workers: int = 1,
) -> PathGrid:
    """Simulate ``n_paths`` paths of the model on the substep grid.

    Variance follows the QE scheme, the log-asset the matching QE asset update
    (trapezoidal weights, no martingale correction), and the Hull-White rate its
    exact Gaussian transition. Discounting uses the left-point rate per substep.

    Args:
        model: Model specification
        grid: Monitoring dates and substep
        n_paths: Number of paths N
        seed: RNG seed
        stream: RNG stream index, separating independent passes on one seed
        track_minimum: Record the running minimum log-price for barrier monitoring
        workers: Number of threads; results do not depend on it

    Returns:
        PathGrid: Simulated states and discount factors

    Raises:
        SimulationError: If fewer than two paths are requested
    """
    if n_paths < 2:
        raise SimulationError(f"Need at least 2 paths, got {n_paths}")
    if not grid.dt_qe > 0:
        raise SimulationError(f"Simulation substep must be positive, got {grid.dt_qe}")

    rng = RngStream(seed, stream)
    starts = list(range(0, n_paths, BLOCK_SIZE))
    sizes = [min(BLOCK_SIZE, n_paths - start) for start in starts]

    def run_block(block: int) -> dict[str, FloatArray]:
        return _simulate_block(model, grid, sizes[block], rng.block_generator(block), track_minimum)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(run_block, range(len(starts))))
    else:
        blocks = [run_block(b) for b in range(len(starts))]

    def stack(name: str) -> FloatArray:
        out = np.concatenate([blk[name] for blk in blocks], axis=0)
        out.setflags(write=False)
        return out

    paths = PathGrid(
        model=model,
        grid=grid,
        x=stack("x"),
        v=stack("v") if model.stochastic_vol else None,
        r=stack("r") if model.stochastic_rate else None,
        disc=stack("disc"),
        running_min=stack("running_min") if track_minimum else None,
        seed=seed,
        stream=stream,
    )
    logger.debug(
        f"Simulated {n_paths} {model.family.value} paths over {grid.M} intervals "
        f"(seed={seed}, stream={stream})"
    )
    return paths


def _simulate_block(
    model: ModelSpec,
    grid: TimeGrid,
    n: int,
    gen: np.random.Generator,
    track_minimum: bool,
) -> dict[str, FloatArray]:
    n_dates = grid.M + 1
    out = {
        "x": np.empty((n, n_dates)),
        "v": np.empty((n, n_dates)),
        "r": np.empty((n, n_dates)),
        "disc": np.empty((n, n_dates)),
    }
    if track_minimum:
        out["running_min"] = np.empty((n, n_dates))

    x = np.full(n, model.x0)
    v = np.full(n, model.v0)
    r = np.full(n, model.r0)
    disc = np.ones(n)
    running_min = x.copy()

    load_v, load_r, load_perp = model.asset_loadings()
    orth_scale = math.hypot(load_r, load_perp)

    def record(m: int) -> None:
        out["x"][:, m] = x
        out["v"][:, m] = v
        out["r"][:, m] = r
        out["disc"][:, m] = disc
        if track_minimum:
            out["running_min"][:, m] = running_min

    record(0)
    for m in range(grid.M):
        n_sub = grid.substeps(m)
        dt = (grid.dates[m + 1] - grid.dates[m]) / n_sub
        for _ in range(n_sub):
            z_v, z_r, z_3 = gen.standard_normal((3, n))

            r_next = _rate_step(model, r, dt, z_r) if model.stochastic_rate else r
            rate_integral = 0.5 * (r + r_next) * dt
            disc = disc * np.exp(-r * dt)

            if model.stochastic_vol and not model.degenerate_vol:
                v_next = _qe_variance_step(model, v, dt, z_v)
                z_perp = (load_r * z_r + load_perp * z_3) / orth_scale if orth_scale > 0 else 0.0
                x = x + rate_integral + _qe_asset_increment(model, v, v_next, dt, z_perp)
            else:
                if model.stochastic_vol:
                    v_next = model.vbar + (v - model.vbar) * math.exp(-model.kappa * dt)
                    avg_var = 0.5 * (v + v_next)
                else:
                    v_next = v
                    avg_var = np.full(n, model.sigma**2)
                z_x = load_v * z_v + load_r * z_r + load_perp * z_3
                x = x - 0.5 * avg_var * dt + rate_integral + np.sqrt(avg_var * dt) * z_x

            v = v_next
            r = r_next
            if track_minimum:
                running_min = np.minimum(running_min, x)
        record(m + 1)

    return out


def _rate_step(model: ModelSpec, r: FloatArray, dt: float, z: FloatArray) -> FloatArray:
    decay = math.exp(-model.lam * dt)
    sd = model.eta * math.sqrt(-math.expm1(-2.0 * model.lam * dt) / (2.0 * model.lam))
    return model.theta + (r - model.theta) * decay + sd * z


def _qe_variance_step(model: ModelSpec, v: FloatArray, dt: float, z: FloatArray) -> FloatArray:
    """One QE step for the square-root variance; never negative."""
    kappa, vbar, gamma = model.kappa, model.vbar, model.gamma
    decay = math.exp(-kappa * dt)
    mean = vbar + (v - vbar) * decay
    var = v * gamma**2 * decay * (1.0 - decay) / kappa + vbar * gamma**2 * (1.0 - decay) ** 2 / (
        2.0 * kappa
    )

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        psi = var / mean**2

        # Quadratic branch
        inv = 2.0 / psi
        b2 = inv - 1.0 + np.sqrt(inv) * np.sqrt(np.maximum(inv - 1.0, 0.0))
        a = mean / (1.0 + b2)
        quadratic = a * (np.sqrt(b2) + z) ** 2

        # Exponential branch with U = Phi(z); 1 - U computed as Phi(-z)
        p = (psi - 1.0) / (psi + 1.0)
        beta = (1.0 - p) / mean
        tail = ndtr(-z)
        exponential = np.where(tail >= 1.0 - p, 0.0, np.log((1.0 - p) / tail) / beta)

    v_next = np.where(psi <= PSI_CRITICAL, quadratic, exponential)
    v_next = np.where(var > 0, v_next, mean)
    return np.where(mean > 0, np.maximum(v_next, 0.0), 0.0)


def _qe_asset_increment(
    model: ModelSpec,
    v: FloatArray,
    v_next: FloatArray,
    dt: float,
    z_perp: FloatArray | float,
) -> FloatArray:
    """Log-asset increment net of the rate integral, with equal trapezoid weights."""
    rho, kappa, vbar, gamma = model.rho_xv, model.kappa, model.vbar, model.gamma
    k0 = -rho * kappa * vbar * dt / gamma
    k1 = 0.5 * dt * (kappa * rho / gamma - 0.5) - rho / gamma
    k2 = 0.5 * dt * (kappa * rho / gamma - 0.5) + rho / gamma
    k3 = 0.5 * dt * (1.0 - rho**2)
    return k0 + k1 * v + k2 * v_next + np.sqrt(k3 * (v + v_next)) * z_perp


def _check_exponents(paths: PathGrid, m: int, exponents: tuple[int, ...]) -> None:
    if not 0 <= m <= paths.grid.M:
        raise SimulationError(f"Date index {m} out of range [0, {paths.grid.M}]")
    if len(exponents) != paths.n_dims or any(e < 0 for e in exponents):
        raise SimulationError(
            f"Exponents {exponents} invalid for factors {', '.join(paths.factors)}"
        )


def _monomial_samples(
    paths: PathGrid, m: int, exponents: tuple[int, ...], discounted: bool
) -> FloatArray:
    _check_exponents(paths, m, exponents)
    values = np.ones(paths.n_paths)
    for name, power in zip(paths.factors, exponents, strict=True):
        if power:
            values = values * paths.factor(name, m) ** power
    if discounted:
        values = values * paths.disc[:, m]
    return values


def sample_moment(
    paths: PathGrid, m: int, exponents: tuple[int, ...], discounted: bool = False
) -> float:
    """Cross-sectional moment of a state monomial at date m.

    Args:
        paths: Simulated paths
        m: Date index
        exponents: Monomial exponents in factor order
        discounted: Multiply each sample by its pathwise discount D(0, t_m)

    Returns:
        Sample mean over all paths

    Raises:
        SimulationError: If the date index or exponents are invalid
    """
    return float(np.mean(_monomial_samples(paths, m, exponents, discounted)))


def sample_moment_error(
    paths: PathGrid, m: int, exponents: tuple[int, ...], discounted: bool = False
) -> float:
    """Monte Carlo standard error of ``sample_moment``."""
    values = _monomial_samples(paths, m, exponents, discounted)
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def export_paths(paths: PathGrid, path: Path) -> Path:
    """Write the path cloud as a long CSV with columns path, date, t, x, v, r, disc."""
    n, n_dates = paths.x.shape
    frame = pd.DataFrame(
        {
            "path": np.repeat(np.arange(n), n_dates),
            "date": np.tile(np.arange(n_dates), n),
            "t": np.tile(paths.grid.as_array(), n),
            "x": paths.x.ravel(),
            "v": np.column_stack([paths.variance(m) for m in range(n_dates)]).ravel(),
            "r": np.column_stack([paths.rate(m) for m in range(n_dates)]).ravel(),
            "disc": paths.disc.ravel(),
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=None)
    return path
