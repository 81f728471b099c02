"""Discounted characteristic functions and discounted moments.

For every supported family the discounted characteristic function is
exponential-affine in the state,

    Phi(u; tau, X) = E[exp(i u1 x_T + i u2 v_T + i u3 r_T) D(t, T) | X_t]
                   = exp(A(u) + i u1 x + C(u) v + D(u) r),

with the Heston-Hull-White family handled through its H1HW approximation, where
the state-dependent part of A enters through the quadrature terms G1 and G2.

Discounted moments E[x_T^p v_T^q r_T^s D | X_t] are obtained either from the
closed-form Heston expressions (degree <= 2) or generically by differentiating
the coefficient functions at u = 0. Because the log-asset drift does not depend
on x, moments are always produced as polynomials in x_t
(``MomentExpansion``), which also yields their x-derivatives.
"""

import itertools
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.special import gammaln, xlogy

from sgbm_exposure.exceptions import MomentError
from sgbm_exposure.logger import setup_logger
from sgbm_exposure.models import DEGENERATE_VOL_OF_VOL, Family, ModelSpec

logger = setup_logger(__name__)

FloatArray = npt.NDArray[np.float64]
ComplexArray = npt.NDArray[np.complex128]
MultiIndex = tuple[int, int, int]

TAU_SMALL = 1e-4
FD_STEP = 1e-3
# Third derivatives use a wider base step; roundoff grows like h^-3
FD_STEP_THIRD = 1e-2
SERIES_TOLERANCE = 1e-12
SERIES_MIN_TERMS = 200
DEFAULT_QUADRATURE_POINTS = 64
BACKEND_TOLERANCE = 1e-6

# Nodes of the sqrt(v)-uniform table used for G1/G2 over path clouds
_TABLE_NODES = 513

_STENCILS: dict[int, tuple[tuple[int, float], ...]] = {
    0: ((0, 1.0),),
    1: ((1, 0.5), (-1, -0.5)),
    2: ((1, 1.0), (0, -2.0), (-1, 1.0)),
    3: ((2, 0.5), (1, -1.0), (-1, 1.0), (-2, -0.5)),
}


class Backend(str, Enum):
    """Discounted-moment evaluation backends."""

    AUTO = "auto"
    CLOSED = "closed"
    GENERIC = "generic"


@dataclass(frozen=True, eq=False)
class MomentRequest:
    """A discounted moment over an interval of length ``tau``.

    Attributes:
        exponents: Monomial exponents in the model's factor order
        tau: Interval length t_{m+1} - t_m
        x: Conditioning log-price(s)
        v: Conditioning variance(s); defaults to v0
        r: Conditioning short rate(s); defaults to r0
    """

    exponents: tuple[int, ...]
    tau: float
    x: npt.ArrayLike
    v: npt.ArrayLike | None = None
    r: npt.ArrayLike | None = None


# ---------------------------------------------------------------------------
# Conditional expectation of the volatility
# ---------------------------------------------------------------------------


def expected_sqrt_v(
    kappa: float,
    gamma: float,
    vbar: float,
    v_s: npt.ArrayLike,
    tau: npt.ArrayLike,
    method: str = "auto",
) -> FloatArray:
    """E[sqrt(v_t) | v_s] for the square-root variance process, tau = t - s.

    Args:
        kappa: Mean-reversion speed
        gamma: Vol-of-vol
        vbar: Long-run variance
        v_s: Conditioning variance(s)
        tau: Horizon(s); broadcast against ``v_s``
        method: ``"auto"`` (small-tau fallback, then the closed approximation when
            d > 1/2, else the series), ``"series"`` or ``"approximation"``

    Returns:
        Array of conditional expectations

    Raises:
        MomentError: If a horizon is negative or the method is unknown
    """
    v_arr, tau_arr = np.broadcast_arrays(
        np.asarray(v_s, dtype=np.float64), np.asarray(tau, dtype=np.float64)
    )
    if np.any(tau_arr < 0):
        raise MomentError("Horizon tau must be non-negative")
    if method not in ("auto", "series", "approximation"):
        raise MomentError(f"Unknown method: {method}")

    if gamma <= DEGENERATE_VOL_OF_VOL:
        return np.sqrt(vbar + (v_arr - vbar) * np.exp(-kappa * tau_arr))

    shape = v_arr.shape
    v_arr, tau_arr = v_arr.ravel(), tau_arr.ravel()
    out = np.sqrt(v_arr)
    active = tau_arr >= TAU_SMALL if method == "auto" else tau_arr > 0
    if not np.any(active):
        return out.reshape(shape)

    decay = np.exp(-kappa * tau_arr[active])
    c = gamma**2 * (1.0 - decay) / (4.0 * kappa)
    d = 4.0 * kappa * vbar / gamma**2
    noncentrality = 4.0 * kappa * v_arr[active] * decay / (gamma**2 * (1.0 - decay))

    use_approximation = method == "approximation" or (method == "auto" and d > 0.5)
    if use_approximation:
        out[active] = np.sqrt(
            c * (noncentrality - 1.0 + d + d / (2.0 * (d + noncentrality)))
        )
    else:
        out[active] = np.sqrt(2.0 * c) * _sqrt_chi2_series(d, noncentrality)
    return out.reshape(shape)


def _sqrt_chi2_series(d: float, noncentrality: FloatArray) -> FloatArray:
    """E[sqrt(chi'^2_d(lambda))] / sqrt(2) as a Poisson mixture, summed in log space.

    Terms are accumulated until, past the Poisson mode, an increment falls below
    ``SERIES_TOLERANCE`` of the partial sum. The term budget is ``SERIES_MIN_TERMS``,
    widened to mu + 12 sd + 40 when the Poisson mass sits beyond it.
    """
    mu = 0.5 * noncentrality
    result = np.empty_like(mu)
    n_terms = max(SERIES_MIN_TERMS, int(np.ceil(mu.max() + 12.0 * np.sqrt(mu.max()) + 40.0)))
    k = np.arange(n_terms, dtype=np.float64)
    ratio = gammaln(0.5 * (1.0 + d) + k) - gammaln(0.5 * d + k) - gammaln(k + 1.0)
    chunk = max(1, 4_000_000 // n_terms)
    for start in range(0, mu.size, chunk):
        part = mu.ravel()[start : start + chunk, None]
        terms = np.exp(-part + xlogy(k[None, :], part) + ratio[None, :])
        partial = np.cumsum(terms, axis=1)
        converged = (k[None, :] >= np.floor(part)) & (terms < SERIES_TOLERANCE * partial)
        stop = np.where(converged.any(axis=1), converged.argmax(axis=1), n_terms - 1)
        result.ravel()[start : start + chunk] = partial[np.arange(part.shape[0]), stop]
    return result


def sqrt_variance_integrals(
    model: ModelSpec,
    tau: float,
    v_t: npt.ArrayLike,
    n_points: int = DEFAULT_QUADRATURE_POINTS,
    interpolate: bool = False,
) -> tuple[FloatArray, FloatArray]:
    """Left-rectangle quadratures G1, G2 of E[sqrt(v)] over an interval.

    G1 = sum_k E[sqrt(v_{T-k ds}) | v_t] (1 - exp(-lam k ds)) ds and
    G2 = sum_k E[sqrt(v_{T-k ds}) | v_t] exp(-lam k ds) ds, k = 0..L-1, ds = tau/L.

    Args:
        model: HHW model
        tau: Interval length
        v_t: Variance(s) at the interval start
        n_points: Number of quadrature intervals L
        interpolate: Read G1, G2 off a memoized table linear in sqrt(v) instead of
            evaluating the rule per state (faster for path clouds, about 1e-4 relative)

    Returns:
        Tuple (G1, G2) with the shape of ``v_t``

    Raises:
        MomentError: If the variance is identically zero under a zero vol-of-vol
    """
    v_arr = np.asarray(v_t, dtype=np.float64)
    if model.degenerate_vol and model.vbar == 0 and np.any(v_arr == 0):
        raise MomentError("Zero variance with zero vol-of-vol leaves E[sqrt(v)] undefined")
    if tau == 0:
        return np.zeros_like(v_arr), np.zeros_like(v_arr)

    ds = tau / n_points
    steps = np.arange(n_points) * ds
    w1 = -np.expm1(-model.lam * steps) * ds
    w2 = np.exp(-model.lam * steps) * ds
    horizons = tau - steps

    if interpolate and v_arr.size:
        root_max = float(np.sqrt(v_arr.max()))
        g1_nodes, g2_nodes, root_nodes = _sqrt_variance_table(
            model, tau, n_points, _table_ceiling(root_max)
        )
        roots = np.sqrt(v_arr)
        return np.interp(roots, root_nodes, g1_nodes), np.interp(roots, root_nodes, g2_nodes)

    flat = v_arr.reshape(-1, 1)
    sqrt_v = expected_sqrt_v(model.kappa, model.gamma, model.vbar, flat, horizons[None, :])
    return (sqrt_v @ w1).reshape(v_arr.shape), (sqrt_v @ w2).reshape(v_arr.shape)


def _table_ceiling(root_max: float) -> float:
    """Round the largest sqrt(v) up to a power of two so tables are reused across dates."""
    if root_max <= 0:
        return 1.0
    return float(2.0 ** math.ceil(math.log2(root_max * 1.0001)))


@lru_cache(maxsize=64)
def _sqrt_variance_table(
    model: ModelSpec, tau: float, n_points: int, root_ceiling: float
) -> tuple[FloatArray, FloatArray, FloatArray]:
    root_nodes = np.linspace(0.0, root_ceiling, _TABLE_NODES)
    ds = tau / n_points
    steps = np.arange(n_points) * ds
    w1 = -np.expm1(-model.lam * steps) * ds
    w2 = np.exp(-model.lam * steps) * ds
    sqrt_v = expected_sqrt_v(
        model.kappa, model.gamma, model.vbar, root_nodes[:, None] ** 2, (tau - steps)[None, :]
    )
    return sqrt_v @ w1, sqrt_v @ w2, root_nodes


# ---------------------------------------------------------------------------
# Coefficient functions of the discounted ChF
# ---------------------------------------------------------------------------


def _heston_variance_terms(
    model: ModelSpec, u1: ComplexArray, u2: ComplexArray, tau: float
) -> tuple[ComplexArray, ComplexArray]:
    """Return (integral of C times kappa*vbar, C) for the square-root variance block."""
    kappa, gamma, vbar = model.kappa, model.gamma, model.vbar
    quad = u1 * u1 + 1j * u1

    if model.degenerate_vol:
        decay = np.exp(-kappa * tau)
        c = 1j * u2 * decay - quad * (1.0 - decay) / (2.0 * kappa)
        c_int = 1j * u2 * (1.0 - decay) / kappa - quad / (2.0 * kappa) * (
            tau - (1.0 - decay) / kappa
        )
        return kappa * vbar * c_int, c

    b = kappa - gamma * model.rho_xv * 1j * u1
    d1 = np.sqrt(b * b + gamma**2 * quad)
    r_minus = -quad / (b + d1)
    r_plus = (b + d1) / gamma**2
    g = (1j * u2 - r_minus) / (1j * u2 - r_plus)
    y = g * np.exp(-d1 * tau)

    c = r_minus - (2.0 * d1 / gamma**2) * y / (1.0 - y)
    i1 = kappa * vbar * (r_minus * tau - (2.0 / gamma**2) * (np.log1p(-y) - np.log1p(-g)))
    return i1, c


def _hull_white_terms(
    model: ModelSpec, u1: ComplexArray, u3: ComplexArray, tau: float
) -> tuple[ComplexArray, ComplexArray]:
    """Return (theta and eta contributions to A, D) for the Hull-White block."""
    lam, theta, eta = model.lam, model.theta, model.eta
    em1 = np.expm1(-lam * tau)
    em2 = np.expm1(-2.0 * lam * tau)
    shift = u1 + 1j
    mixed = lam * u3 - u1 - 1j

    d = (1j * u1 - 1.0) * (-em1) / lam + 1j * u3 * (1.0 + em1)
    i_theta = theta * ((1j * u1 - 1.0) * tau + em1 * (1j * u1 - 1.0) / lam - 1j * u3 * em1)
    i_eta = (eta**2 / (2.0 * lam**2)) * (
        (2.0 / lam) * shift * em1 * mixed + (1.0 / (2.0 * lam)) * em2 * mixed**2 - shift**2 * tau
    )
    return i_theta + i_eta, d


def _coefficients(
    model: ModelSpec, u1: ComplexArray, u2: ComplexArray, u3: ComplexArray, tau: float
) -> tuple[ComplexArray, ComplexArray, ComplexArray]:
    """State-independent coefficient functions (A, C, D) with the x-coefficient i*u1 implied.

    For HHW the covariance term depending on v_t through G1/G2 is excluded.
    """
    zero = np.zeros_like(u1)
    family = model.family

    if family is Family.BS:
        sigma, rate = model.sigma, model.r0
        a = rate * (1j * u1 - 1.0) * tau + 0.5 * sigma**2 * 1j * u1 * (1j * u1 - 1.0) * tau
        return a, zero, zero

    if family is Family.HESTON:
        a_var, c = _heston_variance_terms(model, u1, u2, tau)
        return a_var + model.r0 * (1j * u1 - 1.0) * tau, c, zero

    a_hw, d = _hull_white_terms(model, u1, u3, tau)
    if family is Family.BSHW:
        sigma, lam = model.sigma, model.lam
        em1 = np.expm1(-lam * tau)
        i_var = 0.5 * sigma**2 * 1j * u1 * (1j * u1 - 1.0) * tau
        i_cov = (model.eta * sigma * model.rho_xr / lam) * (
            -(1j * u1 + u1 * u1) / lam * (lam * tau + em1) + u1 * u3 * em1
        )
        return a_hw + i_var + i_cov, zero, d

    a_var, c = _heston_variance_terms(model, u1, u2, tau)
    return a_hw + a_var, c, d


def _covariance_term(
    model: ModelSpec,
    u1: complex | ComplexArray,
    u3: complex | ComplexArray,
    g1: FloatArray,
    g2: FloatArray,
) -> ComplexArray:
    """H1HW asset-rate covariance contribution to A."""
    return model.eta * model.rho_xr * (-(1j * u1 + u1 * u1) * g1 / model.lam - u1 * u3 * g2)


def _covariance_derivative(
    model: ModelSpec, beta: MultiIndex, g1: FloatArray, g2: FloatArray
) -> ComplexArray | float:
    scale = model.eta * model.rho_xr
    if beta == (1, 0, 0):
        return -1j * scale * g1 / model.lam
    if beta == (2, 0, 0):
        return -2.0 * scale * g1 / model.lam
    if beta == (1, 0, 1):
        return -scale * g2
    return 0.0


def _split_state(model: ModelSpec, values: Sequence[complex], name: str) -> tuple[complex, ...]:
    """Map a factor-ordered sequence onto (x, v, r) slots, zero-filling absent factors."""
    if len(values) != model.n_dims:
        raise MomentError(
            f"{name} must have {model.n_dims} entries for factors {', '.join(model.factors)}"
        )
    slots = dict(zip(model.factors, values, strict=True))
    return slots.get("x", 0.0), slots.get("v", 0.0), slots.get("r", 0.0)


def dchf(
    model: ModelSpec,
    u: Sequence[complex],
    tau: float,
    state: Sequence[float],
    n_points: int = DEFAULT_QUADRATURE_POINTS,
) -> complex:
    """Discounted characteristic function Phi(u; tau, X_t).

    Args:
        model: Model specification
        u: Frequencies in factor order (x[, v][, r])
        tau: Interval length
        state: Conditioning state in factor order
        n_points: Quadrature intervals for the HHW terms G1/G2

    Returns:
        Complex value of the discounted characteristic function

    Raises:
        MomentError: If tau is negative or the inputs do not match the factors
    """
    if tau < 0:
        raise MomentError(f"Interval length must be non-negative, got {tau}")
    u1, u2, u3 = (np.asarray(c, dtype=np.complex128) for c in _split_state(model, u, "u"))
    x, v, r = (float(np.real(c)) for c in _split_state(model, state, "state"))
    if not model.stochastic_vol:
        v = model.v0
    if not model.stochastic_rate:
        r = model.r0

    a, c, d = _coefficients(model, u1, u2, u3, tau)
    exponent = a + 1j * u1 * x + c * v + d * r
    if model.family is Family.HHW:
        g1, g2 = sqrt_variance_integrals(model, tau, np.asarray(v), n_points)
        exponent = exponent + _covariance_term(model, u1, u3, g1, g2)
    return complex(np.exp(exponent))


# ---------------------------------------------------------------------------
# Numerical differentiation of the coefficient functions
# ---------------------------------------------------------------------------


def _active_dims(model: ModelSpec) -> tuple[bool, bool, bool]:
    return True, model.stochastic_vol, model.stochastic_rate


def _multi_indices(model: ModelSpec, degree: int) -> list[MultiIndex]:
    active = _active_dims(model)
    indices = []
    for beta in itertools.product(range(degree + 1), repeat=3):
        if 0 < sum(beta) <= degree and all(b == 0 or on for b, on in zip(beta, active, strict=True)):
            indices.append((beta[0], beta[1], beta[2]))
    return indices


def _finite_difference(model: ModelSpec, tau: float, beta: MultiIndex, h: float) -> ComplexArray:
    stencils = [_STENCILS[b] for b in beta]
    offsets = []
    weights = []
    for combo in itertools.product(*stencils):
        offsets.append([step for step, _ in combo])
        weights.append(math.prod(w for _, w in combo))
    points = np.asarray(offsets, dtype=np.float64) * h
    a, c, d = _coefficients(
        model,
        points[:, 0].astype(np.complex128),
        points[:, 1].astype(np.complex128),
        points[:, 2].astype(np.complex128),
        tau,
    )
    values = np.vstack([a, c, d])
    return values @ np.asarray(weights) / h ** sum(beta)


@lru_cache(maxsize=1024)
def _derivative_table(
    model: ModelSpec, tau: float, degree: int
) -> dict[MultiIndex, tuple[complex, complex, complex]]:
    """Derivatives of (A, C, D) at u = 0 for every multi-index up to ``degree``.

    Central differences on the real axis with two Richardson levels.
    """
    zero = np.zeros(1, dtype=np.complex128)
    a0, c0, d0 = _coefficients(model, zero, zero, zero, tau)
    table: dict[MultiIndex, tuple[complex, complex, complex]] = {
        (0, 0, 0): (complex(a0[0]), complex(c0[0]), complex(d0[0]))
    }
    for beta in _multi_indices(model, degree):
        h = FD_STEP if sum(beta) <= 2 else FD_STEP_THIRD
        coarse = _finite_difference(model, tau, beta, h)
        middle = _finite_difference(model, tau, beta, h / 2.0)
        fine = _finite_difference(model, tau, beta, h / 4.0)
        first = (4.0 * middle - coarse) / 3.0
        second = (4.0 * fine - middle) / 3.0
        value = (16.0 * second - first) / 15.0
        table[beta] = (complex(value[0]), complex(value[1]), complex(value[2]))
    return table


def _set_partitions(items: list[int]) -> Iterator[list[list[int]]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for partition in _set_partitions(rest):
        for i in range(len(partition)):
            yield partition[:i] + [[first] + partition[i]] + partition[i + 1 :]
        yield [[first]] + partition


@lru_cache(maxsize=128)
def _bell_terms(alpha: MultiIndex) -> tuple[tuple[MultiIndex, ...], ...]:
    """Set partitions of the derivative positions of ``alpha`` as block multi-indices."""
    positions = [dim for dim, count in enumerate(alpha) for _ in range(count)]
    terms = []
    for partition in _set_partitions(list(range(len(positions)))):
        blocks = []
        for block in partition:
            counts = [0, 0, 0]
            for pos in block:
                counts[positions[pos]] += 1
            blocks.append((counts[0], counts[1], counts[2]))
        terms.append(tuple(blocks))
    return tuple(terms)


# ---------------------------------------------------------------------------
# Moment providers
# ---------------------------------------------------------------------------


class _GenericMoments:
    """Moments E[dx^k v^q r^s D] from derivatives of the log discounted ChF (x_t = 0)."""

    def __init__(
        self,
        model: ModelSpec,
        tau: float,
        v: FloatArray,
        r: FloatArray,
        degree: int,
        n_points: int = DEFAULT_QUADRATURE_POINTS,
        sqrt_table: bool = False,
    ) -> None:
        self.model = model
        self.tau = tau
        self.v = v
        self.r = r
        self.table = _derivative_table(model, tau, degree)
        self._cache: dict[MultiIndex, ComplexArray] = {}
        self._g: tuple[FloatArray, FloatArray] | None = None
        if model.family is Family.HHW:
            self._g = sqrt_variance_integrals(model, tau, v, n_points, interpolate=sqrt_table)
        a0, c0, d0 = self.table[(0, 0, 0)]
        self.bond = np.exp(np.real(a0 + c0 * v + d0 * r))

    def _log_derivative(self, beta: MultiIndex) -> ComplexArray:
        if beta not in self._cache:
            if beta not in self.table:
                raise MomentError(f"Derivative {beta} is outside the available moment degree")
            a, c, d = self.table[beta]
            value = a + c * self.v + d * self.r
            if self._g is not None:
                value = value + _covariance_derivative(self.model, beta, *self._g)
            self._cache[beta] = np.asarray(value, dtype=np.complex128)
        return self._cache[beta]

    def coefficient(self, k: int, q: int, s: int) -> FloatArray:
        alpha = (k, q, s)
        total = np.zeros_like(self.v, dtype=np.complex128)
        for blocks in _bell_terms(alpha):
            term = np.ones_like(total)
            for beta in blocks:
                term = term * self._log_derivative(beta)
            total = total + term
        return np.real(total / 1j ** sum(alpha)) * self.bond


class _HestonClosedMoments:
    """Closed-form Heston moments E[dx^k v^q D] for k + q <= 2 (x_t = 0)."""

    def __init__(self, model: ModelSpec, tau: float, v: FloatArray) -> None:
        self.model = model
        self.tau = tau
        self.v = v

    def coefficient(self, k: int, q: int, s: int) -> FloatArray:
        if s:
            raise MomentError("Heston moments have no rate component")
        return heston_closed_form(self.model, (k, q), self.tau, 0.0, self.v)


def heston_closed_form(
    model: ModelSpec,
    exponents: tuple[int, int],
    tau: float,
    x: npt.ArrayLike,
    v: npt.ArrayLike,
) -> FloatArray:
    """Closed-form discounted Heston moments of total degree <= 2.

    Args:
        model: Heston model
        exponents: (p_x, p_v)
        tau: Interval length
        x: Conditioning log-price(s)
        v: Conditioning variance(s)

    Returns:
        E[x_T^p_x v_T^p_v exp(-r tau) | x, v]

    Raises:
        MomentError: If the family is not Heston or the degree exceeds 2
    """
    if model.family is not Family.HESTON:
        raise MomentError(f"Closed-form moments are available for Heston only, not {model.family.value}")
    if sum(exponents) > 2:
        raise MomentError(f"Closed-form moments cover degree <= 2, got {exponents}")

    kappa, gamma, vbar, rho, rate = model.kappa, model.gamma, model.vbar, model.rho_xv, model.r0
    x_arr = np.asarray(x, dtype=np.float64)
    v_arr = np.asarray(v, dtype=np.float64)
    e = math.exp(-kappa * tau)
    kt = kappa * tau
    bond = math.exp(-rate * tau)

    mean_x = x_arr + (vbar - v_arr) * (1.0 - e) / (2.0 * kappa) + (rate - 0.5 * vbar) * tau
    mean_v = vbar + (v_arr - vbar) * e

    px, pv = exponents
    if (px, pv) == (0, 0):
        value = np.ones(np.broadcast(x_arr, v_arr).shape)
    elif (px, pv) == (1, 0):
        value = mean_x
    elif (px, pv) == (0, 1):
        value = mean_v + 0.0 * x_arr
    elif (px, pv) == (2, 0):
        omega1 = (
            e**2 * gamma**2
            + 4.0 * e * ((1.0 + kt) * gamma**2 - 2.0 * rho * kappa * gamma * (2.0 + kt) + 2.0 * kappa**2)
            + (2.0 * kt - 5.0) * gamma**2
            - 8.0 * rho * kappa * gamma * (kt - 2.0)
            + 8.0 * kappa**2 * (kt - 1.0)
        )
        omega2 = (
            -(e**2) * gamma**2
            + 2.0 * e * (-kt * gamma**2 + 2.0 * rho * kappa * gamma * (1.0 + kt) - 2.0 * kappa**2)
            + gamma**2
            - 4.0 * kappa * rho * gamma
            + 4.0 * kappa**2
        )
        value = mean_x**2 + vbar * omega1 / (8.0 * kappa**3) + v_arr * omega2 / (4.0 * kappa**3)
    elif (px, pv) == (1, 1):
        # gamma^2 * Omega3 and gamma^2 * Omega4, written without 1/gamma
        omega3 = gamma**2 * (e**2 + 2.0 * kt * e - 1.0) + 4.0 * kappa * rho * gamma * (1.0 - e - kt * e)
        omega4 = gamma**2 * (e - kt * e - e**2) + 2.0 * rho * kappa**2 * tau * e * gamma
        value = (
            mean_v * mean_x
            + vbar * omega3 / (4.0 * kappa**2)
            + v_arr * omega4 / (2.0 * kappa**2)
        )
    else:
        variance = v_arr * gamma**2 * (e - e**2) / kappa + vbar * gamma**2 * (1.0 - e) ** 2 / (
            2.0 * kappa
        )
        value = variance + mean_v**2 + 0.0 * x_arr
    return np.asarray(value * bond, dtype=np.float64)


# ---------------------------------------------------------------------------
# Public moment API
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentExpansion:
    """Discounted moment as a polynomial in the conditioning log-price.

    E[x_T^p v_T^q r_T^s D | X_t] = sum_j C(p, j) x_t^j a_{p-j}, where
    ``coefficients[k]`` holds a_k = E[(x_T - x_t)^k v_T^q r_T^s D | v_t, r_t].
    """

    power: int
    coefficients: tuple[FloatArray, ...]

    def value(self, x: npt.ArrayLike) -> FloatArray:
        x_arr = np.asarray(x, dtype=np.float64)
        p = self.power
        return sum(
            (math.comb(p, j) * x_arr**j * self.coefficients[p - j] for j in range(p + 1)),
            start=np.zeros(np.broadcast(x_arr, self.coefficients[0]).shape),
        )

    def dx(self, x: npt.ArrayLike) -> FloatArray:
        x_arr = np.asarray(x, dtype=np.float64)
        p = self.power
        return sum(
            (j * math.comb(p, j) * x_arr ** (j - 1) * self.coefficients[p - j] for j in range(1, p + 1)),
            start=np.zeros(np.broadcast(x_arr, self.coefficients[0]).shape),
        )

    def dxx(self, x: npt.ArrayLike) -> FloatArray:
        x_arr = np.asarray(x, dtype=np.float64)
        p = self.power
        return sum(
            (
                j * (j - 1) * math.comb(p, j) * x_arr ** (j - 2) * self.coefficients[p - j]
                for j in range(2, p + 1)
            ),
            start=np.zeros(np.broadcast(x_arr, self.coefficients[0]).shape),
        )


def _full_exponents(model: ModelSpec, exponents: Sequence[int]) -> MultiIndex:
    if len(exponents) != model.n_dims:
        raise MomentError(
            f"Exponents {tuple(exponents)} do not match factors {', '.join(model.factors)}"
        )
    if any(int(e) != e or e < 0 for e in exponents):
        raise MomentError(f"Exponents must be non-negative integers, got {tuple(exponents)}")
    slots = dict(zip(model.factors, (int(e) for e in exponents), strict=True))
    full = (slots.get("x", 0), slots.get("v", 0), slots.get("r", 0))
    if sum(full) > model.max_moment_degree:
        raise MomentError(
            f"Moment degree {sum(full)} exceeds the cap {model.max_moment_degree} "
            f"for {model.family.value}"
        )
    return full


def _resolve_backend(model: ModelSpec, degree: int, backend: Backend | str) -> Backend:
    backend = Backend(backend)
    closed_ok = model.family is Family.HESTON and degree <= 2
    if backend is Backend.AUTO:
        return Backend.CLOSED if closed_ok else Backend.GENERIC
    if backend is Backend.CLOSED and not closed_ok:
        raise MomentError(
            f"Closed-form moments unavailable for {model.family.value} at degree {degree}"
        )
    return backend


def _state_arrays(
    model: ModelSpec, v: npt.ArrayLike | None, r: npt.ArrayLike | None
) -> tuple[FloatArray, FloatArray]:
    v_arr = np.asarray(model.v0 if v is None or not model.stochastic_vol else v, dtype=np.float64)
    r_arr = np.asarray(model.r0 if r is None or not model.stochastic_rate else r, dtype=np.float64)
    v_arr, r_arr = np.broadcast_arrays(v_arr, r_arr)
    return np.array(v_arr, dtype=np.float64), np.array(r_arr, dtype=np.float64)


class MomentEvaluator:
    """Discounted moments for one interval and one cloud of conditioning states.

    Derivative tables and per-path quadratures are shared across all monomials
    requested from the same evaluator. ``sqrt_table`` switches the HHW G1/G2
    quadratures to the interpolated table.
    """

    def __init__(
        self,
        model: ModelSpec,
        tau: float,
        v: npt.ArrayLike | None = None,
        r: npt.ArrayLike | None = None,
        degree: int = 2,
        backend: Backend | str = Backend.AUTO,
        sqrt_table: bool = False,
    ) -> None:
        if tau < 0:
            raise MomentError(f"Interval length must be non-negative, got {tau}")
        if degree > model.max_moment_degree:
            raise MomentError(
                f"Moment degree {degree} exceeds the cap {model.max_moment_degree} "
                f"for {model.family.value}"
            )
        self.model = model
        self.tau = tau
        self.backend = _resolve_backend(model, degree, backend)
        self.v, self.r = _state_arrays(model, v, r)
        self._provider: _GenericMoments | _HestonClosedMoments
        if self.backend is Backend.CLOSED:
            self._provider = _HestonClosedMoments(model, tau, self.v)
        else:
            self._provider = _GenericMoments(
                model, tau, self.v, self.r, max(degree, 1), sqrt_table=sqrt_table
            )

    def expansion(self, exponents: Sequence[int]) -> MomentExpansion:
        p, q, s = _full_exponents(self.model, exponents)
        coefficients = tuple(self._provider.coefficient(k, q, s) for k in range(p + 1))
        return MomentExpansion(p, coefficients)


def moment_x_expansion(
    model: ModelSpec,
    exponents: Sequence[int],
    tau: float,
    v_t: npt.ArrayLike | None = None,
    r_t: npt.ArrayLike | None = None,
    backend: Backend | str = Backend.AUTO,
) -> MomentExpansion:
    """Discounted moment of a monomial as a polynomial in x_t.

    Args:
        model: Model specification
        exponents: Monomial exponents in factor order
        tau: Interval length
        v_t: Conditioning variance(s)
        r_t: Conditioning short rate(s)
        backend: Moment backend

    Returns:
        MomentExpansion whose value reproduces ``discounted_moment``

    Raises:
        MomentError: If the degree exceeds the model cap or tau is negative
    """
    degree = sum(_full_exponents(model, exponents))
    evaluator = MomentEvaluator(model, tau, v_t, r_t, degree=max(degree, 1), backend=backend)
    return evaluator.expansion(exponents)


def discounted_moment(
    model: ModelSpec, request: MomentRequest, backend: Backend | str = Backend.AUTO
) -> FloatArray:
    """E[x^p_x v^p_v r^p_r D(t_m, t_m+1) | X_m] for the requested monomial.

    Args:
        model: Model specification
        request: Monomial, interval and conditioning state
        backend: ``closed`` (Heston, degree <= 2), ``generic`` or ``auto``

    Returns:
        Array of discounted moments, one per conditioning state

    Raises:
        MomentError: If the degree exceeds the cap or the backend is unavailable
    """
    full = _full_exponents(model, request.exponents)
    if request.tau < 0:
        raise MomentError(f"Interval length must be non-negative, got {request.tau}")
    resolved = _resolve_backend(model, max(sum(full), 1), backend)
    if resolved is Backend.CLOSED:
        v_arr, _ = _state_arrays(model, request.v, request.r)
        value = heston_closed_form(model, (full[0], full[1]), request.tau, request.x, v_arr)
    else:
        expansion = moment_x_expansion(
            model, request.exponents, request.tau, request.v, request.r, Backend.GENERIC
        )
        value = expansion.value(request.x)
    return np.atleast_1d(np.asarray(value, dtype=np.float64))


def validate_backends(
    model: ModelSpec,
    taus: Sequence[float],
    variances: Sequence[float],
    x: float | None = None,
    tolerance: float = BACKEND_TOLERANCE,
    strict: bool = False,
) -> pd.DataFrame:
    """Compare closed-form and generic Heston moments on a (tau, v) grid.

    Args:
        model: Heston model
        taus: Interval lengths
        variances: Conditioning variances
        x: Conditioning log-price (defaults to log S0)
        tolerance: Relative tolerance for agreement
        strict: Raise when any comparison exceeds the tolerance

    Returns:
        DataFrame with columns tau, v, exponents, closed, generic, rel_diff, ok

    Raises:
        MomentError: If ``strict`` and the backends disagree
    """
    x_value = model.x0 if x is None else x
    exponent_set = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    rows = []
    for tau in taus:
        v_arr = np.asarray(variances, dtype=np.float64)
        generic = MomentEvaluator(model, tau, v_arr, degree=2, backend=Backend.GENERIC)
        for exponents in exponent_set:
            closed = heston_closed_form(model, exponents, tau, x_value, v_arr)
            numeric = generic.expansion(exponents).value(x_value)
            rel = np.abs(closed - numeric) / np.maximum(np.abs(closed), 1e-300)
            for v_value, c_val, n_val, r_val in zip(v_arr, closed, numeric, rel, strict=True):
                rows.append(
                    {
                        "tau": tau,
                        "v": float(v_value),
                        "exponents": f"{exponents[0]}{exponents[1]}",
                        "closed": float(c_val),
                        "generic": float(n_val),
                        "rel_diff": float(r_val),
                        "ok": bool(r_val <= tolerance),
                    }
                )
    frame = pd.DataFrame(rows)
    worst = float(frame["rel_diff"].max()) if not frame.empty else 0.0
    logger.info(f"Moment backend comparison: {len(frame)} values, worst relative gap {worst:.3e}")
    if strict and worst > tolerance:
        raise MomentError(
            f"Closed-form and generic moments disagree: worst relative gap {worst:.3e} "
            f"exceeds {tolerance:.1e}"
        )
    return frame
