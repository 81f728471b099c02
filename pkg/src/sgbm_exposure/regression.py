"""Monomial bases, per-bundle least squares and coefficient tables."""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd
from numpy.polynomial import legendre

from sgbm_exposure.exceptions import GreeksUnavailableError, RegressionError
from sgbm_exposure.logger import setup_logger
from sgbm_exposure.models import ModelSpec
from sgbm_exposure.moments import Backend, MomentEvaluator

logger = setup_logger(__name__)

FloatArray = npt.NDArray[np.float64]

# Three-factor order-2 basis in (x, v, r) exponents, in the published table order
_HHW_ORDER_TWO: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0),
    (1, 0, 0),
    (2, 0, 0),
    (0, 1, 0),
    (0, 2, 0),
    (0, 0, 1),
    (0, 0, 2),
    (1, 1, 0),
    (1, 0, 1),
    (0, 1, 1),
)

_PROBE_QUADRATURE = 32


@dataclass(frozen=True)
class BasisSpec:
    """Monomial basis psi_k(X) = prod X_d ** e_kd over the model factors.

    Attributes:
        n: Number of state dimensions
        p: Polynomial order
        exponents: Exponent tuple per basis function, constant first
    """

    n: int
    p: int
    exponents: tuple[tuple[int, ...], ...]

    @property
    def size(self) -> int:
        """Number of basis functions H."""
        return len(self.exponents)

    @property
    def max_degree(self) -> int:
        return max((sum(e) for e in self.exponents), default=0)

    def labels(self, factors: Sequence[str]) -> list[str]:
        """Human-readable monomial names, e.g. ``["1", "x", "v", "x^2", "x*v", "v^2"]``."""
        names = []
        for exps in self.exponents:
            parts = [f if e == 1 else f"{f}^{e}" for f, e in zip(factors, exps, strict=True) if e]
            names.append("*".join(parts) if parts else "1")
        return names


def enumerate_basis(n: int, p: int) -> BasisSpec:
    """Build the graded monomial basis for ``n`` factors up to order ``p``.

    Args:
        n: Number of state dimensions (1, 2 or 3)
        p: Polynomial order (0..3, at most 2 when n = 3)

    Returns:
        BasisSpec with H = (n + p)! / (n! p!) monomials

    Raises:
        RegressionError: If (n, p) is unsupported
    """
    if n not in (1, 2, 3) or not 0 <= p <= 3 or (n == 3 and p > 2):
        raise RegressionError(f"Unsupported basis: n={n}, p={p}")

    exponents: list[tuple[int, ...]]
    if n == 3:
        exponents = [e for e in _HHW_ORDER_TWO if sum(e) <= p]
    elif n == 2:
        exponents = [(degree - j, j) for degree in range(p + 1) for j in range(degree + 1)]
    else:
        exponents = [(degree,) for degree in range(p + 1)]

    return BasisSpec(n=n, p=p, exponents=tuple(exponents))


def basis_values(basis: BasisSpec, columns: npt.ArrayLike) -> FloatArray:
    """Evaluate every monomial on an (N, n) matrix of states.

    Raises:
        RegressionError: If the column count differs from the basis dimension
    """
    data = np.atleast_2d(np.asarray(columns, dtype=np.float64))
    if data.shape[1] != basis.n:
        raise RegressionError(f"Expected {basis.n} state columns, got {data.shape[1]}")
    out = np.empty((data.shape[0], basis.size))
    for k, exps in enumerate(basis.exponents):
        out[:, k] = np.prod(data**np.asarray(exps), axis=1)
    return out


class MomentBasis:
    """Discounted moments phi_k = E[psi_k(X_{m+1}) D | X_m] and their x-derivatives."""

    def __init__(
        self,
        model: ModelSpec,
        basis: BasisSpec,
        backend: Backend | str = Backend.AUTO,
        sqrt_table: bool = False,
    ) -> None:
        if basis.n != model.n_dims:
            raise RegressionError(
                f"Basis dimension {basis.n} does not match the {model.n_dims} model factors"
            )
        if basis.max_degree > model.max_moment_degree:
            raise RegressionError(
                f"Basis order {basis.p} needs moments above the {model.family.value} cap "
                f"of {model.max_moment_degree}"
            )
        self.model = model
        self.basis = basis
        self.backend = Backend(backend)
        self.sqrt_table = sqrt_table

    def evaluate(
        self,
        tau: float,
        x: npt.ArrayLike,
        v: npt.ArrayLike | None = None,
        r: npt.ArrayLike | None = None,
    ) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Return (phi, dphi/dx, d2phi/dx2), each of shape (N, H)."""
        x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
        evaluator = MomentEvaluator(
            self.model,
            tau,
            v,
            r,
            degree=max(self.basis.max_degree, 1),
            backend=self.backend,
            sqrt_table=self.sqrt_table,
        )
        phi = np.empty((x_arr.size, self.basis.size))
        dphi = np.empty_like(phi)
        d2phi = np.empty_like(phi)
        for k, exps in enumerate(self.basis.exponents):
            expansion = evaluator.expansion(exps)
            phi[:, k] = np.broadcast_to(expansion.value(x_arr), x_arr.shape)
            dphi[:, k] = np.broadcast_to(expansion.dx(x_arr), x_arr.shape)
            d2phi[:, k] = np.broadcast_to(expansion.dxx(x_arr), x_arr.shape)
        return phi, dphi, d2phi


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of one per-bundle least-squares solve."""

    coefficients: FloatArray
    rank: int
    rank_deficient: bool
    condition: float
    residual_norm: float


def fit_bundle(targets: npt.ArrayLike, regressors: npt.ArrayLike) -> FitResult:
    """Least-squares coefficients of ``targets`` on the columns of ``regressors``.

    Non-constant columns are centred and scaled before an SVD-based solve and the
    coefficients are mapped back to the raw monomials. Column 0 is taken as the
    constant basis function; other columns without spread are dropped (their
    coefficients are zero) and the solve is flagged rank-deficient.

    Args:
        targets: Option values at the regression date, shape (n,)
        regressors: Monomial values at the regression date, shape (n, H)

    Returns:
        FitResult with the coefficient vector and conditioning diagnostics

    Raises:
        RegressionError: If shapes disagree or the system is empty
    """
    y = np.asarray(targets, dtype=np.float64)
    design = np.atleast_2d(np.asarray(regressors, dtype=np.float64))
    if design.shape[0] != y.shape[0]:
        raise RegressionError(
            f"Target count {y.shape[0]} does not match regressor rows {design.shape[0]}"
        )
    if y.size == 0:
        raise RegressionError("Cannot fit an empty bundle")

    n_cols = design.shape[1]
    mean = design.mean(axis=0)
    spread = design.std(axis=0)
    scale = np.maximum(np.abs(mean), 1.0)
    varying = spread > 1e-13 * scale
    if varying[0] or mean[0] == 0:
        raise RegressionError("Regressor column 0 must be the constant basis function")

    columns = np.flatnonzero(varying)
    standardized = np.hstack(
        [np.ones((y.size, 1)), (design[:, columns] - mean[columns]) / spread[columns]]
    )

    solution, _, rank, singular = np.linalg.lstsq(standardized, y, rcond=None)
    condition = float(singular[0] / singular[-1]) if singular.size and singular[-1] > 0 else math.inf

    coefficients = np.zeros(n_cols)
    slopes = solution[1:]
    coefficients[columns] = slopes / spread[columns]
    coefficients[0] = (solution[0] - np.sum(slopes * mean[columns] / spread[columns])) / mean[0]

    dropped = n_cols - 1 - columns.size
    rank_deficient = bool(rank < standardized.shape[1] or dropped > 0)
    residual = y - design @ coefficients
    return FitResult(
        coefficients=coefficients,
        rank=int(rank),
        rank_deficient=rank_deficient,
        condition=condition,
        residual_norm=float(np.linalg.norm(residual)),
    )


@dataclass
class CoefficientTable:
    """Per-date, per-bundle regression coefficients beta(k, B_{m,j}).

    Rows for bundles that fell back to a pooled fit hold the pooled
    coefficients, so every bundle id of a date has a usable vector.
    """

    basis: BasisSpec
    coefficients: dict[int, FloatArray] = field(default_factory=dict)
    fallback: dict[int, npt.NDArray[np.bool_]] = field(default_factory=dict)
    rank_deficient: dict[int, int] = field(default_factory=dict)

    def store(
        self,
        m: int,
        coefficients: FloatArray,
        fallback: npt.NDArray[np.bool_] | None = None,
        rank_deficient: int = 0,
    ) -> None:
        """Record the coefficient rows for date ``m``; rows are write-once."""
        if m in self.coefficients:
            raise RegressionError(f"Coefficients for date index {m} already stored")
        rows = np.asarray(coefficients, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.basis.size:
            raise RegressionError(
                f"Coefficient rows must have shape (J, {self.basis.size}), got {rows.shape}"
            )
        if not np.all(np.isfinite(rows)):
            raise RegressionError(f"Non-finite coefficients at date index {m}")
        rows.setflags(write=False)
        self.coefficients[m] = rows
        self.fallback[m] = (
            np.zeros(rows.shape[0], dtype=bool) if fallback is None else np.asarray(fallback)
        )
        self.rank_deficient[m] = rank_deficient

    def rows(self, m: int) -> FloatArray:
        try:
            return self.coefficients[m]
        except KeyError as e:
            raise RegressionError(f"No coefficients stored for date index {m}") from e

    @property
    def dates(self) -> list[int]:
        return sorted(self.coefficients)

    def save(self, path: str | Path) -> Path:
        """Write all coefficient rows to an ``.npz`` sidecar."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        arrays: dict[str, npt.NDArray[np.generic]] = {
            "basis_n": np.asarray(self.basis.n),
            "basis_p": np.asarray(self.basis.p),
            "basis_exponents": np.asarray(self.basis.exponents, dtype=np.int64),
        }
        for m in self.dates:
            arrays[f"beta_{m}"] = self.coefficients[m]
            arrays[f"fallback_{m}"] = self.fallback[m]
            arrays[f"rank_deficient_{m}"] = np.asarray(self.rank_deficient[m])
        with target.open("wb") as fh:
            np.savez_compressed(fh, **arrays)
        return target

    @classmethod
    def load(cls, path: str | Path) -> "CoefficientTable":
        try:
            with np.load(Path(path)) as data:
                basis = BasisSpec(
                    n=int(data["basis_n"]),
                    p=int(data["basis_p"]),
                    exponents=tuple(tuple(int(e) for e in row) for row in data["basis_exponents"]),
                )
                table = cls(basis=basis)
                for key in sorted(k for k in data.files if k.startswith("beta_")):
                    m = int(key.removeprefix("beta_"))
                    table.store(
                        m,
                        data[key],
                        data[f"fallback_{m}"],
                        int(data[f"rank_deficient_{m}"]),
                    )
        except (OSError, KeyError, ValueError) as e:
            raise RegressionError(f"Cannot read coefficient table {path}: {e}") from e
        return table


def require_greeks_basis(basis: BasisSpec) -> None:
    """Raise if the basis cannot carry exposure sensitivities.

    Raises:
        GreeksUnavailableError: If p = 0 (no x-dependence of the continuation)
    """
    if basis.p == 0:
        raise GreeksUnavailableError(
            "Greeks are unavailable for an order-0 basis: the continuation value is flat in x"
        )


def projection_error_probe(
    f: Callable[[FloatArray], FloatArray],
    interval: tuple[float, float],
    p: int,
    subintervals: Sequence[int],
) -> pd.DataFrame:
    """L2 error of the piecewise order-``p`` projection of ``f`` over equal subintervals.

    Args:
        f: Vectorized scalar test function
        interval: Domain (a, b)
        p: Polynomial order on each subinterval
        subintervals: Subinterval counts J, each a power of two

    Returns:
        DataFrame with columns J and error

    Raises:
        RegressionError: If a count is not a power of two or the interval is empty
    """
    a, b = interval
    if not b > a:
        raise RegressionError(f"Empty interval ({a}, {b})")
    nodes, weights = legendre.leggauss(max(_PROBE_QUADRATURE, p + 1))
    # Legendre polynomials P_0..P_p at the quadrature nodes
    polys = np.stack([legendre.legval(nodes, np.eye(p + 1)[k]) for k in range(p + 1)])
    norms = (2.0 * np.arange(p + 1) + 1.0) / 2.0

    rows = []
    for count in subintervals:
        if count < 1 or count & (count - 1):
            raise RegressionError(f"Subinterval count must be a power of two, got {count}")
        edges = np.linspace(a, b, count + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        centers = 0.5 * (edges[1:] + edges[:-1])
        points = centers[:, None] + half[:, None] * nodes[None, :]
        values = np.asarray(f(points), dtype=np.float64)
        coeffs = norms[None, :] * ((values * weights[None, :]) @ polys.T)
        projected = coeffs @ polys
        squared = np.sum(half * ((values - projected) ** 2 @ weights))
        rows.append({"J": count, "error": float(np.sqrt(squared))})
    return pd.DataFrame(rows)


def convergence_slope(table: pd.DataFrame) -> float:
    """Least-squares slope of log2(error) against log2(J)."""
    slope, _ = np.polyfit(np.log2(table["J"].to_numpy(float)), np.log2(table["error"].to_numpy()), 1)
    return float(slope)
