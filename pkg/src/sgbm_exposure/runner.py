"""Batch orchestration and the result store."""

import dataclasses
import json
import math
import os
import tempfile
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from sgbm_exposure.bundling import dump_assignment
from sgbm_exposure.config import RunConfig
from sgbm_exposure.credit import implied_vol_table, mc_european_oracle
from sgbm_exposure.engine import (
    REPORT_COLUMNS,
    Estimator,
    ExposureReport,
    backward_sweep,
    path_estimator,
    relative_l2,
)
from sgbm_exposure.exceptions import ConfigurationError, ReportError
from sgbm_exposure.logger import set_package_level, setup_logger
from sgbm_exposure.models import ContractKind, Family, preset, preset_names
from sgbm_exposure.moments import MomentRequest, discounted_moment, validate_backends
from sgbm_exposure.paths import PathGrid, export_paths, sample_moment, sample_moment_error, simulate
from sgbm_exposure.regression import (
    convergence_slope,
    enumerate_basis,
    projection_error_probe,
)

logger = setup_logger(__name__)

SUMMARY_FILE = "summary.json"
SUMMARY_STATISTICS = ("V0", "CVA", "DeltaEE0", "GammaEE0")
COMPARED_QUANTITIES = ("EE", "PFE", "DeltaEE", "GammaEE")
PROBE_STANDARD_ERRORS = 3.0
PROBE_RELATIVE_SLACK = 1e-6


def _atomic_write(path: Path, write: Callable[[Path], None]) -> Path:
    """Write through a temporary file in the target directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    return _atomic_write(path, lambda tmp: frame.to_csv(tmp, index=False))


def write_json(data: dict[str, Any], path: Path) -> Path:
    def dump(tmp: Path) -> None:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, default=str)
            f.write("\n")

    return _atomic_write(path, dump)


@dataclass
class SeedOutcome:
    """Reports and artifacts of one seed."""

    seed: int
    reports: dict[Estimator, ExposureReport]
    files: list[Path] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)


@dataclass
class RunOutcome:
    """Result of a batch run.

    Attributes:
        summary: Aggregated summary document
        summary_path: Location of summary.json
        seeds: Per-seed outcomes in configuration order
        failures: Failed validation checks; a non-empty list fails the run
    """

    summary: dict[str, Any]
    summary_path: Path
    seeds: list[SeedOutcome]
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _simulate(config: RunConfig, seed: int) -> PathGrid:
    return simulate(
        config.model,
        config.grid,
        config.simulation.paths,
        seed,
        track_minimum=config.contract.kind is ContractKind.BARRIER,
        workers=config.simulation.workers,
    )


def moment_probe(paths: PathGrid, config: RunConfig, m: int = 1) -> pd.DataFrame:
    """Compare analytic discounted moments from t_0 with sample moments at date m.

    Returns:
        DataFrame with columns date, exponents, analytic, sample, stderr, ok
    """
    model = config.model
    basis = enumerate_basis(model.n_dims, min(config.regression.order, 2))
    tau = paths.grid.dates[m]
    rows = []
    for exponents in basis.exponents:
        request = MomentRequest(exponents, tau, x=model.x0)
        analytic = float(discounted_moment(model, request, config.regression.moment_backend)[0])
        sample = sample_moment(paths, m, exponents, discounted=True)
        stderr = sample_moment_error(paths, m, exponents, discounted=True)
        limit = PROBE_STANDARD_ERRORS * stderr + PROBE_RELATIVE_SLACK * abs(analytic)
        rows.append(
            {
                "date": m,
                "exponents": "".join(str(e) for e in exponents),
                "analytic": analytic,
                "sample": sample,
                "stderr": stderr,
                "ok": abs(analytic - sample) <= limit,
            }
        )
    return pd.DataFrame(rows)


def backend_check(config: RunConfig) -> pd.DataFrame | None:
    """Closed-form against generic Heston moments on a 10 x 10 (tau, v) grid.

    Returns:
        Comparison table, or None for families without the closed form
    """
    model = config.model
    if model.family is not Family.HESTON:
        logger.warning(f"Moment backend check covers Heston only, skipped for {model.family.value}")
        return None
    level = max(model.v0, model.vbar)
    taus = np.linspace(config.grid.tenor / 10.0, config.grid.tenor, 10)
    variances = np.linspace(0.1, 3.0, 10) * level
    return validate_backends(model, taus.tolist(), variances.tolist())


def run_seed(config: RunConfig, seed: int) -> SeedOutcome:
    """Simulate, sweep and report one seed, writing its artifacts."""
    out = config.output_dir
    checks = config.validation
    paths = _simulate(config, seed)
    sweep = backward_sweep(paths, config.contract, config.sweep_config(checks.dump_bundles))

    reports: dict[Estimator, ExposureReport] = {}
    if Estimator.DIRECT in config.estimator_set:
        reports[Estimator.DIRECT] = sweep.report.with_cva(config.credit)
    if Estimator.PATH in config.estimator_set:
        fresh = path_estimator(sweep, workers=config.simulation.workers)
        reports[Estimator.PATH] = fresh.with_cva(config.credit)

    outcome = SeedOutcome(seed=seed, reports=reports)
    for estimator, report in reports.items():
        target = out / f"exposure_{estimator.value}_seed{seed}.csv"
        outcome.files.append(write_csv(report.to_frame(), target))

    if checks.moment_probe:
        probe = moment_probe(paths, config)
        outcome.files.append(write_csv(probe, out / f"moment_probe_seed{seed}.csv"))
        failed = probe.loc[~probe["ok"], "exponents"].tolist()
        if failed:
            outcome.failures.append(f"seed {seed}: moment probe failed for exponents {failed}")
    if checks.dump_bundles:
        outcome.files.append(dump_assignment(list(sweep.assignments), out / f"bundles_seed{seed}.csv"))
        outcome.files.append(sweep.coefficients.save(out / f"coefficients_seed{seed}.npz"))
    if checks.dump_paths:
        outcome.files.append(export_paths(paths, out / f"paths_seed{seed}.csv"))

    summary = {
        "seed": seed,
        "feller_satisfied": config.model.feller_satisfied,
        "reports": {e.value: r.summary() for e, r in reports.items()},
        "config": config.to_dict(),
    }
    outcome.files.append(write_json(summary, out / f"summary_seed{seed}.json"))
    return outcome


def aggregate(outcomes: Sequence[SeedOutcome]) -> dict[str, dict[str, dict[str, Any]]]:
    """Mean and sample standard deviation of the headline numbers per estimator."""
    table: dict[str, dict[str, dict[str, Any]]] = {}
    estimators = [e for e in Estimator if outcomes and e in outcomes[0].reports]
    for estimator in estimators:
        stats: dict[str, dict[str, Any]] = {}
        for key in SUMMARY_STATISTICS:
            values = [o.reports[estimator].summary()[key] for o in outcomes]
            finite = [float(v) for v in values if v is not None and math.isfinite(v)]
            mean: float | None = None
            std: float | None = None
            if finite:
                mean = float(np.mean(finite))
                std = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
            stats[key] = {"mean": mean, "std": std, "values": values}
        table[estimator.value] = stats
    return table


def run(config: RunConfig) -> RunOutcome:
    """Run every seed of a configuration and write the result bundle.

    Raises:
        ConfigurationError: If the configuration is invalid
    """
    set_package_level(config.log_level, config.log_file)
    config.validate()
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(config.simulation.seeds)
    logger.info(
        f"Run: {config.model.family.value} {config.contract.kind.value}, "
        f"N={config.simulation.paths}, seeds={seeds}, output={out}"
    )
    if not config.model.feller_satisfied and config.model.stochastic_vol:
        logger.info("Feller condition not satisfied")

    failures: list[str] = []
    validation: dict[str, Any] = {}
    if config.validation.backend_check:
        table = backend_check(config)
        if table is not None:
            write_csv(table, out / "moment_backends.csv")
            bad = int((~table["ok"]).sum())
            validation["backend_check"] = {"comparisons": len(table), "failed": bad}
            if bad:
                failures.append(f"moment backends disagree on {bad} of {len(table)} comparisons")

    with ThreadPoolExecutor(max_workers=len(seeds)) as pool:
        outcomes = list(pool.map(lambda s: run_seed(config, s), seeds))
    for outcome in outcomes:
        failures.extend(outcome.failures)

    summary = {
        "config": config.to_dict(),
        "seeds": seeds,
        "estimators": aggregate(outcomes),
        "validation": validation,
        "failures": failures,
    }
    summary_path = write_json(summary, out / SUMMARY_FILE)
    for name, stats in summary["estimators"].items():
        v0 = stats["V0"]
        logger.info(f"{name}: V0 mean={v0['mean']}, std={v0['std']}")
    if failures:
        logger.error(f"{len(failures)} validation check(s) failed")
    return RunOutcome(summary=summary, summary_path=summary_path, seeds=outcomes, failures=failures)


def read_report(path: str | Path) -> pd.DataFrame:
    """Load an exposure report CSV.

    Raises:
        ReportError: If the file is unreadable or lacks report columns
    """
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ReportError(f"Cannot read report {path}: {e}") from e
    missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
    if missing:
        raise ReportError(f"Report {path} lacks columns: {', '.join(missing)}")
    return frame


def compare(report_a: pd.DataFrame, report_b: pd.DataFrame) -> dict[str, float]:
    """Relative L2 distance of report_b from report_a for EE, PFE, DeltaEE and GammaEE.

    Raises:
        ReportError: If the two reports use different date grids
    """
    times_a = report_a["t"].to_numpy(float)
    times_b = report_b["t"].to_numpy(float)
    if times_a.shape != times_b.shape or not np.allclose(times_a, times_b, rtol=1e-12, atol=0.0):
        raise ReportError("Reports use different monitoring grids")
    return {q: relative_l2(report_a[q], report_b[q]) for q in COMPARED_QUANTITIES}


def dump_bundles(config: RunConfig, seed: int | None = None) -> list[Path]:
    """Write the bundle assignment and coefficient table of one seed."""
    set_package_level(config.log_level, config.log_file)
    config.validate()
    seed = config.simulation.seeds[0] if seed is None else seed
    paths = _simulate(config, seed)
    sweep = backward_sweep(paths, config.contract, config.sweep_config(keep_bundles=True))
    out = config.output_dir
    return [
        dump_assignment(list(sweep.assignments), out / f"bundles_seed{seed}.csv"),
        sweep.coefficients.save(out / f"coefficients_seed{seed}.npz"),
    ]


def validate_moments(
    config: RunConfig, projection_orders: Sequence[int] = (1, 2)
) -> tuple[list[Path], list[str]]:
    """Backend cross-check, moment probe on the first seed and the projection-error probe.

    Returns:
        Tuple of (written files, failure messages)
    """
    set_package_level(config.log_level, config.log_file)
    config.validate()
    out = config.output_dir
    files: list[Path] = []
    failures: list[str] = []

    table = backend_check(config)
    if table is not None:
        files.append(write_csv(table, out / "moment_backends.csv"))
        bad = int((~table["ok"]).sum())
        if bad:
            failures.append(f"moment backends disagree on {bad} of {len(table)} comparisons")

    seed = config.simulation.seeds[0]
    probe = moment_probe(_simulate(config, seed), config)
    files.append(write_csv(probe, out / f"moment_probe_seed{seed}.csv"))
    failed = probe.loc[~probe["ok"], "exponents"].tolist()
    if failed:
        failures.append(f"moment probe failed for exponents {failed}")

    frames = []
    for p in projection_orders:
        errors = projection_error_probe(np.sin, (0.0, 2.0 * math.pi), p, [2, 4, 8, 16, 32, 64])
        slope = convergence_slope(errors)
        logger.info(f"Projection probe p={p}: slope {slope:.3f} (expected {-(p + 1)})")
        frames.append(errors.assign(p=p, slope=slope))
    files.append(write_csv(pd.concat(frames, ignore_index=True), out / "projection_probe.csv"))
    return files, failures


def implied_vols(config: RunConfig, strikes: Sequence[float], seed: int | None = None) -> pd.DataFrame:
    """SGBM and Monte Carlo implied volatilities across a strike strip.

    Returns:
        DataFrame with columns strike, sgbm_price, sgbm_vol, mc_price, mc_stderr,
        mc_vol, vol_gap

    Raises:
        ConfigurationError: If the contract is not European
    """
    set_package_level(config.log_level, config.log_file)
    config.validate()
    contract = config.contract
    if contract.kind is not ContractKind.EUROPEAN:
        raise ConfigurationError(
            f"Implied volatilities need a European contract, got {contract.kind.value}"
        )
    seed = config.simulation.seeds[0] if seed is None else seed
    model, grid = config.model, config.grid
    paths = _simulate(config, seed)
    sweep_config = config.sweep_config()

    sgbm_prices, mc_prices, mc_errors = [], [], []
    for strike in strikes:
        struck = dataclasses.replace(contract, strike=float(strike))
        sgbm_prices.append(backward_sweep(paths, struck, sweep_config).report.value)
        price, stderr = mc_european_oracle(
            model, struck, grid, config.simulation.paths, seed, config.simulation.workers
        )
        mc_prices.append(price)
        mc_errors.append(stderr)
        logger.info(f"K={strike}: SGBM {sgbm_prices[-1]:.6f}, MC {price:.6f} ({stderr:.2e})")

    bond = model.zero_coupon_bond(contract.tenor)
    sgbm = implied_vol_table(strikes, sgbm_prices, model.s0, contract.tenor, bond, contract.omega)
    mc = implied_vol_table(strikes, mc_prices, model.s0, contract.tenor, bond, contract.omega)
    table = pd.DataFrame(
        {
            "strike": [float(k) for k in strikes],
            "sgbm_price": sgbm_prices,
            "sgbm_vol": sgbm["implied_vol"],
            "mc_price": mc_prices,
            "mc_stderr": mc_errors,
            "mc_vol": mc["implied_vol"],
        }
    )
    table["vol_gap"] = (table["sgbm_vol"] - table["mc_vol"]).abs()
    write_csv(table, config.output_dir / "implied_vols.csv")
    return table


def preset_table() -> pd.DataFrame:
    """One row per preset: name, family, contract kind, tenor and monitoring dates."""
    rows = []
    for name in preset_names():
        model, contract, grid = preset(name)
        rows.append(
            {
                "name": name,
                "family": model.family.value,
                "contract": contract.kind.value,
                "tenor": contract.tenor,
                "dates": grid.M,
                "feller": model.feller_satisfied if model.stochastic_vol else None,
            }
        )
    return pd.DataFrame(rows)
