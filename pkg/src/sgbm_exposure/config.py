"""Run configuration for SGBM Exposure."""

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv

from sgbm_exposure.bundling import BundleMethod
from sgbm_exposure.credit import CreditSpec
from sgbm_exposure.engine import Estimator, SweepConfig
from sgbm_exposure.exceptions import (
    ConfigurationError,
    CreditError,
    EstimatorError,
    ModelError,
)
from sgbm_exposure.logger import LOG_LEVELS
from sgbm_exposure.models import (
    ContractKind,
    ContractSpec,
    Family,
    ModelSpec,
    TimeGrid,
    check_setup,
    preset,
)
from sgbm_exposure.moments import Backend

ENV_OUTPUT_DIR = "SGBM_EXPOSURE_OUTPUT_DIR"

ESTIMATOR_SETS = {
    "direct": (Estimator.DIRECT,),
    "path": (Estimator.PATH,),
    "both": (Estimator.DIRECT, Estimator.PATH),
}

_TOP_LEVEL = (
    "preset",
    "model",
    "contract",
    "grid",
    "simulation",
    "regression",
    "estimators",
    "credit",
    "validation",
    "output_dir",
    "log_level",
    "log_file",
)
_CONTRACT_FIELDS = ("kind", "omega", "strike", "tenor", "barrier")
_GRID_FIELDS = ("dates", "dt_qe")

# Bifurcation levels giving 64 bundles for one and two factors, 512 for three
_DEFAULT_ITERATIONS = {Family.BS: 6, Family.HESTON: 3, Family.BSHW: 3, Family.HHW: 3}
_DEFAULT_SPLITS = {1: (64,), 2: (8, 8), 3: (8, 8, 8)}


def default_iterations(family: Family) -> int:
    return _DEFAULT_ITERATIONS[Family(family)]


def default_splits(n_dims: int) -> tuple[int, ...]:
    return _DEFAULT_SPLITS[n_dims]


@dataclass
class SimulationSettings:
    """Path-simulation settings.

    Attributes:
        paths: Regression-pass path count N
        seeds: Seeds, one independent repetition each
        workers: Threads per simulation
    """

    paths: int = 100_000
    seeds: tuple[int, ...] = (1,)
    workers: int = 1


@dataclass
class RegressionSettings:
    """Bundling and regression settings.

    Attributes:
        order: Basis order p
        method: Bundling method name
        iterations: Bifurcation levels; None picks the per-family default
        splits: Equal-number group counts; empty picks the per-dimension default
        moment_backend: Discounted-moment backend name
        sqrt_variance_table: Interpolate the HHW G1/G2 quadratures from a table
    """

    order: int = 2
    method: str = BundleMethod.BIFURCATION.value
    iterations: int | None = None
    splits: tuple[int, ...] = ()
    moment_backend: str = Backend.AUTO.value
    sqrt_variance_table: bool = False


@dataclass
class ValidationSettings:
    """Optional checks and dumps performed during a run.

    Attributes:
        backend_check: Cross-check closed-form and generic Heston moments
        moment_probe: Compare analytic discounted moments with sample moments
        dump_bundles: Write bundle assignments and coefficient tables
        dump_paths: Write the regression-pass path cloud
    """

    backend_check: bool = False
    moment_probe: bool = False
    dump_bundles: bool = False
    dump_paths: bool = False


def _key_lines(node: yaml.Node | None, prefix: str = "") -> dict[str, int]:
    """Map dotted keys of a composed YAML document to 1-based line numbers."""
    lines: dict[str, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            dotted = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            lines[dotted] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, dotted))
    return lines


def _at(lines: dict[str, int], key: str) -> str:
    return f" (line {lines[key]})" if key in lines else ""


def _section(data: dict[str, Any], name: str, allowed: tuple[str, ...], lines: dict[str, int]) -> dict[str, Any]:
    """Fetch a mapping section and reject fields it does not know."""
    value = data.get(name)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigurationError(f"Section '{name}' must be a mapping{_at(lines, name)}")
    for key in value:
        if key not in allowed:
            dotted = f"{name}.{key}"
            raise ConfigurationError(f"Unknown field '{dotted}'{_at(lines, dotted)}")
    return dict(value)


def _field_names(cls: type) -> tuple[str, ...]:
    return tuple(f.name for f in fields(cls) if f.init)


def _as_int_tuple(value: Any, name: str, lines: dict[str, int]) -> tuple[int, ...]:
    items = value if isinstance(value, list | tuple) else [value]
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in items):
        raise ConfigurationError(f"Field '{name}' must be an integer list{_at(lines, name)}")
    return tuple(items)


def _build_specs(
    data: dict[str, Any], lines: dict[str, int]
) -> tuple[ModelSpec, ContractSpec, TimeGrid]:
    """Resolve the preset and the model, contract and grid overrides."""
    model_data = _section(data, "model", _field_names(ModelSpec), lines)
    contract_data = _section(data, "contract", _CONTRACT_FIELDS, lines)
    grid_data = _section(data, "grid", _GRID_FIELDS, lines)

    name = data.get("preset")
    base_dates: int | None = None
    if name is not None:
        try:
            base_model, base_contract, base_grid = preset(str(name))
        except ModelError as e:
            raise ConfigurationError(f"{e}{_at(lines, 'preset')}") from e
        model_data = {**base_model.to_dict(), **model_data}
        base = base_contract.to_dict()
        base.pop("exercise_dates")
        if "kind" in contract_data and "barrier" not in contract_data:
            base.pop("barrier")
        contract_data = {**base, **contract_data}
        grid_data = {"dt_qe": base_grid.dt_qe, **grid_data}
        if "dates" not in grid_data:
            if contract_data["tenor"] == base_grid.tenor:
                grid_data["dates"] = list(base_grid.dates)
            else:
                base_dates = base_grid.M
    else:
        missing = [s for s in ("model", "contract", "grid") if s not in data]
        if missing:
            raise ConfigurationError(
                f"Configuration needs a preset or model, contract and grid sections "
                f"(missing: {', '.join(missing)})"
            )

    try:
        model = ModelSpec.from_dict(model_data)
    except (ModelError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid model section{_at(lines, 'model')}: {e}") from e

    try:
        tenor = float(contract_data["tenor"])
        dt_qe = float(grid_data["dt_qe"])
        dates = grid_data["dates"] if base_dates is None else base_dates
        if isinstance(dates, int) and not isinstance(dates, bool):
            grid = TimeGrid.uniform(tenor, dates, dt_qe)
        elif isinstance(dates, list):
            grid = TimeGrid(tuple(dates), dt_qe)
        else:
            raise ConfigurationError(
                f"Field 'grid.dates' must be a count or a list{_at(lines, 'grid.dates')}"
            )
    except KeyError as e:
        raise ConfigurationError(f"Missing field {e}{_at(lines, 'grid')}") from e
    except (ModelError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid grid section{_at(lines, 'grid')}: {e}") from e

    try:
        if ContractKind(contract_data.get("kind")) is ContractKind.BERMUDAN:
            contract_data["exercise_dates"] = grid.dates[1:]
        contract = ContractSpec.from_dict(contract_data)
    except (ModelError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid contract section{_at(lines, 'contract')}: {e}") from e
    return model, contract, grid


@dataclass
class RunConfig:
    """Complete description of a batch run.

    Attributes:
        model: Dynamics and parameters
        contract: Option contract
        grid: Monitoring dates and simulation substep
        preset: Preset the specs were derived from, if any
        simulation: Path counts, seeds and threads
        regression: Bundling and basis settings
        estimators: Estimator set name (direct, path, both)
        credit: Hazard rate, recovery and PFE level
        validation: Optional checks and dumps
        output_dir: Directory receiving all artifacts
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path to a run log file
    """

    model: ModelSpec
    contract: ContractSpec
    grid: TimeGrid
    preset: str | None = None
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    regression: RegressionSettings = field(default_factory=RegressionSettings)
    estimators: str = "both"
    credit: CreditSpec = field(default_factory=CreditSpec)
    validation: ValidationSettings = field(default_factory=ValidationSettings)
    output_dir: Path = Path("./results")
    log_level: str = "INFO"
    log_file: str | None = None

    @classmethod
    def from_yaml(cls, path: str | Path, env_file: Path | None = None) -> "RunConfig":
        """Load a run configuration document.

        Args:
            path: YAML configuration file
            env_file: Optional path to .env file. If not provided, looks for .env
                     in the current directory.

        Returns:
            RunConfig: Configuration with the environment override applied

        Raises:
            ConfigurationError: If the file cannot be read or parsed, or a field
                is unknown or invalid
        """
        config_path = Path(path)
        try:
            text = config_path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"Cannot read configuration {config_path}: {e}") from e

        try:
            data = yaml.safe_load(text)
            root = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f" (line {mark.line + 1})" if mark is not None else ""
            raise ConfigurationError(f"Invalid YAML in {config_path}{where}: {e}") from e

        config = cls.from_mapping(data or {}, _key_lines(root))
        config.apply_environment(env_file)
        return config

    @classmethod
    def from_mapping(
        cls, data: dict[str, Any], lines: dict[str, int] | None = None
    ) -> "RunConfig":
        """Build a configuration from a parsed document.

        Args:
            data: Parsed configuration mapping
            lines: Dotted key to line number map used in error messages

        Returns:
            RunConfig: Configuration (environment not consulted)

        Raises:
            ConfigurationError: If a field is unknown or invalid
        """
        lines = lines or {}
        if not isinstance(data, dict):
            raise ConfigurationError("Configuration document must be a mapping")
        for key in data:
            if key not in _TOP_LEVEL:
                raise ConfigurationError(f"Unknown field '{key}'{_at(lines, str(key))}")

        model, contract, grid = _build_specs(data, lines)

        sim = _section(data, "simulation", _field_names(SimulationSettings), lines)
        if "seeds" in sim:
            sim["seeds"] = _as_int_tuple(sim["seeds"], "simulation.seeds", lines)
        reg = _section(data, "regression", _field_names(RegressionSettings), lines)
        if "splits" in reg:
            reg["splits"] = _as_int_tuple(reg["splits"], "regression.splits", lines)
        checks = _section(data, "validation", _field_names(ValidationSettings), lines)
        credit_data = _section(data, "credit", _field_names(CreditSpec), lines)
        try:
            credit = CreditSpec(**credit_data)
        except (CreditError, TypeError) as e:
            raise ConfigurationError(f"Invalid credit section{_at(lines, 'credit')}: {e}") from e

        output_dir = data.get("output_dir")
        log_level = data.get("log_level", "INFO")
        return cls(
            model=model,
            contract=contract,
            grid=grid,
            preset=data.get("preset"),
            simulation=SimulationSettings(**sim),
            regression=RegressionSettings(**reg),
            estimators=str(data.get("estimators", "both")),
            credit=credit,
            validation=ValidationSettings(**checks),
            output_dir=Path(output_dir) if output_dir else Path("./results"),
            log_level=str(log_level).upper(),
            log_file=data.get("log_file"),
        )

    @classmethod
    def from_preset(cls, name: str) -> "RunConfig":
        return cls.from_mapping({"preset": name})

    def apply_environment(self, env_file: Path | None = None) -> None:
        """Apply the output-directory override from the environment or a .env file."""
        if env_file:
            load_dotenv(env_file)
        else:
            load_dotenv()

        output_dir = os.getenv(ENV_OUTPUT_DIR)
        if output_dir:
            self.output_dir = Path(output_dir)

    @property
    def estimator_set(self) -> tuple[Estimator, ...]:
        return ESTIMATOR_SETS[self.estimators]

    @property
    def bundle_method(self) -> BundleMethod:
        return BundleMethod(self.regression.method)

    def sweep_config(self, keep_bundles: bool = False) -> SweepConfig:
        """Backward-sweep settings with family and dimension defaults filled in."""
        method = self.bundle_method
        iterations = self.regression.iterations or default_iterations(self.model.family)
        splits = self.regression.splits
        if method is BundleMethod.EQUAL_NUMBER and not splits:
            splits = default_splits(self.model.n_dims)
        return SweepConfig(
            order=self.regression.order,
            method=method,
            iterations=iterations,
            splits=tuple(splits),
            backend=Backend(self.regression.moment_backend),
            pfe_alpha=self.credit.pfe_alpha,
            sqrt_variance_table=self.regression.sqrt_variance_table,
            keep_bundles=keep_bundles,
        )

    def validate(self) -> None:
        """Validate configuration settings.

        Raises:
            ConfigurationError: If configuration settings are invalid
        """
        if self.log_level not in LOG_LEVELS:
            raise ConfigurationError(
                f"Invalid log level: {self.log_level}. Must be one of {', '.join(LOG_LEVELS)}"
            )

        sim = self.simulation
        if not isinstance(sim.paths, int) or sim.paths < 2:
            raise ConfigurationError(f"simulation.paths must be an integer >= 2, got {sim.paths}")
        if not sim.seeds:
            raise ConfigurationError("simulation.seeds must not be empty")
        if any(s < 0 for s in sim.seeds):
            raise ConfigurationError(f"simulation.seeds must be non-negative, got {list(sim.seeds)}")
        if len(set(sim.seeds)) != len(sim.seeds):
            raise ConfigurationError(f"simulation.seeds contains duplicates: {list(sim.seeds)}")
        if not isinstance(sim.workers, int) or sim.workers < 1:
            raise ConfigurationError(f"simulation.workers must be >= 1, got {sim.workers}")

        if self.estimators not in ESTIMATOR_SETS:
            raise ConfigurationError(
                f"Invalid estimators: {self.estimators}. "
                f"Must be one of {', '.join(ESTIMATOR_SETS)}"
            )
        methods = [m.value for m in BundleMethod]
        if self.regression.method not in methods:
            raise ConfigurationError(
                f"Invalid bundling method: {self.regression.method}. "
                f"Must be one of {', '.join(methods)}"
            )
        backends = [b.value for b in Backend]
        if self.regression.moment_backend not in backends:
            raise ConfigurationError(
                f"Invalid moment backend: {self.regression.moment_backend}. "
                f"Must be one of {', '.join(backends)}"
            )
        if len(self.regression.splits) > self.model.n_dims:
            raise ConfigurationError(
                f"regression.splits has {len(self.regression.splits)} entries "
                f"for {self.model.n_dims} state factor(s)"
            )
        if self.regression.order > self.model.max_moment_degree:
            raise ConfigurationError(
                f"regression.order {self.regression.order} exceeds the moment degree cap "
                f"{self.model.max_moment_degree} for {self.model.family.value}"
            )
        try:
            self.sweep_config().validate()
        except EstimatorError as e:
            raise ConfigurationError(f"Invalid regression section: {e}") from e

        try:
            check_setup(self.model, self.contract, self.grid)
        except ModelError as e:
            raise ConfigurationError(f"Inconsistent model, contract and grid: {e}") from e

    def to_dict(self) -> dict[str, Any]:
        """Plain-data form written into run summaries."""
        return {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "contract": self.contract.to_dict(),
            "grid": self.grid.to_dict(),
            "simulation": {
                "paths": self.simulation.paths,
                "seeds": list(self.simulation.seeds),
                "workers": self.simulation.workers,
            },
            "regression": {
                "order": self.regression.order,
                "method": self.regression.method,
                "iterations": self.regression.iterations,
                "splits": list(self.regression.splits),
                "moment_backend": self.regression.moment_backend,
                "sqrt_variance_table": self.regression.sqrt_variance_table,
            },
            "estimators": self.estimators,
            "credit": self.credit.to_dict(),
            "validation": {
                "backend_check": self.validation.backend_check,
                "moment_probe": self.validation.moment_probe,
                "dump_bundles": self.validation.dump_bundles,
                "dump_paths": self.validation.dump_paths,
            },
            "output_dir": str(self.output_dir),
            "log_level": self.log_level,
            "log_file": self.log_file,
        }
