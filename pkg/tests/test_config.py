"""Tests for configuration module."""

import os
from pathlib import Path
from unittest.mock import patch

import pytest

from sgbm_exposure.bundling import BundleMethod
from sgbm_exposure.config import (
    ENV_OUTPUT_DIR,
    RunConfig,
    default_iterations,
    default_splits,
)
from sgbm_exposure.engine import Estimator
from sgbm_exposure.exceptions import ConfigurationError
from sgbm_exposure.models import ContractKind, Family

CUSTOM_RUN = """\
model:
  family: Heston
  s0: 100.0
  r0: 0.04
  v0: 0.0348
  kappa: 1.15
  vbar: 0.0348
  gamma: 0.39
  rho_xv: -0.64
contract:
  kind: Bermudan
  omega: -1
  strike: 100.0
  tenor: 1.0
grid:
  dates: 4
  dt_qe: 0.05
simulation:
  paths: 5000
  seeds: [1, 2, 3]
regression:
  order: 2
  method: equal_number
credit:
  hazard_rate: 0.05
  recovery: 0.4
"""


def _write(tmp_path: Path, text: str) -> Path:
    target = tmp_path / "run.yaml"
    target.write_text(text, encoding="utf-8")
    return target


@pytest.fixture
def missing_env(tmp_path: Path) -> Path:
    return tmp_path / "missing.env"


class TestRunConfigFromYaml:
    """Test cases for loading run configurations."""

    def test_custom_document(self, tmp_path: Path, missing_env: Path) -> None:
        """Test a fully specified document."""
        with patch.dict(os.environ, {}, clear=True):
            config = RunConfig.from_yaml(_write(tmp_path, CUSTOM_RUN), env_file=missing_env)

        assert config.model.family is Family.HESTON
        assert config.contract.kind is ContractKind.BERMUDAN
        assert config.grid.dates == (0.0, 0.25, 0.5, 0.75, 1.0)
        assert config.contract.exercise_dates == (0.25, 0.5, 0.75, 1.0)
        assert config.simulation.seeds == (1, 2, 3)
        assert config.credit.recovery == 0.4
        assert config.bundle_method is BundleMethod.EQUAL_NUMBER
        assert config.output_dir == Path("./results")
        config.validate()

    def test_preset_with_overrides(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that overrides are layered on top of a preset."""
        text = "preset: TestA\nmodel:\n  gamma: 0.5\ncontract:\n  strike: 90.0\n"
        with patch.dict(os.environ, {}, clear=True):
            config = RunConfig.from_yaml(_write(tmp_path, text), env_file=missing_env)

        assert config.preset == "TestA"
        assert config.model.gamma == 0.5
        assert config.model.kappa == 1.15
        assert config.contract.strike == 90.0
        assert config.grid.M == 10

    def test_changed_tenor_rebuilds_grid(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that a new tenor keeps the preset's interval count."""
        text = "preset: TestA\ncontract:\n  tenor: 2.0\n"
        with patch.dict(os.environ, {}, clear=True):
            config = RunConfig.from_yaml(_write(tmp_path, text), env_file=missing_env)

        assert config.grid.tenor == pytest.approx(2.0)
        assert config.grid.M == 10
        assert config.contract.exercise_dates[-1] == pytest.approx(2.0)

    def test_unknown_field_reports_line(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that an unknown nested field names its line."""
        text = "preset: TestA\nregression:\n  order: 2\n  bundels: 8\n"
        with pytest.raises(ConfigurationError, match=r"Unknown field 'regression.bundels' \(line 4\)"):
            RunConfig.from_yaml(_write(tmp_path, text), env_file=missing_env)

    def test_unknown_top_level_field(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that an unknown section is rejected."""
        with pytest.raises(ConfigurationError, match=r"Unknown field 'plots' \(line 2\)"):
            RunConfig.from_yaml(_write(tmp_path, "preset: TestA\nplots: true\n"), env_file=missing_env)

    def test_invalid_yaml(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that parser errors carry the line number."""
        with pytest.raises(ConfigurationError, match="Invalid YAML"):
            RunConfig.from_yaml(_write(tmp_path, "preset: [TestA\n"), env_file=missing_env)

    def test_missing_file(self, tmp_path: Path) -> None:
        """Test that an unreadable file raises ConfigurationError."""
        with pytest.raises(ConfigurationError, match="Cannot read configuration"):
            RunConfig.from_yaml(tmp_path / "absent.yaml")

    def test_unknown_preset(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that an unknown preset is reported with its line."""
        with pytest.raises(ConfigurationError, match=r"Unknown preset: Nope.*\(line 1\)"):
            RunConfig.from_yaml(_write(tmp_path, "preset: Nope\n"), env_file=missing_env)

    def test_missing_sections(self) -> None:
        """Test that a document without preset needs model, contract and grid."""
        with pytest.raises(ConfigurationError, match="missing: contract, grid"):
            RunConfig.from_mapping({"model": {"family": "BS", "s0": 100.0, "r0": 0.02, "sigma": 0.2}})

    def test_invalid_model_section(self) -> None:
        """Test that model errors are wrapped."""
        with pytest.raises(ConfigurationError, match="Invalid model section"):
            RunConfig.from_mapping({"preset": "TestA", "model": {"kappa": 0.0}})

    def test_seeds_must_be_integers(self) -> None:
        """Test the integer-list check."""
        with pytest.raises(ConfigurationError, match="integer list"):
            RunConfig.from_mapping({"preset": "TestA", "simulation": {"seeds": ["a"]}})


class TestEnvironment:
    """Test cases for environment overrides."""

    def test_output_dir_from_environment(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that the environment variable overrides the document."""
        text = "preset: TestA\noutput_dir: from_file\n"
        with patch.dict(os.environ, {ENV_OUTPUT_DIR: str(tmp_path / "env")}, clear=True):
            config = RunConfig.from_yaml(_write(tmp_path, text), env_file=missing_env)
        assert config.output_dir == tmp_path / "env"

    def test_output_dir_from_env_file(self, tmp_path: Path) -> None:
        """Test that a .env file is honoured."""
        env_file = tmp_path / ".env"
        env_file.write_text(f"{ENV_OUTPUT_DIR}={tmp_path / 'dotenv'}\n", encoding="utf-8")
        with patch.dict(os.environ, {}, clear=True):
            config = RunConfig.from_preset("TestA")
            config.apply_environment(env_file)
        assert config.output_dir == tmp_path / "dotenv"

    def test_document_value_without_environment(self, tmp_path: Path, missing_env: Path) -> None:
        """Test that the document's output directory is kept otherwise."""
        text = "preset: TestA\noutput_dir: from_file\n"
        with patch.dict(os.environ, {}, clear=True):
            config = RunConfig.from_yaml(_write(tmp_path, text), env_file=missing_env)
        assert config.output_dir == Path("from_file")


class TestDefaults:
    """Test cases for family and dimension defaults."""

    def test_default_iterations(self) -> None:
        """Test bifurcation levels per family."""
        assert default_iterations(Family.BS) == 6
        assert default_iterations(Family.HESTON) == 3
        assert default_iterations(Family.HHW) == 3

    def test_default_splits(self) -> None:
        """Test equal-number group counts per dimension."""
        assert default_splits(1) == (64,)
        assert default_splits(3) == (8, 8, 8)

    def test_sweep_config_fills_defaults(self) -> None:
        """Test that the sweep settings receive the defaults."""
        config = RunConfig.from_preset("TestA")
        sweep = config.sweep_config()
        assert sweep.iterations == 3
        assert sweep.pfe_alpha == config.credit.pfe_alpha

        config.regression.method = "equal_number"
        assert config.sweep_config().splits == (8, 8)

    def test_estimator_set(self) -> None:
        """Test estimator set resolution."""
        config = RunConfig.from_preset("TestA")
        assert config.estimator_set == (Estimator.DIRECT, Estimator.PATH)
        config.estimators = "path"
        assert config.estimator_set == (Estimator.PATH,)


class TestValidate:
    """Test cases for RunConfig.validate."""

    def test_preset_is_valid(self) -> None:
        """Test that every default passes validation."""
        RunConfig.from_preset("TestB_rho02_T5").validate()

    @pytest.mark.parametrize(
        ("mutate", "match"),
        [
            (lambda c: setattr(c, "log_level", "LOUD"), "Invalid log level"),
            (lambda c: setattr(c.simulation, "paths", 1), "simulation.paths"),
            (lambda c: setattr(c.simulation, "seeds", ()), "must not be empty"),
            (lambda c: setattr(c.simulation, "seeds", (1, 1)), "duplicates"),
            (lambda c: setattr(c.simulation, "seeds", (-1,)), "non-negative"),
            (lambda c: setattr(c.simulation, "workers", 0), "workers"),
            (lambda c: setattr(c, "estimators", "all"), "Invalid estimators"),
            (lambda c: setattr(c.regression, "method", "kmeans"), "Invalid bundling method"),
            (lambda c: setattr(c.regression, "moment_backend", "fft"), "Invalid moment backend"),
            (lambda c: setattr(c.regression, "splits", (4, 4, 4)), "regression.splits"),
            (lambda c: setattr(c.regression, "iterations", -1), "Invalid regression section"),
        ],
    )
    def test_invalid_settings(self, mutate, match: str) -> None:
        """Test that each invalid setting raises ConfigurationError."""
        config = RunConfig.from_preset("TestA")
        mutate(config)
        with pytest.raises(ConfigurationError, match=match):
            config.validate()

    def test_order_above_cap_for_hhw(self) -> None:
        """Test that HHW refuses order 3."""
        config = RunConfig.from_preset("TestB_rho02_T5")
        config.regression.order = 3
        with pytest.raises(ConfigurationError, match="moment degree cap"):
            config.validate()

    def test_to_dict(self) -> None:
        """Test the plain-data form."""
        data = RunConfig.from_preset("TestA").to_dict()
        assert data["preset"] == "TestA"
        assert data["simulation"]["seeds"] == [1]
        assert data["estimators"] == "both"


RUNS_DIR = Path(__file__).resolve().parents[1] / "runs"


class TestShippedConfigs:
    """Test cases for the example run configurations."""

    @pytest.mark.parametrize("path", sorted(RUNS_DIR.glob("*.yaml")), ids=lambda p: p.stem)
    def test_loads_and_validates(self, path: Path, missing_env: Path) -> None:
        """Test that every shipped configuration is valid."""
        with patch.dict(os.environ, {}, clear=True):
            config = RunConfig.from_yaml(path, env_file=missing_env)
        config.validate()
