from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from microlink.admm import ADMMConfig
from microlink.bilevel import BilevelConfig
from microlink.data import BatteryDistribution, SyntheticConfig
from microlink.exceptions import ConfigError
from microlink.exchange import ExchangeConfig
from microlink.grid import validate_topology
from microlink.models import GridTopology, ScenarioConfig
from microlink.nn import TrainConfig
from microlink.rbf import RBFConfig
from microlink.utils import fingerprint

DEFAULT_EFFICIENCY = [
    [1.0, 0.9, 0.9, 0.85],
    [0.9, 1.0, 0.0, 0.85],
    [0.9, 0.0, 1.0, 0.0],
    [0.85, 0.85, 0.0, 1.0],
]


class Config(BaseModel):
    """Configuration settings for a scenario and its solvers."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    scenario_name: str = "committed"
    step_hours: float = Field(0.5, gt=0.0)
    horizon: int = Field(6, ge=2)
    sim_length: int = Field(48, ge=0)
    start_step: int = Field(96, ge=0)
    rng_seed: int = 0

    households_per_grid: list[int] = Field(default_factory=lambda: [50, 10, 10, 10])
    efficiency: list[list[float]] = Field(default_factory=lambda: [row[:] for row in DEFAULT_EFFICIENCY])

    battery_capacity: float = Field(0.98, ge=0.0)
    battery_u_min: float = Field(-0.24, le=0.0)
    battery_u_max: float = Field(0.25, ge=0.0)
    battery_alpha: float = Field(1.0, gt=0.0, le=1.0)
    battery_beta: float = Field(0.95, gt=0.0, le=1.0)
    battery_gamma: float = Field(0.95, gt=0.0, le=1.0)
    battery_spread: float = Field(0.2, ge=0.0, lt=1.0)
    initial_soc_fraction: float = Field(0.5, ge=0.0, le=1.0)

    data_path: str | None = None
    synthetic_days: int = Field(4, ge=1)
    synthetic_noise: float = Field(0.1, ge=0.0)

    admm_rho: float = Field(1.0, gt=0.0)
    admm_max_iters: int = Field(200, ge=1)
    admm_primal_tol: float = Field(1e-4, gt=0.0)
    admm_cost_tol: float = Field(1e-6, gt=0.0)
    admm_warm_start: bool = True

    exchange_eps: float = Field(1e-6, gt=0.0)
    exchange_starts: int = Field(3, ge=1)

    bilevel_j_max: int = Field(10, ge=1)
    bilevel_eps: float = Field(1e-4, gt=0.0)

    surrogate_grids: list[int] = Field(default_factory=lambda: [0])
    rbf_kernel: Literal["gaussian", "multiquadric", "thin_plate"] = "gaussian"
    rbf_shape: float | None = Field(None, gt=0.0)
    rbf_ridge: float = Field(1e-10, ge=0.0)
    rbf_tail: Literal["affine", "constant"] = "affine"
    rbf_stride: int = Field(25, ge=1)
    nn_hidden: list[int] = Field(default_factory=lambda: [10])
    nn_epochs: int = Field(2000, ge=1)
    nn_learning_rate: float = Field(1e-2, gt=0.0)
    nn_batch_size: int = Field(32, ge=1)
    nn_validation_split: float = Field(0.2, ge=0.0, lt=1.0)
    nn_patience: int = Field(50, ge=1)
    nn_stride: int = Field(1, ge=1)
    model_dir: str = "models"
    training_start: int = Field(0, ge=0)
    training_steps: int = Field(96, ge=1)

    database: str = "./microlink.duckdb"
    workers: int = Field(1, ge=1)
    forecast_noise: float = Field(0.0, ge=0.0)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    @model_validator(mode="after")
    def _check_grid(self) -> "Config":
        try:
            topology = GridTopology(eta=self.efficiency)
        except ValidationError as e:
            raise ValueError(f"efficiency: {e.errors()[0]['msg']}") from e
        report = validate_topology(topology)
        if not report:
            raise ValueError(f"efficiency: {report.describe()}")
        if len(self.households_per_grid) != topology.xi:
            raise ValueError("households_per_grid: one entry per row of efficiency is required")
        if any(size < 1 for size in self.households_per_grid):
            raise ValueError("households_per_grid: every microgrid needs at least one household")
        if any(not 0 <= index < topology.xi for index in self.surrogate_grids):
            raise ValueError(f"surrogate_grids: indices must lie in [0, {topology.xi - 1}]")
        if any(width < 1 for width in self.nn_hidden):
            raise ValueError("nn_hidden: layer widths must be positive")
        return self

    @classmethod
    def load(cls, path: str | Path = "config.yaml") -> "Config":
        """Load configuration from a YAML file."""
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping of keys to values")
        try:
            return cls(**data)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
            )
            raise ConfigError(f"invalid config {path}: {problems}") from e

    def fingerprint(self) -> str:
        """Short hash of the validated configuration."""
        return fingerprint(self.model_dump(exclude={"log_level"}))

    @property
    def topology(self) -> GridTopology:
        """Efficiency matrix as a topology."""
        return GridTopology(eta=np.array(self.efficiency))

    def scenario_config(self, training: bool = False) -> ScenarioConfig:
        """Time settings of the evaluation window, or of the training window."""
        if training:
            start, length = self.training_start, self.training_steps
        else:
            start, length = self.start_step, self.sim_length
        return ScenarioConfig(
            T=self.step_hours, N=self.horizon, sim_length=length, start_step=start, rng_seed=self.rng_seed
        )

    def battery_distribution(self) -> BatteryDistribution:
        """Battery means and spread."""
        return BatteryDistribution(
            capacity=self.battery_capacity,
            u_min=self.battery_u_min,
            u_max=self.battery_u_max,
            alpha=self.battery_alpha,
            beta=self.battery_beta,
            gamma=self.battery_gamma,
            spread=self.battery_spread,
            initial_soc_fraction=self.initial_soc_fraction,
        )

    def synthetic_config(self, seed: int | None = None) -> SyntheticConfig:
        """Generator settings covering every household of the scenario."""
        return SyntheticConfig(
            households=sum(self.households_per_grid),
            days=self.synthetic_days,
            step_hours=self.step_hours,
            noise=self.synthetic_noise,
            seed=self.rng_seed if seed is None else seed,
        )

    def admm_config(self) -> ADMMConfig:
        """ADMM settings."""
        return ADMMConfig(
            rho=self.admm_rho,
            max_iters=self.admm_max_iters,
            primal_tol=self.admm_primal_tol,
            cost_tol=self.admm_cost_tol,
            warm_start=self.admm_warm_start,
        )

    def exchange_config(self) -> ExchangeConfig:
        """Exchange NLP settings."""
        return ExchangeConfig(
            eps=self.exchange_eps, starts=self.exchange_starts, seed=self.rng_seed, workers=self.workers
        )

    def bilevel_config(self) -> BilevelConfig:
        """Bidirectional scheme settings."""
        return BilevelConfig(j_max=self.bilevel_j_max, eps=self.bilevel_eps, workers=self.workers)

    def rbf_config(self) -> RBFConfig:
        """RBF fit settings."""
        return RBFConfig(kernel=self.rbf_kernel, shape=self.rbf_shape, ridge=self.rbf_ridge, tail=self.rbf_tail)

    def train_config(self) -> TrainConfig:
        """Network training settings."""
        return TrainConfig(
            hidden=self.nn_hidden,
            epochs=self.nn_epochs,
            learning_rate=self.nn_learning_rate,
            batch_size=self.nn_batch_size,
            validation_split=self.nn_validation_split,
            patience=self.nn_patience,
            seed=self.rng_seed,
        )

    def model_path(self, kind: str, mg: int) -> Path:
        """Where the surrogate of one kind for one microgrid is stored."""
        return Path(self.model_dir) / f"{kind}_mg{mg}.npz"
