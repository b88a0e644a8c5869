from datetime import datetime

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _frozen_array(values, name: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} must be finite")
    array.flags.writeable = False
    return array


class BatteryParams(BaseModel):
    """Model representing a household storage device."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(1.0, gt=0.0, le=1.0, description="Self-discharge efficiency per step.")
    beta: float = Field(1.0, gt=0.0, le=1.0, description="Charging efficiency.")
    gamma: float = Field(1.0, gt=0.0, le=1.0, description="Discharging efficiency.")
    capacity: float = Field(0.0, ge=0.0, description="Capacity in kWh.")
    u_max: float = Field(0.0, ge=0.0, description="Maximum charging power in kW.")
    u_min: float = Field(0.0, le=0.0, description="Maximum discharging power in kW (non-positive).")

    @property
    def has_storage(self) -> bool:
        """Whether the device has any control authority."""
        return self.capacity > 0.0 and (self.u_max > 0.0 or self.u_min < 0.0)

    @classmethod
    def none(cls) -> "BatteryParams":
        """Return the parameters of a household without storage."""
        return cls(capacity=0.0, u_max=0.0, u_min=0.0)


class Household(BaseModel):
    """Model representing a prosumer with load and generation series."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    id: int
    battery: BatteryParams = Field(default_factory=BatteryParams.none)
    load: np.ndarray
    generation: np.ndarray

    @field_validator("load", "generation", mode="before")
    @classmethod
    def _to_array(cls, value, info):
        array = _frozen_array(value, info.field_name)
        if np.any(array < 0.0):
            raise ValueError(f"{info.field_name} must be non-negative")
        return array

    @model_validator(mode="after")
    def _same_length(self) -> "Household":
        if self.load.shape != self.generation.shape:
            raise ValueError("load and generation must share length")
        return self

    @property
    def net_consumption(self) -> np.ndarray:
        """Net consumption w = load - generation in kW."""
        return self.load - self.generation

    def __len__(self) -> int:
        """Number of samples in the series."""
        return int(self.load.shape[0])


class Microgrid(BaseModel):
    """Model representing a microgrid of households."""

    model_config = ConfigDict(frozen=True)

    index: int
    households: tuple[Household, ...]

    @model_validator(mode="after")
    def _check_households(self) -> "Microgrid":
        if len(self.households) < 1:
            raise ValueError("a microgrid needs at least one household")
        ids = [h.id for h in self.households]
        if len(set(ids)) != len(ids):
            raise ValueError(f"household ids must be unique within microgrid {self.index}")
        return self

    @property
    def size(self) -> int:
        """Number of households I_kappa."""
        return len(self.households)

    def net_consumption(self) -> np.ndarray:
        """Stacked net consumption, shape (I, length)."""
        return np.vstack([h.net_consumption for h in self.households])

    def batteries(self) -> list[BatteryParams]:
        """Battery parameters in household order."""
        return [h.battery for h in self.households]


class GridTopology(BaseModel):
    """Model representing the transmission lines between microgrids.

    Shape is checked on construction; symmetry, unit diagonal and entry bounds are
    reported by `grid.validate_topology`.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    eta: np.ndarray

    @field_validator("eta", mode="before")
    @classmethod
    def _to_matrix(cls, value):
        array = np.array(value, dtype=float)
        if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] < 1:
            raise ValueError("eta must be a non-empty square matrix")
        array.flags.writeable = False
        return array

    @property
    def xi(self) -> int:
        """Number of microgrids."""
        return int(self.eta.shape[0])

    def connected(self) -> np.ndarray:
        """Boolean mask of admissible exchange directions (diagonal included)."""
        mask = self.eta > 0.0
        np.fill_diagonal(mask, True)
        return mask


class ScenarioConfig(BaseModel):
    """Time discretisation and closed-loop length."""

    model_config = ConfigDict(frozen=True)

    T: float = Field(0.5, gt=0.0, description="Step length in hours.")
    N: int = Field(6, ge=2, description="Prediction horizon.")
    sim_length: int = Field(48, ge=0, description="Number of closed-loop steps.")
    start_step: int = Field(0, ge=0, description="Absolute step at which the closed loop starts.")
    rng_seed: int = 0


class Scenario(BaseModel):
    """A complete smart grid: topology, microgrids with data, and time settings."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str = "scenario"
    topology: GridTopology
    microgrids: tuple[Microgrid, ...]
    settings: ScenarioConfig
    initial_soc: tuple[np.ndarray, ...]

    @model_validator(mode="after")
    def _check_shapes(self) -> "Scenario":
        if len(self.microgrids) != self.topology.xi:
            raise ValueError("one microgrid per row of eta is required")
        if len(self.initial_soc) != len(self.microgrids):
            raise ValueError("one initial SoC vector per microgrid is required")
        for mg, x0 in zip(self.microgrids, self.initial_soc):
            if np.shape(x0) != (mg.size,):
                raise ValueError(f"initial SoC of microgrid {mg.index} must have {mg.size} entries")
        lengths = {len(h) for mg in self.microgrids for h in mg.households}
        if len(lengths) != 1:
            raise ValueError("all household series must share length")
        return self

    @property
    def sizes(self) -> np.ndarray:
        """Household counts per microgrid."""
        return np.array([mg.size for mg in self.microgrids], dtype=float)

    @property
    def length(self) -> int:
        """Number of data samples per household."""
        return len(self.microgrids[0].households[0])

    def all_net_consumption(self) -> np.ndarray:
        """Net consumption of every household of the smart grid, shape (I, length)."""
        return np.vstack([mg.net_consumption() for mg in self.microgrids])


class RunSummary(BaseModel):
    """Model representing one finished closed-loop run."""

    run_id: str
    solver: str
    total_cost: float
    mean_runtime_ms: float | None = None
    transmissions: int
    steps: int
    config_hash: str
    created_at: datetime | None = None
