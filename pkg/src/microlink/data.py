import csv
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from microlink.exceptions import DataContinuityError, DataError, DataParseError
from microlink.logger import logger
from microlink.models import BatteryParams, GridTopology, Household, Microgrid, Scenario, ScenarioConfig

HEADER = ["step", "household", "load_kw", "gen_kw"]


class SyntheticConfig(BaseModel):
    """Shape and noise of generated residential load and rooftop solar series."""

    model_config = ConfigDict(frozen=True)

    households: int = Field(80, ge=1)
    days: int = Field(4, ge=1)
    step_hours: float = Field(0.5, gt=0.0)
    noise: float = Field(0.1, ge=0.0, description="Relative standard deviation of multiplicative noise.")
    seed: int = 0
    base_load_kw: float = Field(0.3, gt=0.0)
    morning_peak_kw: float = Field(0.5, ge=0.0)
    evening_peak_kw: float = Field(0.9, ge=0.0)
    solar_peak_kw: float = Field(1.5, ge=0.0)
    scale_spread: float = Field(0.3, ge=0.0, lt=1.0, description="Per-household scale drawn from 1 +/- spread.")


class BatteryDistribution(BaseModel):
    """Battery parameters drawn uniformly within +/- spread around their means."""

    model_config = ConfigDict(frozen=True)

    capacity: float = Field(0.98, ge=0.0)
    u_min: float = Field(-0.24, le=0.0)
    u_max: float = Field(0.25, ge=0.0)
    alpha: float = Field(1.0, gt=0.0, le=1.0)
    beta: float = Field(0.95, gt=0.0, le=1.0)
    gamma: float = Field(0.95, gt=0.0, le=1.0)
    spread: float = Field(0.2, ge=0.0, lt=1.0)
    initial_soc_fraction: float = Field(0.5, ge=0.0, le=1.0)


def load_household_data(path: str | Path) -> list[Household]:
    """Read a `step,household,load_kw,gen_kw` CSV into households without batteries.

    Raises:
        DataParseError: On a malformed header or row (carries the line number).
        DataContinuityError: On a gap or duplicate step, or series of different length.
    """
    path = Path(path)
    series: dict[int, dict[int, tuple[float, float]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise DataParseError(f"expected header {','.join(HEADER)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(HEADER):
                raise DataParseError(f"expected {len(HEADER)} fields, got {len(row)}", line=line)
            try:
                step, household = int(row[0]), int(row[1])
                load, gen = float(row[2]), float(row[3])
            except ValueError as e:
                raise DataParseError(str(e), line=line) from e
            if step < 0:
                raise DataParseError(f"negative step {step}", line=line)
            if not (np.isfinite(load) and np.isfinite(gen)) or load < 0.0 or gen < 0.0:
                raise DataParseError("load and generation must be finite and non-negative", line=line)
            rows = series.setdefault(household, {})
            if step in rows:
                raise DataContinuityError(f"household {household} has a duplicate step {step} (line {line})")
            rows[step] = (load, gen)

    if not series:
        logger.warning(f"{path} contains no data rows")
        return []

    households, length = [], None
    for household_id in sorted(series):
        rows = series[household_id]
        steps = sorted(rows)
        if steps != list(range(len(steps))):
            missing = sorted(set(range(steps[-1] + 1)) - set(steps))
            raise DataContinuityError(f"household {household_id} has a gap at step {missing[0]}")
        if length is not None and len(steps) != length:
            raise DataContinuityError(f"household {household_id} has {len(steps)} steps, expected {length}")
        length = len(steps)
        values = np.array([rows[s] for s in steps])
        households.append(Household(id=household_id, load=values[:, 0], generation=values[:, 1]))
    logger.info(f"Loaded {len(households)} households with {length} steps from {path}")
    return households


def write_household_data(path: str | Path, households: Sequence[Household]) -> Path:
    """Write households in the ingestion format; floats are written exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HEADER)
        for household in households:
            for step, (load, gen) in enumerate(zip(household.load, household.generation)):
                writer.writerow([step, household.id, repr(float(load)), repr(float(gen))])
    return path


def _daily_shapes(cfg: SyntheticConfig, length: int) -> tuple[np.ndarray, np.ndarray]:
    hours = (np.arange(length) * cfg.step_hours) % 24.0
    load = (
        cfg.base_load_kw
        + cfg.morning_peak_kw * np.exp(-(((hours - 7.5) / 1.5) ** 2))
        + cfg.evening_peak_kw * np.exp(-(((hours - 19.0) / 2.0) ** 2))
    )
    daylight = (hours > 6.0) & (hours < 18.0)
    solar = np.where(daylight, cfg.solar_peak_kw * np.sin(np.pi * (hours - 6.0) / 12.0), 0.0)
    return load, np.clip(solar, 0.0, None)


def generate_synthetic(cfg: SyntheticConfig | None = None) -> list[Household]:
    """Residential load with morning and evening peaks and midday solar generation.

    Every household scales a common daily shape; with `noise` > 0 both series get
    multiplicative noise. Generation is zero at night and load stays strictly positive.
    """
    cfg = cfg or SyntheticConfig()
    steps_per_day = 24.0 / cfg.step_hours
    if abs(steps_per_day - round(steps_per_day)) > 1e-9:
        raise DataError(f"step length {cfg.step_hours} h does not divide a day")
    length = int(round(steps_per_day)) * cfg.days
    rng = np.random.default_rng(cfg.seed)
    load_shape, solar_shape = _daily_shapes(cfg, length)

    households = []
    for i in range(cfg.households):
        scale = rng.uniform(1.0 - cfg.scale_spread, 1.0 + cfg.scale_spread)
        load = scale * load_shape
        gen = scale * solar_shape
        if cfg.noise > 0.0:
            load = load * np.clip(1.0 + cfg.noise * rng.standard_normal(length), 0.1, None)
            gen = gen * np.clip(1.0 + cfg.noise * rng.standard_normal(length), 0.0, None)
        households.append(Household(id=i, load=load, generation=gen))
    return households


def _draw(rng: np.random.Generator, mean: float, spread: float) -> float:
    return float(mean * rng.uniform(1.0 - spread, 1.0 + spread))


def build_scenario(
    households: Sequence[Household],
    eta: np.ndarray,
    households_per_grid: Sequence[int],
    batteries: BatteryDistribution,
    settings: ScenarioConfig,
    name: str = "scenario",
) -> Scenario:
    """Assign households to microgrids in order and equip each with a random battery."""
    needed = sum(households_per_grid)
    if len(households) < needed:
        raise DataError(f"scenario needs {needed} households, data has {len(households)}")
    rng = np.random.default_rng(settings.rng_seed)
    microgrids, initial_soc, offset = [], [], 0
    try:
        for index, size in enumerate(households_per_grid):
            members, soc = [], []
            for household in households[offset : offset + size]:
                battery = BatteryParams(
                    alpha=batteries.alpha,
                    beta=batteries.beta,
                    gamma=batteries.gamma,
                    capacity=_draw(rng, batteries.capacity, batteries.spread),
                    u_max=_draw(rng, batteries.u_max, batteries.spread),
                    u_min=_draw(rng, batteries.u_min, batteries.spread),
                )
                members.append(household.model_copy(update={"battery": battery}))
                soc.append(batteries.initial_soc_fraction * battery.capacity)
            microgrids.append(Microgrid(index=index, households=tuple(members)))
            initial_soc.append(np.array(soc))
            offset += size
        return Scenario(
            name=name,
            topology=GridTopology(eta=eta),
            microgrids=tuple(microgrids),
            settings=settings,
            initial_soc=tuple(initial_soc),
        )
    except ValidationError as e:
        raise DataError(f"cannot build scenario {name!r}: {e}") from e
