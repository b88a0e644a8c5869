import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import typer
from rich.console import Console
from rich.table import Table

from microlink.config import Config
from microlink.data import build_scenario, generate_synthetic, load_household_data, write_household_data
from microlink.database import Database
from microlink.exceptions import (
    ConfigError,
    DataError,
    FittingError,
    MicrolinkError,
    ModelFormatError,
    SolverError,
    TrainingError,
)
from microlink.exports import ComparisonRow, comparison_rows, write_comparison, write_perturbation, write_run
from microlink.harness import SOLVER_CHOICES, MPCLog, perturbation_study, run_mpc
from microlink.logger import force_level, logger, set_level
from microlink.models import RunSummary, Scenario
from microlink.nn import fit_nn
from microlink.rbf import fit_rbf
from microlink.surrogate import (
    SurrogateModel,
    collect_samples,
    deduplicate,
    load_model,
    save_model,
    subsample,
)

app = typer.Typer()
console = Console()

EXIT_CODES: tuple[tuple[type[Exception] | tuple[type[Exception], ...], int], ...] = (
    (ConfigError, 2),
    (DataError, 3),
    ((SolverError, FittingError, TrainingError, ModelFormatError), 4),
)


@contextmanager
def exit_codes() -> Iterator[None]:
    """Turn library errors into the documented exit codes."""
    try:
        yield
    except MicrolinkError as e:
        code = next((code for kinds, code in EXIT_CODES if isinstance(e, kinds)), 1)
        logger.error(str(e))
        raise typer.Exit(code) from e


def load_config(path: Path, seed: int | None = None) -> Config:
    """Load and validate the config, optionally replacing its seed."""
    config = Config.load(path)
    set_level(config.log_level)
    if seed is not None:
        config = config.model_copy(update={"rng_seed": seed})
    return config


def load_scenario(config: Config, training: bool = False) -> Scenario:
    """Household data from `data_path` (or the synthetic generator) assembled into the configured grid."""
    if config.data_path:
        households = load_household_data(config.data_path)
    else:
        households = generate_synthetic(config.synthetic_config())
    return build_scenario(
        households,
        np.array(config.efficiency),
        config.households_per_grid,
        config.battery_distribution(),
        config.scenario_config(training=training),
        name=config.scenario_name,
    )


def training_key(config: Config) -> str:
    """Name the samples of the training window are stored under."""
    return f"{config.scenario_name}:train"


def run_closed_loop(
    config: Config, scenario: Scenario, solver: str, models: dict[int, SurrogateModel] | None = None
) -> MPCLog:
    """Closed loop of the scenario with the configured solver settings."""
    return run_mpc(
        scenario,
        solver,
        config.admm_config(),
        config.exchange_config(),
        config.bilevel_config(),
        models=models,
        surrogate_grids=config.surrogate_grids,
        forecast_noise=config.forecast_noise,
    )


def store_samples(db: Database, log: MPCLog, key: str, grids: list[int]):
    """Replace the stored ground-truth samples of `key` with those of an ADMM run."""
    db.truncate_samples(key)
    if not log.steps:
        return
    calls = log.calls()
    for mg in grids:
        db.save_samples(collect_samples(calls, mg, scenario=key))


def training_samples(config: Config, db: Database, source: str, refresh: bool = False) -> str:
    """Key of the samples to train on, running ADMM over the training window when they are missing."""
    if source == "simulate":
        if db.count_samples(config.scenario_name) == 0:
            raise DataError(f"no samples stored for {config.scenario_name!r}; run simulate --solver admm first")
        return config.scenario_name
    key = training_key(config)
    if refresh or db.count_samples(key) == 0:
        scenario = load_scenario(config, training=True)
        last = config.training_start + config.training_steps - 1
        logger.info(f"Collecting training samples over steps {config.training_start}..{last}")
        log = run_closed_loop(config, scenario, "admm")
        store_samples(db, log, key, list(range(len(config.households_per_grid))))
    return key


def fit_surrogates(
    config: Config, db: Database, kind: str, key: str, stride: int | None = None
) -> dict[int, SurrogateModel]:
    """Fit and save one surrogate of `kind` per surrogate microgrid."""
    models: dict[int, SurrogateModel] = {}
    for mg in config.surrogate_grids:
        samples = db.get_samples(key, mg)
        if samples is None:
            raise DataError(f"no samples of microgrid {mg} stored under {key!r}")
        step = stride or (config.rbf_stride if kind == "rbf" else config.nn_stride)
        picked = subsample(deduplicate(samples), step)
        logger.info(f"Fitting {kind} for microgrid {mg} on {len(picked)} of {len(samples)} samples")
        if kind == "rbf":
            model = fit_rbf(picked.chi, picked.zbar, config.rbf_config())
        else:
            model = fit_nn(picked.chi, picked.zbar, config.train_config())
        save_model(model, config.model_path(kind, mg))
        models[mg] = model
    return models


def load_surrogates(config: Config, kind: str) -> dict[int, SurrogateModel]:
    """Saved surrogates of `kind`, checked against the scenario's dimensions."""
    horizon = config.horizon
    return {
        mg: load_model(
            config.model_path(kind, mg),
            input_dim=2 * horizon + config.households_per_grid[mg],
            output_dim=horizon,
            kind=kind,
        )
        for mg in config.surrogate_grids
    }


def summarise(log: MPCLog, row: ComparisonRow, config_hash: str) -> RunSummary:
    """Database row of a finished run."""
    return RunSummary(
        run_id=f"{config_hash}-{log.choice}",
        solver=log.choice,
        total_cost=log.total_cost,
        mean_runtime_ms=row.mean_runtime_ms,
        transmissions=log.total_transmissions,
        steps=len(log.steps),
        config_hash=config_hash,
    )


def parse_p_values(value: str) -> list[int]:
    """Comma-separated non-negative integers."""
    try:
        values = [int(part) for part in value.split(",") if part.strip()]
    except ValueError as e:
        raise typer.BadParameter(f"expected a comma-separated list of integers, got {value!r}") from e
    if not values or any(p < 0 for p in values):
        raise typer.BadParameter("p values must be non-negative integers")
    return values


@app.command()
def gen_data(
    config_path: Path = typer.Option(Path("config.yaml"), "--config", help="Scenario configuration."),
    out: Path = typer.Option(Path("data/households.csv"), "--out", help="CSV file to write."),
    seed: int | None = typer.Option(None, "--seed", help="Override the configured seed."),
):
    """Generate synthetic household load and generation data."""
    with exit_codes():
        config = load_config(config_path, seed)
        households = generate_synthetic(config.synthetic_config())
        write_household_data(out, households)
        logger.info(f"Wrote {len(households)} households to {out}")


@app.command()
def simulate(
    config_path: Path = typer.Option(Path("config.yaml"), "--config", help="Scenario configuration."),
    out: Path = typer.Option(Path("results"), "--out", help="Directory for result CSVs."),
    seed: int | None = typer.Option(None, "--seed", help="Override the configured seed."),
    solver: str = typer.Option("admm", "--solver", help="Lower-level solver: none, admm, rbf or nn."),
):
    """Run the closed loop with one lower-level solver."""
    if solver not in SOLVER_CHOICES:
        raise typer.BadParameter(f"solver must be one of {', '.join(SOLVER_CHOICES)}", param_hint="--solver")
    with exit_codes():
        config = load_config(config_path, seed)
        config_hash = config.fingerprint()
        scenario = load_scenario(config)
        models = load_surrogates(config, solver) if solver in ("rbf", "nn") else None
        log = run_closed_loop(config, scenario, solver, models)
        write_run(out, [log], config_hash)
        db = Database(config.database)
        try:
            if solver == "admm":
                store_samples(db, log, config.scenario_name, list(range(scenario.topology.xi)))
            db.save_run(summarise(log, comparison_rows([log])[0], config_hash))
        finally:
            db.close()
        logger.info(f"Summed closed-loop cost {log.total_cost:.4f}; results in {out}")


@app.command()
def train(
    config_path: Path = typer.Option(Path("config.yaml"), "--config", help="Scenario configuration."),
    kind: str = typer.Option("rbf", "--kind", help="Surrogate kind: rbf or nn."),
    samples: str = typer.Option(
        "train", "--samples", help="Sample source: train (ADMM over the training window) or simulate."
    ),
    stride: int | None = typer.Option(None, "--stride", min=1, help="Keep every stride-th sample."),
    refresh: bool = typer.Option(False, "--refresh", help="Re-run the training window even if samples exist."),
    seed: int | None = typer.Option(None, "--seed", help="Override the configured seed."),
):
    """Fit surrogates of the lower-level solver and save them to the model directory."""
    if kind not in ("rbf", "nn"):
        raise typer.BadParameter("kind must be rbf or nn", param_hint="--kind")
    if samples not in ("train", "simulate"):
        raise typer.BadParameter("samples must be train or simulate", param_hint="--samples")
    with exit_codes():
        config = load_config(config_path, seed)
        db = Database(config.database)
        try:
            key = training_samples(config, db, samples, refresh)
            fit_surrogates(config, db, kind, key, stride)
        finally:
            db.close()


@app.command()
def compare(
    config_path: Path = typer.Option(Path("config.yaml"), "--config", help="Scenario configuration."),
    out: Path = typer.Option(Path("results"), "--out", help="Directory for result CSVs."),
    seed: int | None = typer.Option(None, "--seed", help="Override the configured seed."),
):
    """Run every solver choice on the evaluation window and tabulate the results."""
    with exit_codes():
        config = load_config(config_path, seed)
        config_hash = config.fingerprint()
        scenario = load_scenario(config)
        db = Database(config.database)
        try:
            logs = []
            for choice in SOLVER_CHOICES:
                models = None
                if choice in ("rbf", "nn"):
                    missing = [mg for mg in config.surrogate_grids if not config.model_path(choice, mg).exists()]
                    if missing:
                        logger.info(f"No {choice} surrogate for microgrids {missing}; training one")
                        models = fit_surrogates(config, db, choice, training_samples(config, db, "train"))
                    else:
                        models = load_surrogates(config, choice)
                logs.append(run_closed_loop(config, scenario, choice, models))

            rows = comparison_rows(logs)
            write_run(out, logs, config_hash)
            write_comparison(out, rows, config_hash)
            for log, row in zip(logs, rows):
                db.save_run(summarise(log, row, config_hash))
        finally:
            db.close()

        table = Table(title=f"Closed-loop comparison ({scenario.name}, config {config_hash})")
        for column in ("solver", "summed cost [kW²]", "ratio to ADMM", "runtime per call [ms]", "transmissions"):
            table.add_column(column, justify="left" if column == "solver" else "right")
        for row in rows:
            table.add_row(
                row.solver,
                f"{row.total_cost:.3f}",
                "-" if row.cost_ratio is None else f"{row.cost_ratio:.3f}",
                "-" if row.mean_runtime_ms is None else f"{row.mean_runtime_ms:.3f}",
                str(row.transmissions),
            )
        console.print(table)


@app.command()
def perturb(
    config_path: Path = typer.Option(Path("config.yaml"), "--config", help="Scenario configuration."),
    out: Path = typer.Option(Path("results"), "--out", help="Directory for result CSVs."),
    p: str = typer.Option("1,2,3,4", "--p", help="Comma-separated noise exponents; noise magnitude is 10^-p."),
    seeds: int = typer.Option(3, "--seeds", min=1, help="Disturbance seeds per exponent."),
    seed: int | None = typer.Option(None, "--seed", help="Override the configured seed."),
):
    """Disturb the ADMM solutions and record the effect on open- and closed-loop cost."""
    p_values = parse_p_values(p)
    with exit_codes():
        config = load_config(config_path, seed)
        scenario = load_scenario(config)
        rows = perturbation_study(
            scenario,
            p_values,
            list(range(config.rng_seed, config.rng_seed + seeds)),
            config.admm_config(),
            config.exchange_config(),
            config.bilevel_config(),
            progress=True,
        )
        path = write_perturbation(out, rows, config.fingerprint())
        logger.info(f"Wrote {len(rows)} perturbation runs to {path}")


@app.callback()
def main(verbose: bool = typer.Option(False, "-v", "--verbose", help="Enable verbose logging.")):
    """Microlink: bilevel scheduling of coupled microgrids."""
    force_level(logging.DEBUG if verbose else None)


if __name__ == "__main__":
    app()
