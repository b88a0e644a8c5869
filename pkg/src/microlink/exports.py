import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from microlink import __version__
from microlink.harness import MPCLog, PerturbationRow, timing_report


@dataclass(frozen=True)
class ComparisonRow:
    """One solver's line of the comparison table."""

    solver: str
    total_cost: float
    cost_ratio: float | None
    mean_runtime_ms: float | None
    transmissions: int


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write(path: Path, config_hash: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# microlink {__version__} config={config_hash}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    return path


def write_stage_costs(out: Path, logs: Sequence[MPCLog], config_hash: str) -> Path:
    """Per-step realised and planned costs."""
    rows = (
        (log.choice, step, zeta, cost, planned, transmissions)
        for log in logs
        for step, zeta, cost, planned, transmissions in zip(
            log.steps, log.zeta, log.stage_costs, log.open_loop_costs, log.transmissions
        )
    )
    header = ["solver", "step", "zeta_kw", "stage_cost_kw2", "open_loop_cost_kw2", "transmissions"]
    return _write(out / "stage_costs.csv", config_hash, header, rows)


def write_open_loop(out: Path, logs: Sequence[MPCLog], config_hash: str) -> Path:
    """Costs before and after the exchange for every bidirectional iteration."""
    rows = (
        (log.choice, step, j + 1, pre, post, safe, ";".join(str(n) for n in fallback))
        for log in logs
        for step, trace in zip(log.steps, log.traces)
        for j, (pre, post, safe, fallback) in enumerate(
            zip(trace.pre_costs, trace.post_costs, trace.safeguarded, trace.fallback_steps)
        )
    )
    header = [
        "solver",
        "step",
        "iteration",
        "pre_exchange_cost_kw2",
        "post_exchange_cost_kw2",
        "safeguarded_cost_kw2",
        "exchange_fallback_steps",
    ]
    return _write(out / "open_loop.csv", config_hash, header, rows)


def write_timings(out: Path, logs: Sequence[MPCLog], config_hash: str) -> Path:
    """Wall time of every lower-level call."""
    rows = (
        (
            log.choice,
            step,
            call.mg,
            call.iteration,
            call.phase,
            call.kind,
            call.elapsed * 1e3,
            call.iterations,
            call.converged,
            call.transmissions,
        )
        for log in logs
        for step, call in log.calls()
    )
    header = [
        "solver",
        "step",
        "mg",
        "iteration",
        "phase",
        "kind",
        "runtime_ms",
        "admm_iterations",
        "converged",
        "transmissions",
    ]
    return _write(out / "timings.csv", config_hash, header, rows)


def write_transmissions(out: Path, logs: Sequence[MPCLog], config_hash: str) -> Path:
    """Profiles communicated per step."""
    rows = ((log.choice, step, count) for log in logs for step, count in zip(log.steps, log.transmissions))
    return _write(out / "transmissions.csv", config_hash, ["solver", "step", "transmissions"], rows)


def write_run(out: Path, logs: Sequence[MPCLog], config_hash: str) -> list[Path]:
    """All per-run result files."""
    return [
        write_stage_costs(out, logs, config_hash),
        write_open_loop(out, logs, config_hash),
        write_timings(out, logs, config_hash),
        write_transmissions(out, logs, config_hash),
    ]


def comparison_rows(logs: Sequence[MPCLog]) -> list[ComparisonRow]:
    """Summed cost, ratio to the ADMM run, mean lower-level call time and transmissions per solver."""
    admm = next((log.total_cost for log in logs if log.choice == "admm"), None)
    rows = []
    for log in logs:
        timings = timing_report(log)
        kind = log.choice if log.choice in timings else "admm"
        runtime = timings[kind].mean * 1e3 if kind in timings else None
        ratio = log.total_cost / admm if admm else None
        rows.append(ComparisonRow(log.choice, log.total_cost, ratio, runtime, log.total_transmissions))
    return rows


def write_comparison(out: Path, rows: Sequence[ComparisonRow], config_hash: str) -> Path:
    """The comparison table."""
    header = ["solver", "total_cost_kw2", "cost_ratio_to_admm", "mean_runtime_ms", "transmissions"]
    body = ((r.solver, r.total_cost, r.cost_ratio, r.mean_runtime_ms, r.transmissions) for r in rows)
    return _write(out / "comparison.csv", config_hash, header, body)


def write_perturbation(out: Path, rows: Sequence[PerturbationRow], config_hash: str) -> Path:
    """Open- and closed-loop costs per disturbance exponent and seed; p is empty for the baseline."""
    baseline = next((r.closed_loop_cost for r in rows if r.p is None), None)
    body = (
        (
            r.p,
            r.seed,
            r.open_loop_cost,
            r.closed_loop_cost,
            (r.closed_loop_cost - baseline) / baseline if baseline else None,
        )
        for r in rows
    )
    header = ["p", "seed", "open_loop_cost_kw2", "closed_loop_cost_kw2", "relative_change"]
    return _write(out / "perturbation.csv", config_hash, header, body)
