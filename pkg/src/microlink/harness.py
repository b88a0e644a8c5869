"""Closed-loop model predictive control of the coupled microgrids and the experiments built on it."""

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from microlink.admm import ADMMConfig, ADMMState, AdmmLowerSolver, LowerResult
from microlink.battery import BatteryFleet, ControlPlan, demand_profile, fleet_feasible
from microlink.bilevel import BilevelConfig, BilevelTrace, LowerCall, LowerSolver, run_bidirectional
from microlink.exceptions import DataRangeError, DomainError, InfeasibleControlError
from microlink.exchange import ExchangeConfig, ExchangeTensor, step_costs
from microlink.grid import reference_profile
from microlink.logger import logger
from microlink.models import GridTopology, Microgrid, Scenario
from microlink.surrogate import SurrogateLowerSolver, SurrogateModel, repair_with_admm
from microlink.utils import derive_seed

SolverChoice = Literal["none", "admm", "rbf", "nn"]
SOLVER_CHOICES: tuple[str, ...] = ("none", "admm", "rbf", "nn")


@dataclass
class MPCLog:
    """Everything recorded during one closed-loop run."""

    choice: str
    steps: list[int] = field(default_factory=list)
    stage_costs: list[float] = field(default_factory=list)
    open_loop_costs: list[float] = field(default_factory=list)
    zeta: list[float] = field(default_factory=list)
    zbar: list[np.ndarray] = field(default_factory=list)
    deltas: list[np.ndarray] = field(default_factory=list)
    traces: list[BilevelTrace] = field(default_factory=list)
    transmissions: list[int] = field(default_factory=list)
    u_plus: list[list[np.ndarray]] = field(default_factory=list)
    u_minus: list[list[np.ndarray]] = field(default_factory=list)
    soc: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        """Summed closed-loop stage costs."""
        return float(np.sum(self.stage_costs))

    @property
    def total_transmissions(self) -> int:
        """Profiles communicated over the whole run."""
        return int(np.sum(self.transmissions))

    def calls(self) -> list[tuple[int, LowerCall]]:
        """Every lower-level call paired with its MPC step."""
        return [(step, call) for step, trace in zip(self.steps, self.traces) for call in trace.calls]


class DisturbanceSpec(BaseModel):
    """Uniform additive noise of magnitude 10^-p on lower-level outputs."""

    model_config = ConfigDict(frozen=True)

    p: int = Field(ge=0)
    seed: int = 0


@dataclass(frozen=True)
class TimingStats:
    """Per-call wall time of one solver kind, in seconds."""

    kind: str
    calls: int
    mean: float
    variance: float


@dataclass(frozen=True)
class PerturbationRow:
    """Costs of one disturbed (or, with p None, undisturbed) closed-loop run."""

    p: int | None
    seed: int
    open_loop_cost: float
    closed_loop_cost: float


def stage_cost(
    zeta_k: float, delta_k: np.ndarray, zbar_k: np.ndarray, topology: GridTopology, sizes: np.ndarray
) -> float:
    """Realised single-step cost of the applied exchange and average demands."""
    tensor = ExchangeTensor(np.asarray(delta_k, dtype=float)[None, :, :])
    zbar = np.asarray(zbar_k, dtype=float).reshape(-1, 1)
    return float(step_costs(zbar, tensor, topology, np.array([zeta_k]), sizes)[0])


def disturb(zbar: np.ndarray, spec: DisturbanceSpec, rng: np.random.Generator) -> np.ndarray:
    """Add 10^-p * d with d uniform on (-1, 1) to every entry."""
    zbar = np.asarray(zbar, dtype=float)
    return zbar + 10.0 ** (-spec.p) * rng.uniform(-1.0, 1.0, size=zbar.shape)


class DisturbedLowerSolver:
    """Wraps a lower-level solver and perturbs every profile it returns.

    Each draw is seeded by the disturbance seed, the microgrid and the call inputs, so the noise acts
    as a fixed mapping error and does not depend on call order or on the number of worker processes.
    """

    def __init__(self, inner: LowerSolver, spec: DisturbanceSpec):
        """Wrap `inner` with the noise level and seed of `spec`."""
        self.inner = inner
        self.spec = spec
        self.kind = inner.kind

    def call_rng(self, mg_index: int, x0: np.ndarray, w: np.ndarray, target: np.ndarray) -> np.random.Generator:
        """Generator for the draw of one lower-level call."""
        x0 = np.ascontiguousarray(x0, dtype=float)
        w = np.ascontiguousarray(w, dtype=float)
        target = np.ascontiguousarray(target, dtype=float)
        return np.random.default_rng(derive_seed(self.spec.seed, mg_index, x0, w, target))

    def solve(
        self,
        mg_index: int,
        microgrid: Microgrid,
        x0: np.ndarray,
        w: np.ndarray,
        target: np.ndarray,
        warm: ADMMState | None = None,
    ) -> LowerResult:
        """Solve with the wrapped solver, then disturb the average demand."""
        result = self.inner.solve(mg_index, microgrid, x0, w, target, warm=warm)
        return LowerResult(
            zbar=disturb(result.zbar, self.spec, self.call_rng(mg_index, x0, w, target)),
            plan=result.plan,
            transmissions=result.transmissions,
            iterations=result.iterations,
            elapsed=result.elapsed,
            converged=result.converged,
            state=result.state,
        )


def build_lowers(
    scenario: Scenario,
    choice: str,
    admm: AdmmLowerSolver,
    models: Mapping[int, SurrogateModel] | None = None,
    surrogate_grids: Sequence[int] = (0,),
) -> list[LowerSolver]:
    """One lower-level solver per microgrid: surrogates on `surrogate_grids`, ADMM elsewhere."""
    if choice not in ("admm", "rbf", "nn"):
        raise DomainError(f"no lower-level solvers for choice {choice!r}")
    lowers: list[LowerSolver] = [admm] * scenario.topology.xi
    if choice == "admm":
        return lowers
    models = models or {}
    for index in surrogate_grids:
        if index not in models:
            raise DomainError(f"choice {choice!r} needs a fitted model for microgrid {index}")
        lowers[index] = SurrogateLowerSolver(models[index])
    return lowers


def _forecast(scenario: Scenario, k: int, noise: float, rng: np.random.Generator | None) -> list[np.ndarray]:
    horizon = scenario.settings.N
    w = [mg.net_consumption()[:, k : k + horizon] for mg in scenario.microgrids]
    if noise > 0.0 and rng is not None:
        w = [profile * (1.0 + noise * rng.standard_normal(profile.shape)) for profile in w]
    return w


def run_mpc(
    scenario: Scenario,
    choice: SolverChoice,
    admm_cfg: ADMMConfig | None = None,
    exchange_cfg: ExchangeConfig | None = None,
    bilevel_cfg: BilevelConfig | None = None,
    models: Mapping[int, SurrogateModel] | None = None,
    surrogate_grids: Sequence[int] = (0,),
    lowers: Sequence[LowerSolver] | None = None,
    forecast_noise: float = 0.0,
    progress: bool = True,
) -> MPCLog:
    """Run the receding-horizon loop over the scenario's evaluation window.

    At every step the bidirectional scheme plans over the next N steps; only the first control
    and exchange are applied and the batteries advance by the true dynamics. With a surrogate
    choice the plan is repaired by one ADMM iteration before it is applied. `none` applies zero
    controls and no exchange.

    Args:
        scenario: Grid, data and time settings; the loop covers `start_step` .. `start_step + sim_length - 1`.
        choice: One of none, admm, rbf, nn.
        admm_cfg: ADMM settings for every ADMM solve including the repair.
        exchange_cfg: Settings of the exchange NLP.
        bilevel_cfg: Iteration cap and tolerance of the bidirectional scheme.
        models: Fitted surrogates keyed by microgrid index.
        surrogate_grids: Microgrids whose lower level is replaced by the surrogate.
        lowers: Explicit lower-level solvers, overriding the ones built from `choice`.
        forecast_noise: Relative Gaussian noise on predicted net consumption; 0 means perfect forecasts.
        progress: Show a progress bar.

    Raises:
        DataRangeError: If the data does not cover a prediction window.
        InfeasibleControlError: If an applied control violates the battery constraints.
    """
    if choice not in SOLVER_CHOICES:
        raise DomainError(f"unknown solver choice {choice!r}")
    settings = scenario.settings
    horizon, T = settings.N, settings.T
    admm_cfg = admm_cfg or ADMMConfig()
    exchange_cfg = exchange_cfg or ExchangeConfig()
    topology, sizes = scenario.topology, scenario.sizes
    xi = topology.xi

    last_needed = settings.start_step + settings.sim_length + horizon - 1
    if settings.sim_length and last_needed > scenario.length:
        raise DataRangeError(
            f"closed loop needs data up to step {last_needed - 1}, but only {scenario.length} steps are available"
        )

    admm = AdmmLowerSolver(admm_cfg, T)
    if choice != "none" and lowers is None:
        lowers = build_lowers(scenario, choice, admm, models, surrogate_grids)
    fleets = [BatteryFleet.from_params(mg.batteries()) for mg in scenario.microgrids]
    w_all = scenario.all_net_consumption()
    noise_rng = np.random.default_rng(settings.rng_seed) if forecast_noise > 0.0 else None

    log = MPCLog(choice=choice)
    x = [np.asarray(x0, dtype=float).copy() for x0 in scenario.initial_soc]
    warm: list[ADMMState | None] = [None] * xi
    steps = range(settings.start_step, settings.start_step + settings.sim_length)
    logger.info(f"Running {settings.sim_length} MPC steps with the {choice} lower-level solver")

    for k in tqdm(steps, desc=f"mpc[{choice}]", disable=not progress):
        w_true = [mg.net_consumption()[:, k] for mg in scenario.microgrids]
        zeta = reference_profile(w_all, k, horizon)

        if choice == "none":
            plans = [ControlPlan.zeros((mg.size, horizon)) for mg in scenario.microgrids]
            delta_k = np.eye(xi)
            trace = BilevelTrace()
            planned = None
        else:
            w = _forecast(scenario, k, forecast_noise, noise_rng)
            start = warm if admm_cfg.warm_start else None
            result = run_bidirectional(scenario, k, x, w, zeta, lowers, bilevel_cfg, exchange_cfg, warm=start)
            if choice != "admm":
                result = repair_with_admm(scenario, k, x, w, zeta, result, admm, exchange_cfg, warm=start)
            plans = result.plans
            delta_k = result.delta.at(0)
            trace = result.trace
            planned = result.cost
            warm = [s.shifted() if s is not None else None for s in result.states]

        u_plus, u_minus, realised = [], [], []
        for kappa, (plan, fleet) in enumerate(zip(plans, fleets)):
            first = plan.first()
            applied = ControlPlan(first.u_plus[:, None], first.u_minus[:, None])
            for i, report in enumerate(fleet_feasible(x[kappa], applied, fleet, T)):
                if not report:
                    raise InfeasibleControlError(
                        f"step {k}: control of household {i} in microgrid {kappa} violates the {report.violation}",
                        last_iterate=log,
                    )
            x[kappa] = fleet.alpha * x[kappa] + T * (fleet.beta * first.u_plus + first.u_minus)
            realised.append(demand_profile(w_true[kappa], first.u_plus, first.u_minus, fleet.gamma).mean())
            u_plus.append(first.u_plus)
            u_minus.append(first.u_minus)

        zbar_k = np.array(realised)
        log.steps.append(k)
        log.zeta.append(float(zeta[0]))
        log.zbar.append(zbar_k)
        log.deltas.append(np.asarray(delta_k))
        cost = stage_cost(zeta[0], delta_k, zbar_k, topology, sizes)
        log.stage_costs.append(cost)
        log.open_loop_costs.append(cost if planned is None else planned)
        log.traces.append(trace)
        log.transmissions.append(trace.transmissions)
        log.u_plus.append(u_plus)
        log.u_minus.append(u_minus)
        log.soc.append([soc.copy() for soc in x])

    logger.info(f"{choice}: summed closed-loop cost {log.total_cost:.4f}, {log.total_transmissions} transmissions")
    return log


def timing_report(logs: MPCLog | Sequence[MPCLog]) -> dict[str, TimingStats]:
    """Mean and variance of the lower-level call durations per solver kind."""
    if isinstance(logs, MPCLog):
        logs = [logs]
    durations: dict[str, list[float]] = {}
    for log in logs:
        for _, call in log.calls():
            durations.setdefault(call.kind, []).append(call.elapsed)
    return {
        kind: TimingStats(kind=kind, calls=len(values), mean=float(np.mean(values)), variance=float(np.var(values)))
        for kind, values in durations.items()
    }


def open_loop_cost(log: MPCLog) -> float:
    """Summed post-exchange cost of the applied plans."""
    return float(np.sum(log.open_loop_costs))


def perturbation_study(
    scenario: Scenario,
    p_values: Sequence[int],
    seeds: Sequence[int],
    admm_cfg: ADMMConfig | None = None,
    exchange_cfg: ExchangeConfig | None = None,
    bilevel_cfg: BilevelConfig | None = None,
    progress: bool = False,
) -> list[PerturbationRow]:
    """Closed loops with every ADMM return disturbed by 10^-p noise, plus an undisturbed baseline."""
    admm_cfg = admm_cfg or ADMMConfig()
    admm = AdmmLowerSolver(admm_cfg, scenario.settings.T)
    baseline = run_mpc(scenario, "admm", admm_cfg, exchange_cfg, bilevel_cfg, progress=progress)
    rows = [PerturbationRow(None, 0, open_loop_cost(baseline), baseline.total_cost)]
    for p in p_values:
        for seed in seeds:
            spec = DisturbanceSpec(p=p, seed=seed)
            lowers = [DisturbedLowerSolver(admm, spec)] * scenario.topology.xi
            log = run_mpc(scenario, "admm", admm_cfg, exchange_cfg, bilevel_cfg, lowers=lowers, progress=progress)
            rows.append(PerturbationRow(p, seed, open_loop_cost(log), log.total_cost))
            logger.info(f"p={p} seed={seed}: closed-loop cost {log.total_cost:.4f}")
    return rows
