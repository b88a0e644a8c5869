"""Bidirectional optimisation: alternate lower-level battery scheduling and upper-level exchange."""

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from microlink.admm import ADMMState, LowerResult
from microlink.battery import ControlPlan
from microlink.exceptions import DomainError, SolverError
from microlink.exchange import ExchangeConfig, ExchangeTensor, apply_exchange, solve_exchange, upper_cost
from microlink.logger import logger
from microlink.models import Scenario
from microlink.utils import parallel_map


class LowerSolver(Protocol):
    """Anything that maps (microgrid, SoC, net consumption, target) to an average demand profile."""

    kind: str

    def solve(
        self,
        mg_index: int,
        microgrid,
        x0: np.ndarray,
        w: np.ndarray,
        target: np.ndarray,
        warm: ADMMState | None = None,
    ) -> LowerResult:
        """Solve the lower-level problem of one microgrid."""
        ...


class BilevelConfig(BaseModel):
    """Iteration cap and improvement tolerance of the bidirectional scheme."""

    model_config = ConfigDict(frozen=True)

    j_max: int = Field(10, ge=1)
    eps: float = Field(1e-4, gt=0.0)
    workers: int = 1


@dataclass(frozen=True)
class LowerCall:
    """One lower-level solve, with the inputs a surrogate would see."""

    mg: int
    iteration: int
    kind: str
    elapsed: float
    transmissions: int
    iterations: int
    converged: bool
    w_bar: np.ndarray
    x0: np.ndarray
    target: np.ndarray
    zbar: np.ndarray
    phase: str = "loop"


@dataclass
class BilevelTrace:
    """Costs before and after the exchange of every iteration, plus the lower-level calls."""

    pre_costs: list[float] = field(default_factory=list)
    post_costs: list[float] = field(default_factory=list)
    safeguarded: list[float] = field(default_factory=list)
    calls: list[LowerCall] = field(default_factory=list)
    fallback_steps: list[list[int]] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        """Number of iterations recorded."""
        return len(self.post_costs)

    @property
    def transmissions(self) -> int:
        """Profiles sent between households and the central entities."""
        return sum(call.transmissions for call in self.calls)

    def record(self, pre: float, post: float, fallback: list[int]):
        """Append one iteration."""
        self.pre_costs.append(pre)
        self.post_costs.append(post)
        self.safeguarded.append(min(post, self.safeguarded[-1]) if self.safeguarded else post)
        self.fallback_steps.append(fallback)


@dataclass
class BilevelResult:
    """Best iterate of a bidirectional run."""

    zbar: np.ndarray
    delta: ExchangeTensor
    plans: list[ControlPlan | None]
    trace: BilevelTrace
    states: list[ADMMState | None]
    best_iteration: int

    @property
    def cost(self) -> float:
        """Post-exchange cost of the returned iterate."""
        return self.trace.post_costs[self.best_iteration - 1]


def updated_reference(zeta: np.ndarray, zbar: np.ndarray, zbar_plus: np.ndarray) -> np.ndarray:
    """Modified reference zeta + (zbar - zbar_plus) for the next lower-level solve."""
    zeta, zbar, zbar_plus = (np.asarray(v, dtype=float) for v in (zeta, zbar, zbar_plus))
    if not zeta.shape[-1] == zbar.shape[-1] == zbar_plus.shape[-1]:
        raise DomainError("reference and demand profiles must share length")
    return zeta + (zbar - zbar_plus)


def _solve_one(args) -> LowerResult:
    solver, index, microgrid, x0, w, target, warm = args
    return solver.solve(index, microgrid, x0, w, target, warm=warm)


def solve_lower_levels(
    scenario: Scenario,
    lowers: Sequence[LowerSolver],
    x0: Sequence[np.ndarray],
    w: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    warm: Sequence[ADMMState | None],
    trace: BilevelTrace,
    iteration: int,
    phase: str = "loop",
    workers: int = 1,
) -> list[LowerResult]:
    """Run the lower-level solve of every microgrid and log the calls into `trace`."""
    jobs = [
        (lowers[k], k, mg, x0[k], w[k], targets[k], warm[k]) for k, mg in enumerate(scenario.microgrids)
    ]
    results = parallel_map(_solve_one, jobs, workers=workers)
    for k, result in enumerate(results):
        trace.calls.append(
            LowerCall(
                mg=k,
                iteration=iteration,
                kind=lowers[k].kind,
                elapsed=result.elapsed,
                transmissions=result.transmissions,
                iterations=result.iterations,
                converged=result.converged,
                w_bar=np.asarray(w[k]).mean(axis=0),
                x0=np.asarray(x0[k], dtype=float).copy(),
                target=np.asarray(targets[k], dtype=float).copy(),
                zbar=np.asarray(result.zbar, dtype=float).copy(),
                phase=phase,
            )
        )
    return results


def run_bidirectional(
    scenario: Scenario,
    k: int,
    x0: Sequence[np.ndarray],
    w: Sequence[np.ndarray],
    zeta: np.ndarray,
    lowers: Sequence[LowerSolver],
    cfg: BilevelConfig | None = None,
    exchange_cfg: ExchangeConfig | None = None,
    warm: Sequence[ADMMState | None] | None = None,
) -> BilevelResult:
    """Iterate lower-level solves and exchange optimisation until the cost stagnates.

    Args:
        scenario: Topology and microgrids.
        k: Current MPC step, used for logging only.
        x0: SoC per household, one array per microgrid.
        w: Predicted net consumption over the horizon, one (I, N) array per microgrid.
        zeta: Reference profile over the horizon.
        lowers: Lower-level solver per microgrid.
        cfg: Iteration cap and improvement tolerance.
        exchange_cfg: Settings of the exchange NLP.
        warm: Solver states to start the first lower-level solve from.

    Returns:
        The iterate with the lowest post-exchange cost and the full trace. The first pre-exchange
        cost is the cost without coupling.
    """
    cfg = cfg or BilevelConfig()
    exchange_cfg = exchange_cfg or ExchangeConfig()
    zeta = np.asarray(zeta, dtype=float)
    xi = scenario.topology.xi
    sizes = scenario.sizes
    if len(lowers) != xi or len(x0) != xi or len(w) != xi:
        raise DomainError(f"expected one solver, SoC vector and forecast per microgrid ({xi})")
    states: list[ADMMState | None] = list(warm) if warm is not None else [None] * xi
    trace = BilevelTrace()
    best: BilevelResult | None = None

    def step(targets, iteration, previous_delta):
        nonlocal states, best
        try:
            results = solve_lower_levels(
                scenario, lowers, x0, w, targets, states, trace, iteration, workers=cfg.workers
            )
        except SolverError as e:
            raise type(e)(f"step {k}, bidirectional iteration {iteration}: {e}", last_iterate=best) from e
        states = [r.state for r in results]
        zbar = np.stack([r.zbar for r in results])
        pre = upper_cost(zbar, previous_delta, scenario.topology, zeta, sizes)
        exchange = solve_exchange(zbar, scenario.topology, zeta, sizes, exchange_cfg, initial=previous_delta)
        post = upper_cost(zbar, exchange.tensor, scenario.topology, zeta, sizes)
        trace.record(pre, post, exchange.fallback_steps)
        if best is None or post < best.cost:
            best = BilevelResult(
                zbar=zbar,
                delta=exchange.tensor,
                plans=[r.plan for r in results],
                trace=trace,
                states=states,
                best_iteration=iteration,
            )
        return zbar, exchange.tensor, post

    horizon = zeta.shape[0]
    zbar, delta, post = step([zeta] * xi, 1, ExchangeTensor.identity(xi, horizon))
    iteration = 1
    if post > cfg.eps:
        while iteration < cfg.j_max:
            shifted = apply_exchange(zbar, delta, scenario.topology, sizes)
            targets = [updated_reference(zeta, zbar[i], shifted[i]) for i in range(xi)]
            iteration += 1
            previous = post
            zbar, delta, post = step(targets, iteration, delta)
            if previous - post <= cfg.eps:
                break

    logger.debug(
        f"step {k}: bidirectional scheme stopped after {iteration} iteration(s), "
        f"cost {trace.post_costs[0]:.4g} -> {best.cost:.4g}"
    )
    return best
