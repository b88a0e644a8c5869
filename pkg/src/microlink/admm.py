"""Consensus ADMM for the battery scheduling problem of one microgrid.

The central entity minimises g(a_bar) = ||a_bar - zeta||^2 over the households' demand profiles.
Each household solves its local update as a small convex QP in normalised controls
u+ = u_max * p, u- = u_min * q with p, q in [0, 1] and p + q <= 1.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from microlink.battery import BatteryFleet, ControlPlan, demand_profile
from microlink.exceptions import DomainError, QPSolveError
from microlink.logger import logger
from microlink.models import Household, Microgrid
from microlink.qp import solve_qp_batch

# Selects the minimum-throughput control among controls with equal demand profiles.
THROUGHPUT_PENALTY = 1e-6


class ADMMConfig(BaseModel):
    """Penalty weight and termination parameters of the consensus iteration."""

    model_config = ConfigDict(frozen=True)

    rho: float = Field(1.0, gt=0.0)
    max_iters: int = Field(200, ge=1)
    primal_tol: float = Field(1e-4, gt=0.0, description="Threshold on ||z - a||_inf in kW.")
    cost_tol: float = Field(1e-6, gt=0.0, description="Threshold on the change of g(a_bar).")
    warm_start: bool = True


@dataclass(frozen=True)
class ADMMState:
    """Primal, auxiliary and dual profiles of all households, shape (I, N) each."""

    z: np.ndarray
    a: np.ndarray
    lam: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        """Check that the three blocks share one shape."""
        if not self.z.shape == self.a.shape == self.lam.shape:
            raise DomainError("z, a and lambda must share shape")

    @classmethod
    def initial(cls, w: np.ndarray) -> "ADMMState":
        """Cold start a = w, lambda = 0."""
        w = np.asarray(w, dtype=float)
        return cls(z=w.copy(), a=w.copy(), lam=np.zeros_like(w))

    def shifted(self) -> "ADMMState":
        """Move the profiles one step forward, repeating the last entry, for the next MPC step."""

        def shift(block):
            return np.concatenate([block[:, 1:], block[:, -1:]], axis=1)

        return ADMMState(z=shift(self.z), a=shift(self.a), lam=shift(self.lam), iteration=0)


@dataclass(frozen=True)
class ADMMResult:
    """Outcome of one lower-level solve."""

    zbar: np.ndarray
    plan: ControlPlan
    z: np.ndarray
    iterations: int
    transmissions: int
    converged: bool
    state: ADMMState
    residuals: list[float] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class LowerResult:
    """What a lower-level solver returns to the bidirectional scheme."""

    zbar: np.ndarray
    plan: ControlPlan | None
    transmissions: int
    iterations: int = 0
    elapsed: float = 0.0
    converged: bool = True
    state: ADMMState | None = None


def _soc_matrix(alpha: np.ndarray, horizon: int, T: float) -> np.ndarray:
    """Stacked lower-triangular maps L[n, l] = T * alpha^(n - l), shape (B, N, N)."""
    n = np.arange(horizon)
    powers = np.clip(n[:, None] - n[None, :], 0, None)
    mask = (n[:, None] >= n[None, :]).astype(float)
    return T * mask[None, :, :] * alpha[:, None, None] ** powers[None, :, :]


class LocalProblem:
    """The batched local updates of all storage households of a microgrid.

    The feasible set depends only on the batteries, the initial SoC and the horizon, so
    the constraint matrices are built once and reused across ADMM iterations.
    """

    def __init__(self, fleet: BatteryFleet, x0: np.ndarray, horizon: int, T: float):
        """Build the constraint rows for every household with control authority."""
        self.fleet = fleet
        self.horizon = horizon
        self.active = fleet.has_storage
        self.count = int(self.active.sum())
        if self.count == 0:
            return

        sub = fleet.subset(self.active)
        capacity = sub.capacity
        x0 = np.clip(np.asarray(x0, dtype=float)[self.active], 0.0, capacity)
        eye = np.eye(horizon)

        # z = w + M [p; q]
        self.mix = np.concatenate(
            [sub.u_max[:, None, None] * eye, (sub.gamma * sub.u_min)[:, None, None] * eye], axis=2
        )
        L = _soc_matrix(sub.alpha, horizon, T)
        soc = np.concatenate(
            [L * (sub.beta * sub.u_max)[:, None, None], L * sub.u_min[:, None, None]], axis=2
        ) / capacity[:, None, None]
        free = sub.alpha[:, None] ** np.arange(1, horizon + 1)[None, :] * (x0 / capacity)[:, None]

        batch = self.count
        zeros = np.zeros((batch, horizon, horizon))
        neg_eye = np.broadcast_to(-eye, (batch, horizon, horizon))
        self.G = np.concatenate(
            [
                np.concatenate([neg_eye, zeros], axis=2),
                np.concatenate([zeros, neg_eye], axis=2),
                np.broadcast_to(np.concatenate([eye, eye], axis=1), (batch, horizon, 2 * horizon)),
                soc,
                -soc,
            ],
            axis=1,
        )
        self.h = np.concatenate(
            [np.zeros((batch, 2 * horizon)), np.ones((batch, horizon)), 1.0 - free, free], axis=1
        )
        self.gram = np.einsum("bki,bkj->bij", self.mix, self.mix)
        self.u_max = sub.u_max
        self.u_min = sub.u_min

    def solve(self, lam: np.ndarray, a: np.ndarray, w: np.ndarray, rho: float) -> tuple[np.ndarray, ControlPlan]:
        """Minimise z'lam + rho/2 ||z - a||^2 over each household's feasible demand set."""
        w = np.asarray(w, dtype=float)
        z = w.copy()
        u_plus = np.zeros_like(w)
        u_minus = np.zeros_like(w)
        if self.count == 0:
            return z, ControlPlan(u_plus, u_minus)

        act = self.active
        target = lam[act] + rho * (w[act] - a[act])
        H = rho * self.gram
        f = np.einsum("bki,bk->bi", self.mix, target) + THROUGHPUT_PENALTY
        solution = solve_qp_batch(H, f, self.G, self.h)

        p = np.clip(solution.x[:, : self.horizon], 0.0, 1.0)
        q = np.clip(solution.x[:, self.horizon :], 0.0, 1.0)
        total = p + q
        over = total > 1.0
        p = np.where(over, p / np.where(over, total, 1.0), p)
        q = np.where(over, q / np.where(over, total, 1.0), q)

        u_plus[act] = self.u_max[:, None] * p
        u_minus[act] = self.u_min[:, None] * q
        z = demand_profile(w, u_plus, u_minus, self.fleet.gamma[:, None])
        return z, ControlPlan(u_plus, u_minus)


def local_z_update(
    lambda_i: np.ndarray,
    a_i: np.ndarray,
    rho: float,
    household: Household,
    x0: float,
    w_i: np.ndarray,
    T: float,
) -> tuple[np.ndarray, ControlPlan]:
    """Local update of a single household; returns its demand profile and controls."""
    w_i = np.asarray(w_i, dtype=float)
    problem = LocalProblem(BatteryFleet.from_params([household.battery]), np.array([x0]), w_i.shape[0], T)
    z, plan = problem.solve(np.atleast_2d(lambda_i), np.atleast_2d(a_i), np.atleast_2d(w_i), rho)
    return z[0], plan.household(0)


def global_a_update(z: np.ndarray, lam: np.ndarray, rho: float, zeta: np.ndarray) -> np.ndarray:
    """Closed-form minimiser of g(a_bar) - sum a_i'lam_i + rho/2 sum ||z_i - a_i||^2."""
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if z.shape != lam.shape or z.shape[-1] != np.shape(zeta)[-1]:
        raise DomainError("z, lambda and zeta must agree in shape")
    count = z.shape[0]
    shifted = z + lam / rho
    a_bar = (rho * count * shifted.mean(axis=0) + 2.0 * np.asarray(zeta)) / (rho * count + 2.0)
    return shifted - 2.0 / (rho * count) * (a_bar - zeta)


def dual_update(lam: np.ndarray, z: np.ndarray, a: np.ndarray, rho: float) -> np.ndarray:
    """Dual ascent step lam + rho (z - a)."""
    return lam + rho * (z - a)


def tracking_cost(profile: np.ndarray, zeta: np.ndarray) -> float:
    """g = ||profile - zeta||^2."""
    return float(np.sum((np.asarray(profile) - np.asarray(zeta)) ** 2))


def solve_lower_level(
    mg: Microgrid,
    x0: np.ndarray,
    w: np.ndarray,
    zeta_target: np.ndarray,
    cfg: ADMMConfig,
    T: float,
    warm: ADMMState | None = None,
) -> ADMMResult:
    """Run the three-step consensus iteration for one microgrid.

    Args:
        mg: The microgrid whose batteries are scheduled.
        x0: Initial SoC per household, shape (I,).
        w: Predicted net consumption per household, shape (I, N).
        zeta_target: Reference profile the average demand should track.
        cfg: Penalty and termination parameters.
        T: Step length in hours.
        warm: Previous state to start from; the cold start is a = w, lambda = 0.

    Returns:
        The average demand, the realising controls, and the iteration and transmission counts.
        If `max_iters` is reached, the iterate with the lowest g(z_bar) is returned, flagged as
        not converged.
    """
    w = np.asarray(w, dtype=float)
    zeta_target = np.asarray(zeta_target, dtype=float)
    count, horizon = w.shape
    if count != mg.size or zeta_target.shape != (horizon,):
        raise DomainError(f"microgrid {mg.index}: expected w of shape ({mg.size}, N) and a matching target")

    fleet = BatteryFleet.from_params(mg.batteries())
    problem = LocalProblem(fleet, x0, horizon, T)

    if problem.count == 0:
        state = ADMMState.initial(w)
        zbar = w.mean(axis=0)
        return ADMMResult(
            zbar=zbar,
            plan=ControlPlan.zeros(w.shape),
            z=w.copy(),
            iterations=1,
            transmissions=2 * count,
            converged=True,
            state=state,
            costs=[tracking_cost(zbar, zeta_target)],
            residuals=[0.0],
        )

    if warm is not None and cfg.warm_start and warm.a.shape == w.shape:
        a, lam = warm.a.copy(), warm.lam.copy()
    else:
        a, lam = w.copy(), np.zeros_like(w)

    residuals: list[float] = []
    costs: list[float] = []
    best: tuple[float, np.ndarray, ControlPlan] | None = None
    converged = False
    previous_cost = np.inf
    z, plan = w.copy(), ControlPlan.zeros(w.shape)

    for iteration in range(1, cfg.max_iters + 1):
        try:
            z, plan = problem.solve(lam, a, w, cfg.rho)
        except QPSolveError as e:
            raise QPSolveError(
                f"microgrid {mg.index}: local update failed in ADMM iteration {iteration}: {e}",
                last_iterate=ADMMState(z=z, a=a, lam=lam, iteration=iteration - 1),
            ) from e
        a = global_a_update(z, lam, cfg.rho, zeta_target)
        lam = dual_update(lam, z, a, cfg.rho)

        residual = float(np.abs(z - a).max())
        cost = tracking_cost(a.mean(axis=0), zeta_target)
        residuals.append(residual)
        costs.append(cost)

        primal_cost = tracking_cost(z.mean(axis=0), zeta_target)
        if best is None or primal_cost < best[0]:
            best = (primal_cost, z, plan)

        if residual <= cfg.primal_tol and abs(cost - previous_cost) <= cfg.cost_tol:
            converged = True
            break
        previous_cost = cost

    state = ADMMState(z=z, a=a, lam=lam, iteration=iteration)
    if converged:
        logger.debug(f"ADMM for microgrid {mg.index} converged after {iteration} iterations")
    else:
        logger.warning(
            f"ADMM for microgrid {mg.index} hit max_iters={cfg.max_iters} "
            f"(residual {residuals[-1]:.2e}); returning the best iterate"
        )
        _, z, plan = best

    return ADMMResult(
        zbar=z.mean(axis=0),
        plan=plan,
        z=z,
        iterations=iteration,
        transmissions=2 * count * iteration,
        converged=converged,
        state=state,
        residuals=residuals,
        costs=costs,
    )


class AdmmLowerSolver:
    """Lower-level solver backed by consensus ADMM; holds no state between calls."""

    kind = "admm"

    def __init__(self, cfg: ADMMConfig, T: float):
        """Store the ADMM configuration and step length."""
        self.cfg = cfg
        self.T = T

    def solve(
        self,
        mg_index: int,
        microgrid: Microgrid,
        x0: np.ndarray,
        w: np.ndarray,
        target: np.ndarray,
        warm: ADMMState | None = None,
    ) -> LowerResult:
        """Solve the lower-level problem of one microgrid and time the call."""
        start = time.perf_counter()
        result = solve_lower_level(microgrid, x0, w, target, self.cfg, self.T, warm=warm)
        elapsed = time.perf_counter() - start
        return LowerResult(
            zbar=result.zbar,
            plan=result.plan,
            transmissions=result.transmissions,
            iterations=result.iterations,
            elapsed=elapsed,
            converged=result.converged,
            state=result.state,
        )
