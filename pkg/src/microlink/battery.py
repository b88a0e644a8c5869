from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from microlink.models import BatteryParams

DEFAULT_TOLERANCE = 1e-8


class ControlPair(NamedTuple):
    """Charging (>= 0) and discharging (<= 0) power for one step, in kW."""

    u_plus: float
    u_minus: float


@dataclass(frozen=True)
class ControlPlan:
    """Control sequences over a horizon; leading axes may stack households."""

    u_plus: np.ndarray
    u_minus: np.ndarray

    @classmethod
    def zeros(cls, shape: int | tuple[int, ...]) -> "ControlPlan":
        """Return an all-zero plan."""
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_pairs(cls, pairs: Sequence[ControlPair]) -> "ControlPlan":
        """Build a single-household plan from a list of pairs."""
        return cls(np.array([p.u_plus for p in pairs], dtype=float), np.array([p.u_minus for p in pairs], dtype=float))

    def pairs(self) -> list[ControlPair]:
        """Single-household plan as a list of pairs."""
        return [ControlPair(float(a), float(b)) for a, b in zip(np.ravel(self.u_plus), np.ravel(self.u_minus))]

    def first(self) -> "ControlPlan":
        """The first control instance of every stacked sequence."""
        return ControlPlan(self.u_plus[..., 0], self.u_minus[..., 0])

    def household(self, i: int) -> "ControlPlan":
        """Plan of household `i` in a stacked plan."""
        return ControlPlan(self.u_plus[i], self.u_minus[i])


class FeasibilityReport(NamedTuple):
    """Outcome of a feasibility check; `violation` names the first broken constraint."""

    feasible: bool
    violation: str | None = None
    step: int | None = None

    def __bool__(self) -> bool:
        """Truthiness follows `feasible`."""
        return self.feasible


@dataclass(frozen=True)
class BatteryFleet:
    """Per-household battery parameters as arrays, for vectorised evaluation."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    capacity: np.ndarray
    u_max: np.ndarray
    u_min: np.ndarray

    @classmethod
    def from_params(cls, params: Sequence[BatteryParams]) -> "BatteryFleet":
        """Stack a list of battery parameters."""
        return cls(
            alpha=np.array([p.alpha for p in params], dtype=float),
            beta=np.array([p.beta for p in params], dtype=float),
            gamma=np.array([p.gamma for p in params], dtype=float),
            capacity=np.array([p.capacity for p in params], dtype=float),
            u_max=np.array([p.u_max for p in params], dtype=float),
            u_min=np.array([p.u_min for p in params], dtype=float),
        )

    def __len__(self) -> int:
        """Number of households."""
        return int(self.alpha.shape[0])

    @property
    def has_storage(self) -> np.ndarray:
        """Mask of households with control authority."""
        return (self.capacity > 0.0) & ((self.u_max > 0.0) | (self.u_min < 0.0))

    def subset(self, mask: np.ndarray) -> "BatteryFleet":
        """Parameters of the selected households."""
        return BatteryFleet(*(getattr(self, name)[mask] for name in self.__dataclass_fields__))


def step_dynamics(x: float, u: ControlPair, p: BatteryParams, T: float) -> float:
    """State of charge after one step; never clamped."""
    return p.alpha * x + T * (p.beta * u.u_plus + u.u_minus)


def demand_profile(w, u_plus, u_minus, gamma):
    """Power demand z = w + u+ + gamma * u-; broadcasts over arrays."""
    return w + u_plus + gamma * u_minus


def output_demand(w: float, u: ControlPair, p: BatteryParams) -> float:
    """Power demand of one household for one step."""
    return demand_profile(w, u.u_plus, u.u_minus, p.gamma)


def simulate_horizon(
    x0: float, plan: ControlPlan, w: np.ndarray, p: BatteryParams, T: float
) -> tuple[np.ndarray, np.ndarray]:
    """Chain the dynamics over a horizon.

    Returns the SoC trajectory x(k) .. x(k + N) (N + 1 entries) and the demand profile z.
    """
    u_plus = np.asarray(plan.u_plus, dtype=float)
    u_minus = np.asarray(plan.u_minus, dtype=float)
    w = np.asarray(w, dtype=float)
    if not u_plus.shape == u_minus.shape == w.shape:
        raise ValueError("controls and net consumption must share length")
    soc = np.empty(w.shape[0] + 1)
    soc[0] = x0
    for n in range(w.shape[0]):
        soc[n + 1] = p.alpha * soc[n] + T * (p.beta * u_plus[n] + u_minus[n])
    return soc, demand_profile(w, u_plus, u_minus, p.gamma)


def simulate_fleet(
    x0: np.ndarray, plan: ControlPlan, w: np.ndarray, fleet: BatteryFleet, T: float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised `simulate_horizon` for stacked households; SoC has shape (I, N + 1)."""
    u_plus = np.atleast_2d(plan.u_plus)
    u_minus = np.atleast_2d(plan.u_minus)
    soc = np.empty((u_plus.shape[0], u_plus.shape[1] + 1))
    soc[:, 0] = x0
    for n in range(u_plus.shape[1]):
        soc[:, n + 1] = fleet.alpha * soc[:, n] + T * (fleet.beta * u_plus[:, n] + u_minus[:, n])
    return soc, demand_profile(w, u_plus, u_minus, fleet.gamma[:, None])


def _ratio(u: np.ndarray, bound: float, tol: float) -> np.ndarray:
    """Charging/discharging ratio with a zero bound forcing its control to zero."""
    if bound == 0.0:
        return np.where(np.abs(u) <= tol, 0.0, np.inf)
    return u / bound


def is_feasible(
    x0: float, plan: ControlPlan, p: BatteryParams, T: float, tol: float = DEFAULT_TOLERANCE
) -> FeasibilityReport:
    """Check the power bounds, the combined charge/discharge bound and the SoC bounds."""
    u_plus = np.atleast_1d(np.asarray(plan.u_plus, dtype=float))
    u_minus = np.atleast_1d(np.asarray(plan.u_minus, dtype=float))
    ratios = _ratio(u_minus, p.u_min, tol) + _ratio(u_plus, p.u_max, tol)
    soc, _ = simulate_horizon(x0, ControlPlan(u_plus, u_minus), np.zeros_like(u_plus), p, T)
    for n in range(u_plus.shape[0]):
        if not p.u_min - tol <= u_minus[n] <= tol:
            return FeasibilityReport(False, "discharge bound", n)
        if not -tol <= u_plus[n] <= p.u_max + tol:
            return FeasibilityReport(False, "charge bound", n)
        if not -tol <= ratios[n] <= 1.0 + tol:
            return FeasibilityReport(False, "combined charge/discharge bound", n)
        if not -tol <= soc[n + 1] <= p.capacity + tol:
            return FeasibilityReport(False, "state of charge bound", n + 1)
    return FeasibilityReport(True)


def fleet_feasible(
    x0: np.ndarray, plan: ControlPlan, fleet: BatteryFleet, T: float, tol: float = DEFAULT_TOLERANCE
) -> list[FeasibilityReport]:
    """Feasibility report per household of a stacked plan."""
    u_plus = np.atleast_2d(plan.u_plus)
    u_minus = np.atleast_2d(plan.u_minus)
    reports = []
    for i in range(len(fleet)):
        params = BatteryParams(
            alpha=fleet.alpha[i],
            beta=fleet.beta[i],
            gamma=fleet.gamma[i],
            capacity=fleet.capacity[i],
            u_max=fleet.u_max[i],
            u_min=fleet.u_min[i],
        )
        reports.append(is_feasible(float(x0[i]), ControlPlan(u_plus[i], u_minus[i]), params, T, tol))
    return reports
