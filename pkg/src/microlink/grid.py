from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel

from microlink.exceptions import DataRangeError, DomainError
from microlink.models import GridTopology


class TopologyViolation(BaseModel):
    """A single cell of the efficiency matrix breaking an invariant."""

    row: int
    col: int
    kind: str
    value: float


class TopologyReport(BaseModel):
    """Result of validating an efficiency matrix."""

    violations: list[TopologyViolation] = []

    @property
    def ok(self) -> bool:
        """Whether no invariant is violated."""
        return not self.violations

    def __bool__(self) -> bool:
        """Truthiness follows `ok`."""
        return self.ok

    def describe(self) -> str:
        """Human-readable list of violations."""
        return "; ".join(f"{v.kind} at ({v.row},{v.col}): {v.value:g}" for v in self.violations) or "ok"


def reference_trajectory(w_all: np.ndarray, n: int, horizon: int) -> float:
    """Overall average net consumption over the backward window ending at step `n`.

    `w_all` stacks the net consumption of every household of the smart grid, shape (I, length).
    The window covers steps n - min(n, N - 1) .. n, so early steps average over fewer samples.
    """
    w_all = np.atleast_2d(np.asarray(w_all, dtype=float))
    if w_all.shape[0] == 0:
        raise DomainError("reference trajectory needs at least one household")
    if n < 0 or n >= w_all.shape[1]:
        raise DataRangeError(f"step {n} is outside the data range [0, {w_all.shape[1] - 1}]")
    start = n - min(n, horizon - 1)
    return float(w_all[:, start : n + 1].mean())


def reference_profile(w_all: np.ndarray, k: int, horizon: int) -> np.ndarray:
    """Reference values for the prediction window k .. k + N - 1."""
    return np.array([reference_trajectory(w_all, n, horizon) for n in range(k, k + horizon)])


def average_demand(profiles: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Pointwise mean of the household power profiles of one microgrid."""
    stacked = np.asarray(profiles, dtype=float)
    if stacked.size == 0 or stacked.shape[0] == 0:
        raise DomainError("cannot average an empty collection of profiles")
    if stacked.ndim != 2:
        raise DomainError("profiles must share one length")
    return stacked.mean(axis=0)


def validate_topology(topology: GridTopology, tol: float = 0.0) -> TopologyReport:
    """Check symmetry, unit diagonal and [0, 1] entry bounds of the efficiency matrix."""
    eta = topology.eta
    violations = []
    for i in range(topology.xi):
        for j in range(topology.xi):
            value = float(eta[i, j])
            if not 0.0 - tol <= value <= 1.0 + tol:
                violations.append(TopologyViolation(row=i, col=j, kind="bounds", value=value))
            if i == j and abs(value - 1.0) > tol:
                violations.append(TopologyViolation(row=i, col=j, kind="diagonal", value=value))
            if i < j and abs(value - eta[j, i]) > tol:
                violations.append(TopologyViolation(row=i, col=j, kind="symmetry", value=value))
    return TopologyReport(violations=violations)
