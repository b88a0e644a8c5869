"""Upper level: energy exchange between microgrids over lossy transmission lines."""

from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import Bounds, minimize

from microlink.exceptions import DomainError
from microlink.logger import logger
from microlink.models import GridTopology
from microlink.utils import parallel_map

TIE_TOLERANCE = 1e-10
FEASIBILITY_TOLERANCE = 1e-6


class ExchangeConfig(BaseModel):
    """Settings of the per-timestep exchange NLP."""

    model_config = ConfigDict(frozen=True)

    eps: float = Field(1e-6, gt=0.0, description="Smoothing tolerance of the one-way flow constraint.")
    starts: int = Field(3, ge=1, description="Identity plus starts - 1 random feasible points.")
    seed: int = 0
    max_iter: int = Field(300, ge=1)
    ftol: float = Field(1e-12, gt=0.0)
    workers: int = 1


@dataclass(frozen=True)
class ExchangeTensor:
    """Exchange shares delta[n, nu, kappa]: share of MG nu's demand sent to MG kappa at step n."""

    delta: np.ndarray

    @classmethod
    def identity(cls, xi: int, horizon: int) -> "ExchangeTensor":
        """No exchange: every microgrid keeps its whole demand."""
        return cls(np.broadcast_to(np.eye(xi), (horizon, xi, xi)).copy())

    @property
    def horizon(self) -> int:
        """Number of steps."""
        return int(self.delta.shape[0])

    @property
    def xi(self) -> int:
        """Number of microgrids."""
        return int(self.delta.shape[1])

    def at(self, n: int) -> np.ndarray:
        """Exchange matrix of step `n`."""
        return self.delta[n]

    def violations(self, topology: GridTopology, eps: float, tol: float = FEASIBILITY_TOLERANCE) -> list[str]:
        """Names of the broken feasibility conditions; empty when feasible."""
        problems = []
        delta = self.delta
        if np.any(delta < -tol) or np.any(delta > 1.0 + tol):
            problems.append("entries outside [0, 1]")
        if np.any(np.abs(delta.sum(axis=2) - 1.0) > tol):
            problems.append("row sums differ from 1")
        if np.any(delta[:, ~topology.connected()] != 0.0):
            problems.append("exchange over a missing line")
        products = delta * np.swapaxes(delta, 1, 2)
        off = ~np.eye(self.xi, dtype=bool)
        if np.any(products[:, off] > eps + tol):
            problems.append("two-way flow")
        return problems


@dataclass(frozen=True)
class ExchangeResult:
    """Optimised exchange tensor and the steps that fell back to the identity."""

    tensor: ExchangeTensor
    fallback_steps: list[int] = field(default_factory=list)
    costs: np.ndarray | None = None


def _check_shapes(zbar: np.ndarray, topology: GridTopology, zeta: np.ndarray, sizes: np.ndarray):
    if zbar.ndim != 2 or zbar.shape[0] != topology.xi:
        raise DomainError(f"expected one demand profile per microgrid, got shape {zbar.shape}")
    if zeta.shape != (zbar.shape[1],) or sizes.shape != (topology.xi,):
        raise DomainError("reference and household counts must match the demand profiles")


def _received(zbar: np.ndarray, delta: np.ndarray, eta: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Total power arriving at each microgrid, shape (N, Xi)."""
    return np.einsum("nvk,vk,vn->nk", delta, eta, sizes[:, None] * zbar)


def step_costs(
    zbar: np.ndarray, delta: ExchangeTensor, topology: GridTopology, zeta: np.ndarray, sizes: np.ndarray
) -> np.ndarray:
    """Per-step terms of the upper-level objective, shape (N,)."""
    zbar = np.atleast_2d(np.asarray(zbar, dtype=float))
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    sizes = np.asarray(sizes, dtype=float)
    _check_shapes(zbar, topology, zeta, sizes)
    residual = zeta[:, None] * sizes[None, :] - _received(zbar, delta.delta, topology.eta, sizes)
    return (residual**2).sum(axis=1)


def upper_cost(
    zbar: np.ndarray, delta: ExchangeTensor, topology: GridTopology, zeta: np.ndarray, sizes: np.ndarray
) -> float:
    """Sum over steps and microgrids of (zeta I_kappa - received power)^2."""
    return float(step_costs(zbar, delta, topology, zeta, sizes).sum())


def apply_exchange(
    zbar: np.ndarray, delta: ExchangeTensor, topology: GridTopology, sizes: np.ndarray
) -> np.ndarray:
    """Average demand of each microgrid after the exchange, shape (Xi, N)."""
    zbar = np.atleast_2d(np.asarray(zbar, dtype=float))
    sizes = np.asarray(sizes, dtype=float)
    return (_received(zbar, delta.delta, topology.eta, sizes) / sizes[None, :]).T


class _StepProblem:
    """The exchange NLP of one timestep over the admissible entries of delta."""

    def __init__(self, zbar_n: np.ndarray, topology: GridTopology, zeta_n: float, sizes: np.ndarray, eps: float):
        self.xi = topology.xi
        self.eps = eps
        mask = topology.connected()
        self.rows, self.cols = np.nonzero(mask)
        self.index = -np.ones((self.xi, self.xi), dtype=int)
        self.index[self.rows, self.cols] = np.arange(self.rows.size)
        self.weights = topology.eta[self.rows, self.cols] * sizes[self.rows] * zbar_n[self.rows]
        self.demand = zeta_n * sizes
        self.pairs = [
            (self.index[i, j], self.index[j, i]) for i, j in zip(self.rows, self.cols) if i < j and mask[j, i]
        ]
        self.row_matrix = np.zeros((self.xi, self.rows.size))
        self.row_matrix[self.rows, np.arange(self.rows.size)] = 1.0
        self.scale = max(1.0, self.cost(self.to_vector(np.eye(self.xi))))

    def to_vector(self, matrix: np.ndarray) -> np.ndarray:
        return matrix[self.rows, self.cols].astype(float)

    def to_matrix(self, x: np.ndarray) -> np.ndarray:
        matrix = np.zeros((self.xi, self.xi))
        matrix[self.rows, self.cols] = x
        return matrix

    def _residual(self, x: np.ndarray) -> np.ndarray:
        return self.demand - np.bincount(self.cols, weights=x * self.weights, minlength=self.xi)

    def cost(self, x: np.ndarray) -> float:
        return float((self._residual(x) ** 2).sum())

    def objective(self, x: np.ndarray) -> float:
        return self.cost(x) / self.scale

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return -2.0 * self._residual(x)[self.cols] * self.weights / self.scale

    def constraints(self) -> list[dict]:
        constraints = [
            {
                "type": "eq",
                "fun": lambda x: self.row_matrix @ x - 1.0,
                "jac": lambda x: self.row_matrix,
            }
        ]
        if self.pairs:
            first = np.array([p[0] for p in self.pairs])
            second = np.array([p[1] for p in self.pairs])

            def one_way(x):
                return self.eps - x[first] * x[second]

            def one_way_jac(x):
                jac = np.zeros((len(self.pairs), x.size))
                jac[np.arange(len(self.pairs)), first] = -x[second]
                jac[np.arange(len(self.pairs)), second] = -x[first]
                return jac

            constraints.append({"type": "ineq", "fun": one_way, "jac": one_way_jac})
        return constraints

    def max_violation(self, x: np.ndarray) -> float:
        rows = np.abs(self.row_matrix @ x - 1.0).max()
        bounds = max(0.0, -x.min(), x.max() - 1.0)
        pairs = max((x[i] * x[j] - self.eps for i, j in self.pairs), default=0.0)
        return float(max(rows, bounds, pairs))

    def random_start(self, rng: np.random.Generator) -> np.ndarray:
        """A feasible point: one direction per line, Dirichlet shares per row."""
        allowed = np.zeros((self.xi, self.xi), dtype=bool)
        allowed[self.rows, self.cols] = True
        for i, j in self.pairs:
            blocked = (i, j)[int(rng.integers(2))]
            allowed[self.rows[blocked], self.cols[blocked]] = False
        matrix = np.zeros((self.xi, self.xi))
        for row in range(self.xi):
            (targets,) = np.nonzero(allowed[row])
            matrix[row, targets] = rng.dirichlet(np.ones(targets.size))
        return self.to_vector(matrix)


def round_exchange(matrix: np.ndarray, eps: float) -> np.ndarray:
    """Zero shares below sqrt(eps), keep the larger direction of each line and renormalise rows."""
    matrix = np.where(matrix < np.sqrt(eps), 0.0, np.clip(matrix, 0.0, 1.0))
    xi = matrix.shape[0]
    for i in range(xi):
        for j in range(i + 1, xi):
            if matrix[i, j] > 0.0 and matrix[j, i] > 0.0:
                if matrix[i, j] >= matrix[j, i]:
                    matrix[j, i] = 0.0
                else:
                    matrix[i, j] = 0.0
    totals = matrix.sum(axis=1)
    for row in np.nonzero(totals <= 0.0)[0]:
        matrix[row] = 0.0
        matrix[row, row] = 1.0
        totals[row] = 1.0
    return matrix / totals[:, None]


def solve_exchange_step(
    zbar_n: np.ndarray,
    topology: GridTopology,
    zeta_n: float,
    sizes: np.ndarray,
    cfg: ExchangeConfig,
    step: int = 0,
    initial: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """Optimise the exchange matrix of a single step.

    Returns the matrix and whether every NLP start failed (the identity, or `initial` if it is
    cheaper, is then returned). A feasible `initial` matrix is used as a start and kept as a candidate.
    Random starts are seeded from (cfg.seed, step) so a step solves identically on its own.
    """
    identity = np.eye(topology.xi)
    if topology.xi == 1:
        return identity, False

    zbar_n = np.asarray(zbar_n, dtype=float)
    problem = _StepProblem(zbar_n, topology, float(zeta_n), np.asarray(sizes, dtype=float), cfg.eps)
    rng = np.random.default_rng([cfg.seed, step])
    starts = [problem.to_vector(identity)] + [problem.random_start(rng) for _ in range(cfg.starts - 1)]
    bounds = Bounds(np.zeros(problem.rows.size), np.ones(problem.rows.size))

    fixed = [identity]
    if initial is not None and not np.array_equal(initial, identity):
        fixed.append(np.asarray(initial, dtype=float))
        starts.insert(1, problem.to_vector(fixed[-1]))
    candidates = list(fixed)
    for x0 in starts:
        try:
            result = minimize(
                problem.objective,
                x0,
                jac=problem.gradient,
                method="SLSQP",
                bounds=bounds,
                constraints=problem.constraints(),
                options={"maxiter": cfg.max_iter, "ftol": cfg.ftol},
            )
        except (ValueError, ArithmeticError) as e:
            logger.debug(f"exchange NLP at step {step} raised: {e}")
            continue
        if not np.all(np.isfinite(result.x)):
            continue
        if not result.success and problem.max_violation(result.x) > FEASIBILITY_TOLERANCE:
            logger.debug(f"exchange NLP at step {step} failed: {result.message}")
            continue
        candidates.append(round_exchange(problem.to_matrix(result.x), cfg.eps))

    failed = len(candidates) == len(fixed)
    if failed:
        logger.warning(f"exchange NLP failed from every start at step {step}; keeping the starting shares")

    costs = [problem.cost(problem.to_vector(c)) for c in candidates]
    best = min(costs)
    tied = [c for c, cost in zip(candidates, costs) if cost <= best + TIE_TOLERANCE]
    chosen = min(tied, key=lambda c: float(np.linalg.norm(c - identity)))
    return chosen, failed


def _solve_step(args) -> tuple[np.ndarray, bool]:
    return solve_exchange_step(*args)


def solve_exchange(
    zbar: np.ndarray,
    topology: GridTopology,
    zeta: np.ndarray,
    sizes: np.ndarray,
    cfg: ExchangeConfig | None = None,
    initial: ExchangeTensor | None = None,
) -> ExchangeResult:
    """Solve the exchange problem independently for every step of the horizon.

    `initial` (typically the shares of the previous bidirectional iteration) seeds every step.
    """
    cfg = cfg or ExchangeConfig()
    zbar = np.atleast_2d(np.asarray(zbar, dtype=float))
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    sizes = np.asarray(sizes, dtype=float)
    _check_shapes(zbar, topology, zeta, sizes)
    if not np.all(np.isfinite(zbar)):
        raise DomainError("demand profiles must be finite")

    previous = [None] * zbar.shape[1] if initial is None else [initial.at(n) for n in range(zbar.shape[1])]
    jobs = [(zbar[:, n], topology, zeta[n], sizes, cfg, n, previous[n]) for n in range(zbar.shape[1])]
    solved = parallel_map(_solve_step, jobs, workers=cfg.workers)
    matrices = [matrix for matrix, _ in solved]
    tensor = ExchangeTensor(np.stack(matrices) if matrices else np.zeros((0, topology.xi, topology.xi)))
    fallback = [n for n, (_, failed) in enumerate(solved) if failed]
    return ExchangeResult(tensor=tensor, fallback_steps=fallback, costs=step_costs(zbar, tensor, topology, zeta, sizes))
