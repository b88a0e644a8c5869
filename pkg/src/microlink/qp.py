"""Batched primal-dual interior point method for small dense convex QPs.

Each problem of the batch reads

    minimize    0.5 * x' H x + f' x
    subject to  G x <= h

with H positive semidefinite and G x <= h describing a bounded polytope. All problems share
dimensions, so every Newton step is a single stacked linear solve.
"""

from dataclasses import dataclass

import numpy as np

from microlink.exceptions import QPSolveError
from microlink.logger import logger

# Step back from the boundary, Mehrotra heuristic.
_STEP_FRACTION = 0.99
_REGULARIZATION = 1e-13


@dataclass(frozen=True)
class QPSolution:
    """Primal/dual iterates and per-problem convergence information."""

    x: np.ndarray
    multipliers: np.ndarray
    slacks: np.ndarray
    iterations: int
    converged: np.ndarray
    kkt_residual: np.ndarray


def _bmv(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    return np.einsum("bij,bj->bi", matrix, vector)


def _bmtv(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    return np.einsum("bij,bi->bj", matrix, vector)


def _max_step(values: np.ndarray, direction: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(direction < 0.0, -values / direction, np.inf)
    return np.minimum(1.0, ratios.min(axis=1))


def _residuals(H, f, G, h, x, z, s):
    dual = _bmv(H, x) + f + _bmtv(G, z)
    primal = _bmv(G, x) + s - h
    gap = (s * z).sum(axis=1) / s.shape[1]
    scaled = np.maximum.reduce(
        [
            np.abs(dual).max(axis=1) / (1.0 + np.abs(f).max(axis=1)),
            np.abs(primal).max(axis=1) / (1.0 + np.abs(h).max(axis=1)),
            gap,
        ]
    )
    return dual, primal, gap, scaled


def solve_qp_batch(
    H: np.ndarray,
    f: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
    accept_tol: float = 1e-6,
) -> QPSolution:
    """Solve a batch of inequality-constrained QPs with Mehrotra's predictor-corrector.

    Problems whose scaled KKT residual drops below `tol` are frozen while the others keep
    iterating. At the iteration cap, problems above `accept_tol` raise `QPSolveError`.
    """
    batch, n = f.shape
    m = h.shape[1]
    eye = np.eye(n)[None, :, :]
    x = np.zeros((batch, n))
    s = np.maximum(h - _bmv(G, x), 1.0)
    z = np.ones((batch, m))

    iterations = 0
    for iterations in range(1, max_iter + 1):
        dual, primal, gap, scaled = _residuals(H, f, G, h, x, z, s)
        active = scaled > tol
        if not active.any():
            break

        weights = z / s
        kkt = H + np.einsum("bmi,bm,bmj->bij", G, weights, G) + _REGULARIZATION * eye

        def newton(complementarity):
            rhs = -dual + _bmtv(G, (complementarity - z * primal) / s)
            dx = np.linalg.solve(kkt, rhs[..., None])[..., 0]
            ds = -primal - _bmv(G, dx)
            dz = (-complementarity - z * ds) / s
            return dx, ds, dz

        dx_aff, ds_aff, dz_aff = newton(s * z)
        step_aff = np.minimum(_max_step(s, ds_aff), _max_step(z, dz_aff))
        gap_aff = ((s + step_aff[:, None] * ds_aff) * (z + step_aff[:, None] * dz_aff)).sum(axis=1) / m
        sigma = np.clip(gap_aff / np.maximum(gap, 1e-300), 0.0, 1.0) ** 3

        dx, ds, dz = newton(s * z + ds_aff * dz_aff - (sigma * gap)[:, None])
        step = _STEP_FRACTION * np.minimum(_max_step(s, ds), _max_step(z, dz))
        step = np.minimum(step, 1.0) * active

        x = x + step[:, None] * dx
        s = np.maximum(s + step[:, None] * ds, 1e-300)
        z = np.maximum(z + step[:, None] * dz, 1e-300)

    _, _, _, scaled = _residuals(H, f, G, h, x, z, s)
    converged = scaled <= tol
    if not np.all(scaled <= accept_tol):
        worst = int(np.argmax(scaled))
        raise QPSolveError(
            f"QP batch did not converge after {iterations} iterations (worst KKT residual {scaled[worst]:.2e})",
            last_iterate=x,
        )
    if not converged.all():
        logger.debug(f"QP batch accepted {int((~converged).sum())} problem(s) at KKT residual {scaled.max():.2e}")
    return QPSolution(x=x, multipliers=z, slacks=s, iterations=iterations, converged=converged, kkt_residual=scaled)
