from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from microlink.exceptions import DomainError, FittingError
from microlink.logger import logger

Kernel = Literal["gaussian", "multiquadric", "thin_plate"]
Tail = Literal["affine", "constant"]


class RBFConfig(BaseModel):
    """Kernel, shape, regularisation and tail of an RBF fit."""

    model_config = ConfigDict(frozen=True)

    kernel: Kernel = "gaussian"
    shape: float | None = Field(None, gt=0.0, description="Kernel shape; median pairwise distance if unset.")
    ridge: float = Field(1e-10, ge=0.0)
    tail: Tail = "affine"


def radial(r: np.ndarray, kernel: Kernel, shape: float) -> np.ndarray:
    """Evaluate the radial basis function on distances `r`."""
    scaled = np.asarray(r, dtype=float) / shape
    if kernel == "gaussian":
        return np.exp(-(scaled**2))
    if kernel == "multiquadric":
        return np.sqrt(1.0 + scaled**2)
    if kernel == "thin_plate":
        with np.errstate(divide="ignore", invalid="ignore"):
            values = scaled**2 * np.log(scaled)
        return np.where(scaled > 0.0, values, 0.0)
    raise DomainError(f"unknown kernel {kernel!r}")


@dataclass(frozen=True)
class RBFModel:
    """Weighted sum of radial basis functions plus a polynomial tail."""

    centers: np.ndarray
    weights: np.ndarray
    tail_bias: np.ndarray
    tail_matrix: np.ndarray
    kernel: Kernel
    shape: float
    tail: Tail = "affine"

    def __post_init__(self):
        """Store every array C-contiguous so evaluation does not depend on where the model came from."""
        for name in ("centers", "weights", "tail_bias", "tail_matrix"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))

    @property
    def input_dim(self) -> int:
        """Dimension of the inputs."""
        return int(self.centers.shape[1])

    @property
    def output_dim(self) -> int:
        """Dimension of the outputs."""
        return int(self.weights.shape[1])


def _tail_columns(chi: np.ndarray, tail: Tail) -> np.ndarray:
    ones = np.ones((chi.shape[0], 1))
    return np.hstack([ones, chi]) if tail == "affine" else ones


def fit_rbf(chi: np.ndarray, zbar: np.ndarray, cfg: RBFConfig | None = None) -> RBFModel:
    """Fit an RBF interpolant through the samples.

    Solves the saddle point system [K + ridge I, P; P', 0] [alpha; beta] = [zbar; 0] where K holds the
    kernel between all centers and P the tail columns.

    Raises:
        FittingError: If centers coincide, the tail is not identifiable or the system is singular.
    """
    cfg = cfg or RBFConfig()
    chi = np.atleast_2d(np.asarray(chi, dtype=float))
    zbar = np.asarray(zbar, dtype=float)
    if zbar.ndim == 1:
        zbar = zbar[:, None]
    count, dim = chi.shape
    if zbar.shape[0] != count:
        raise DomainError(f"{count} inputs but {zbar.shape[0]} outputs")
    if not (np.all(np.isfinite(chi)) and np.all(np.isfinite(zbar))):
        raise FittingError("samples contain non-finite values")

    distances = pdist(chi)
    if distances.size and distances.min() == 0.0:
        raise FittingError("duplicate centers: two samples share the same input")

    shape = cfg.shape
    if shape is None:
        shape = float(np.median(distances)) if distances.size else 1.0
        if shape <= 0.0:
            raise FittingError("cannot derive a kernel shape from coincident centers")

    P = _tail_columns(chi, cfg.tail)
    if count < P.shape[1] or np.linalg.matrix_rank(P) < P.shape[1]:
        raise FittingError(
            f"degenerate {cfg.tail} tail: {count} samples do not determine {P.shape[1]} tail coefficients"
        )

    K = radial(cdist(chi, chi), cfg.kernel, shape) + cfg.ridge * np.eye(count)
    extra = P.shape[1]
    system = np.block([[K, P], [P.T, np.zeros((extra, extra))]])
    rhs = np.vstack([zbar, np.zeros((extra, zbar.shape[1]))])
    try:
        solution = linalg.solve(system, rhs, assume_a="sym")
    except linalg.LinAlgError as e:
        raise FittingError(f"singular RBF system ({cfg.kernel} kernel, shape {shape:.3g}): {e}") from e
    if not np.all(np.isfinite(solution)):
        raise FittingError("RBF system produced non-finite coefficients")

    coefficients = solution[count:]
    tail_matrix = coefficients[1:].T if cfg.tail == "affine" else np.zeros((zbar.shape[1], dim))
    logger.debug(f"fitted {cfg.kernel} RBF on {count} centers of dimension {dim} (shape {shape:.3g})")
    return RBFModel(
        centers=chi,
        weights=solution[:count],
        tail_bias=coefficients[0],
        tail_matrix=tail_matrix,
        kernel=cfg.kernel,
        shape=shape,
        tail=cfg.tail,
    )


def eval_rbf(model: RBFModel, chi: np.ndarray) -> np.ndarray:
    """Evaluate the interpolant at one input (returns an N-profile) or a batch of inputs."""
    chi = np.asarray(chi, dtype=float)
    single = chi.ndim == 1
    chi = np.atleast_2d(chi)
    if chi.shape[1] != model.input_dim:
        raise DomainError(f"RBF model expects inputs of dimension {model.input_dim}, got {chi.shape[1]}")
    basis = radial(cdist(chi, model.centers), model.kernel, model.shape)
    values = basis @ model.weights + model.tail_bias + chi @ model.tail_matrix.T
    return values[0] if single else values
