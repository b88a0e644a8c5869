"""Feedforward sigmoid network trained with mini-batch Adam on mean squared error."""

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from microlink.exceptions import DomainError, TrainingError
from microlink.logger import logger

# Targets are mapped into [MARGIN, 1 - MARGIN] so the sigmoid output layer can reach them.
MARGIN = 0.1
_MIN_SPREAD = 1e-12


class TrainConfig(BaseModel):
    """Architecture and optimiser settings."""

    model_config = ConfigDict(frozen=True)

    hidden: list[int] = Field(default_factory=lambda: [10])
    epochs: int = Field(2000, ge=1)
    learning_rate: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(32, ge=1)
    validation_split: float = Field(0.2, ge=0.0, lt=1.0)
    patience: int = Field(50, ge=1)
    seed: int = 0


@dataclass(frozen=True)
class NNModel:
    """Layer weights (out, in), biases, and the input/output normalisation."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_offset: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        """Check that the layer dimensions chain."""
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DomainError("one bias vector per weight matrix is required")
        for W, b in zip(self.weights, self.biases):
            if b.shape != (W.shape[0],):
                raise DomainError("bias length must match the layer width")
        for previous, current in zip(self.weights, self.weights[1:]):
            if current.shape[1] != previous.shape[0]:
                raise DomainError("layer dimensions do not chain")

    @property
    def input_dim(self) -> int:
        """Dimension of the inputs."""
        return int(self.weights[0].shape[1])

    @property
    def output_dim(self) -> int:
        """Dimension of the outputs."""
        return int(self.weights[-1].shape[0])

    def normalise_output(self, y: np.ndarray) -> np.ndarray:
        """Map targets to the sigmoid range."""
        return (y - self.out_offset) / self.out_scale

    def denormalise_output(self, y: np.ndarray) -> np.ndarray:
        """Map network outputs back to kW."""
        return self.out_offset + self.out_scale * y


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function."""
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(weights: list[np.ndarray], biases: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer, input first; sigmoid at every layer including the output."""
    activations = [x]
    for W, b in zip(weights, biases):
        activations.append(sigmoid(activations[-1] @ W.T + b))
    return activations


def loss_and_gradients(
    weights: list[np.ndarray], biases: list[np.ndarray], x: np.ndarray, y: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared error over a batch and its gradients with respect to every W and b."""
    activations = forward(weights, biases, x)
    error = activations[-1] - y
    loss = float(np.mean(error**2))
    delta = 2.0 * error / error.size * activations[-1] * (1.0 - activations[-1])
    grad_w: list[np.ndarray] = [np.empty(0)] * len(weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        grad_w[layer] = delta.T @ activations[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer:
            a = activations[layer]
            delta = (delta @ weights[layer]) * a * (1.0 - a)
    return loss, grad_w, grad_b


def eval_nn(model: NNModel, chi: np.ndarray) -> np.ndarray:
    """Forward pass on one input (returns an N-profile) or a batch of inputs."""
    chi = np.asarray(chi, dtype=float)
    single = chi.ndim == 1
    chi = np.atleast_2d(chi)
    if chi.shape[1] != model.input_dim:
        raise DomainError(f"network expects inputs of dimension {model.input_dim}, got {chi.shape[1]}")
    output = forward(model.weights, model.biases, (chi - model.in_mean) / model.in_scale)[-1]
    values = model.denormalise_output(output)
    return values[0] if single else values


def init_layers(sizes: list[int], rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Glorot-uniform weights and zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def fit_nn(chi: np.ndarray, zbar: np.ndarray, cfg: TrainConfig | None = None) -> NNModel:
    """Train a network mapping inputs to average demand profiles.

    Normalisation is computed on the training split. Inputs are z-scored; outputs are min-max scaled
    into [MARGIN, 1 - MARGIN] instead, so every target lies inside the range of the sigmoid output layer.
    The parameters with the lowest validation loss are returned; training stops after `patience`
    epochs without improvement.

    Raises:
        TrainingError: If the loss becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    chi = np.atleast_2d(np.asarray(chi, dtype=float))
    zbar = np.asarray(zbar, dtype=float)
    if zbar.ndim == 1:
        zbar = zbar[:, None]
    count = chi.shape[0]
    if count == 0 or zbar.shape[0] != count:
        raise DomainError("training needs matching, non-empty inputs and outputs")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(count)
    n_val = int(round(cfg.validation_split * count)) if count >= 5 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    in_mean = chi[train_idx].mean(axis=0)
    in_scale = chi[train_idx].std(axis=0)
    in_scale = np.where(in_scale < _MIN_SPREAD, 1.0, in_scale)
    low = zbar[train_idx].min(axis=0)
    span = zbar[train_idx].max(axis=0) - low
    span = np.where(span < _MIN_SPREAD, 1.0, span)
    out_scale = span / (1.0 - 2.0 * MARGIN)
    out_offset = low - MARGIN * out_scale

    x = (chi - in_mean) / in_scale
    y = (zbar - out_offset) / out_scale
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = (x[val_idx], y[val_idx]) if n_val else (x_train, y_train)

    weights, biases = init_layers([chi.shape[1], *cfg.hidden, zbar.shape[1]], rng)
    params = weights + biases
    first_moment = [np.zeros_like(p) for p in params]
    second_moment = [np.zeros_like(p) for p in params]
    beta1, beta2, tiny = 0.9, 0.999, 1e-8

    best_loss, best_params, stale, step = np.inf, [p.copy() for p in params], 0, 0
    for epoch in range(1, cfg.epochs + 1):
        shuffled = rng.permutation(train_idx.size)
        for start in range(0, train_idx.size, cfg.batch_size):
            batch = shuffled[start : start + cfg.batch_size]
            loss, grad_w, grad_b = loss_and_gradients(weights, biases, x_train[batch], y_train[batch])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss in epoch {epoch}",
                    diagnostics={"epoch": epoch, "loss": loss, "learning_rate": cfg.learning_rate},
                )
            step += 1
            for i, grad in enumerate(grad_w + grad_b):
                first_moment[i] = beta1 * first_moment[i] + (1.0 - beta1) * grad
                second_moment[i] = beta2 * second_moment[i] + (1.0 - beta2) * grad**2
                m_hat = first_moment[i] / (1.0 - beta1**step)
                v_hat = second_moment[i] / (1.0 - beta2**step)
                params[i] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + tiny)

        val_loss, _, _ = loss_and_gradients(weights, biases, x_val, y_val)
        if not np.isfinite(val_loss):
            raise TrainingError(
                f"non-finite validation loss in epoch {epoch}",
                diagnostics={"epoch": epoch, "loss": val_loss, "learning_rate": cfg.learning_rate},
            )
        if val_loss < best_loss:
            best_loss, best_params, stale = val_loss, [p.copy() for p in params], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.debug(f"early stopping after {epoch} epochs")
                break

    layers = len(weights)
    logger.debug(f"trained network {[chi.shape[1], *cfg.hidden, zbar.shape[1]]}, validation loss {best_loss:.3e}")
    return NNModel(
        weights=best_params[:layers],
        biases=best_params[layers:],
        in_mean=in_mean,
        in_scale=in_scale,
        out_offset=out_offset,
        out_scale=out_scale,
    )
