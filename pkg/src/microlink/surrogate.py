"""Surrogates for the lower-level solver: samples, persistence, the solver adapter and the ADMM repair."""

import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from microlink.admm import ADMMState, AdmmLowerSolver, LowerResult
from microlink.bilevel import BilevelResult, LowerCall, solve_lower_levels, updated_reference
from microlink.exceptions import DomainError, ModelFormatError
from microlink.exchange import ExchangeConfig, apply_exchange, solve_exchange, upper_cost
from microlink.logger import logger
from microlink.models import Microgrid, Scenario
from microlink.nn import NNModel, eval_nn
from microlink.rbf import RBFModel, eval_rbf

FORMAT_VERSION = 1

SurrogateModel = RBFModel | NNModel


def build_input(w_bar: np.ndarray, x0: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Flatten (average net consumption, SoC, target) into one input vector of length 2N + I."""
    chi = np.concatenate([np.ravel(w_bar), np.ravel(x0), np.ravel(target)]).astype(float)
    if not np.all(np.isfinite(chi)):
        raise DomainError("surrogate input must be finite")
    return chi


@dataclass(frozen=True)
class SampleSet:
    """Input/output pairs of the lower-level mapping with their provenance."""

    chi: np.ndarray
    zbar: np.ndarray
    steps: np.ndarray
    iterations: np.ndarray
    scenario: str = "scenario"
    mg: int = 0
    phases: list[str] = field(default_factory=list)

    def __post_init__(self):
        """Check that every sample has one output and one provenance entry."""
        count = self.chi.shape[0]
        if not self.zbar.shape[0] == self.steps.shape[0] == self.iterations.shape[0] == count:
            raise DomainError("inputs, outputs and provenance must have one entry per sample")

    def __len__(self) -> int:
        """Number of samples."""
        return int(self.chi.shape[0])


def collect_samples(
    calls: Iterable[tuple[int, LowerCall]], mg: int, scenario: str = "scenario", kind: str = "admm"
) -> SampleSet:
    """One sample per lower-level solve of microgrid `mg` by the ground-truth solver.

    `calls` pairs each logged call with the MPC step it was made in; modified-reference solves
    inside the bidirectional loop are included with their own targets.
    """
    chi, zbar, steps, iterations, phases = [], [], [], [], []
    for step, call in calls:
        if call.mg != mg or call.kind != kind:
            continue
        chi.append(build_input(call.w_bar, call.x0, call.target))
        zbar.append(call.zbar)
        steps.append(step)
        iterations.append(call.iteration)
        phases.append(call.phase)
    if not chi:
        raise DomainError(f"no {kind} solves of microgrid {mg} to collect samples from")
    return SampleSet(
        chi=np.stack(chi),
        zbar=np.stack(zbar),
        steps=np.array(steps, dtype=int),
        iterations=np.array(iterations, dtype=int),
        scenario=scenario,
        mg=mg,
        phases=phases,
    )


def subsample(samples: SampleSet, stride: int) -> SampleSet:
    """Keep every `stride`-th sample starting with the first."""
    if stride < 1:
        raise DomainError("stride must be at least 1")
    keep = slice(None, None, stride)
    return SampleSet(
        chi=samples.chi[keep],
        zbar=samples.zbar[keep],
        steps=samples.steps[keep],
        iterations=samples.iterations[keep],
        scenario=samples.scenario,
        mg=samples.mg,
        phases=samples.phases[keep],
    )


def deduplicate(samples: SampleSet) -> SampleSet:
    """Drop samples whose input repeats an earlier one; order is preserved."""
    _, first = np.unique(samples.chi, axis=0, return_index=True)
    keep = np.sort(first)
    if keep.size < len(samples):
        logger.debug(f"dropped {len(samples) - keep.size} repeated samples of microgrid {samples.mg}")
    return SampleSet(
        chi=samples.chi[keep],
        zbar=samples.zbar[keep],
        steps=samples.steps[keep],
        iterations=samples.iterations[keep],
        scenario=samples.scenario,
        mg=samples.mg,
        phases=[samples.phases[i] for i in keep] if samples.phases else [],
    )


def evaluate(model: SurrogateModel, chi: np.ndarray) -> np.ndarray:
    """Evaluate either kind of surrogate."""
    if isinstance(model, RBFModel):
        return eval_rbf(model, chi)
    return eval_nn(model, chi)


def model_kind(model: SurrogateModel) -> str:
    """'rbf' or 'nn'."""
    return "rbf" if isinstance(model, RBFModel) else "nn"


def save_model(model: SurrogateModel, path: str | Path) -> Path:
    """Write a self-describing .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": np.array(FORMAT_VERSION),
        "kind": np.array(model_kind(model)),
        "input_dim": np.array(model.input_dim),
        "output_dim": np.array(model.output_dim),
    }
    if isinstance(model, RBFModel):
        arrays = {
            "centers": model.centers,
            "weights": model.weights,
            "tail_bias": model.tail_bias,
            "tail_matrix": model.tail_matrix,
            "kernel": np.array(model.kernel),
            "shape": np.array(model.shape),
            "tail": np.array(model.tail),
        }
    else:
        arrays = {
            "layers": np.array(len(model.weights)),
            "in_mean": model.in_mean,
            "in_scale": model.in_scale,
            "out_offset": model.out_offset,
            "out_scale": model.out_scale,
        }
        for i, (W, b) in enumerate(zip(model.weights, model.biases)):
            arrays[f"W{i}"] = W
            arrays[f"b{i}"] = b
    with open(path, "wb") as f:
        np.savez(f, **header, **arrays)
    logger.info(f"Saved {model_kind(model)} surrogate to {path}")
    return path


def load_model(
    path: str | Path, input_dim: int | None = None, output_dim: int | None = None, kind: str | None = None
) -> SurrogateModel:
    """Read a surrogate file, checking its version, kind and dimensions."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            content = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        raise ModelFormatError(f"cannot read surrogate file {path}: {e}") from e

    try:
        version = int(content["format_version"])
        found_kind = str(content["kind"])
        found_in, found_out = int(content["input_dim"]), int(content["output_dim"])
    except KeyError as e:
        raise ModelFormatError(f"{path} is missing the header field {e}") from e
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    if kind is not None and found_kind != kind:
        raise ModelFormatError(f"{path} holds a {found_kind} model, expected {kind}")
    if (input_dim is not None and found_in != input_dim) or (output_dim is not None and found_out != output_dim):
        raise ModelFormatError(
            f"{path} maps {found_in} -> {found_out} dimensions, expected {input_dim} -> {output_dim}"
        )

    try:
        if found_kind == "rbf":
            return RBFModel(
                centers=content["centers"],
                weights=content["weights"],
                tail_bias=content["tail_bias"],
                tail_matrix=content["tail_matrix"],
                kernel=str(content["kernel"]),
                shape=float(content["shape"]),
                tail=str(content["tail"]),
            )
        if found_kind == "nn":
            layers = int(content["layers"])
            return NNModel(
                weights=[content[f"W{i}"] for i in range(layers)],
                biases=[content[f"b{i}"] for i in range(layers)],
                in_mean=content["in_mean"],
                in_scale=content["in_scale"],
                out_offset=content["out_offset"],
                out_scale=content["out_scale"],
            )
    except (KeyError, DomainError) as e:
        raise ModelFormatError(f"{path} is not a valid {found_kind} model: {e}") from e
    raise ModelFormatError(f"{path} holds an unknown model kind {found_kind!r}")


class SurrogateLowerSolver:
    """Lower-level solver that evaluates a fitted surrogate; no communication, no controls."""

    def __init__(self, model: SurrogateModel):
        """Wrap a fitted model."""
        self.model = model
        self.kind = model_kind(model)

    def solve(
        self,
        mg_index: int,
        microgrid: Microgrid,
        x0: np.ndarray,
        w: np.ndarray,
        target: np.ndarray,
        warm: ADMMState | None = None,
    ) -> LowerResult:
        """Predict the average demand of the microgrid."""
        start = time.perf_counter()
        chi = build_input(np.asarray(w, dtype=float).mean(axis=0), x0, target)
        zbar = evaluate(self.model, chi)
        elapsed = time.perf_counter() - start
        return LowerResult(zbar=np.asarray(zbar, dtype=float), plan=None, transmissions=0, elapsed=elapsed)


def repair_with_admm(
    scenario: Scenario,
    k: int,
    x0: Sequence[np.ndarray],
    w: Sequence[np.ndarray],
    zeta: np.ndarray,
    result: BilevelResult,
    admm: AdmmLowerSolver,
    exchange_cfg: ExchangeConfig | None = None,
    warm: Sequence[ADMMState | None] | None = None,
) -> BilevelResult:
    """Repeat the reference update, the lower-level solve and the exchange once with ADMM.

    Starts from the returned iterate of a surrogate-driven run. Every microgrid is re-solved so
    the returned controls are battery-feasible; the repair iteration is appended to the trace.
    ADMM states left in `result` take precedence over `warm` as starting points.
    """
    exchange_cfg = exchange_cfg or ExchangeConfig()
    warm = list(warm) if warm is not None else [None] * scenario.topology.xi
    starts = [state if state is not None else fallback for state, fallback in zip(result.states, warm)]
    topology, sizes = scenario.topology, scenario.sizes
    shifted = apply_exchange(result.zbar, result.delta, topology, sizes)
    targets = [updated_reference(zeta, result.zbar[i], shifted[i]) for i in range(topology.xi)]
    trace = result.trace
    iteration = trace.iterations + 1
    results = solve_lower_levels(
        scenario, [admm] * topology.xi, x0, w, targets, starts, trace, iteration, phase="repair"
    )
    zbar = np.stack([r.zbar for r in results])
    pre = upper_cost(zbar, result.delta, topology, zeta, sizes)
    exchange = solve_exchange(zbar, topology, zeta, sizes, exchange_cfg, initial=result.delta)
    post = upper_cost(zbar, exchange.tensor, topology, zeta, sizes)
    trace.record(pre, post, exchange.fallback_steps)
    logger.debug(f"step {k}: repair changed the post-exchange cost {result.cost:.4g} -> {post:.4g}")
    return BilevelResult(
        zbar=zbar,
        delta=exchange.tensor,
        plans=[r.plan for r in results],
        trace=trace,
        states=[r.state for r in results],
        best_iteration=iteration,
    )
