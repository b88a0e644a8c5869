import numpy as np
import pytest

from microlink.admm import ADMMConfig, ADMMState, AdmmLowerSolver, LowerResult
from microlink.battery import BatteryFleet, fleet_feasible
from microlink.bilevel import BilevelConfig, LowerCall, run_bidirectional
from microlink.exceptions import DomainError, ModelFormatError
from microlink.grid import reference_profile
from microlink.nn import TrainConfig, fit_nn
from microlink.rbf import RBFConfig, fit_rbf
from microlink.surrogate import (
    FORMAT_VERSION,
    SampleSet,
    SurrogateLowerSolver,
    build_input,
    collect_samples,
    deduplicate,
    evaluate,
    load_model,
    repair_with_admm,
    save_model,
    subsample,
)


class RecordingAdmm(AdmmLowerSolver):
    """ADMM that remembers the start state of every call."""

    def __init__(self, *args, **kwargs):
        """Set up the solver and an empty record."""
        super().__init__(*args, **kwargs)
        self.starts = {}

    def solve(self, mg_index, microgrid, x0, w, target, warm=None):
        """Record `warm`, then solve."""
        self.starts[mg_index] = warm
        return super().solve(mg_index, microgrid, x0, w, target, warm=warm)


class Offset:
    """Answers every target with the target shifted by a constant."""

    kind = "stub"

    def __init__(self, shift):
        """Store the shift in kW."""
        self.shift = shift

    def solve(self, mg_index, microgrid, x0, w, target, warm=None):
        """Return the shifted target."""
        return LowerResult(zbar=np.asarray(target, dtype=float) + self.shift, plan=None, transmissions=0)


def _call(mg, iteration, kind="admm", phase="loop", horizon=3, households=2):
    return LowerCall(
        mg=mg,
        iteration=iteration,
        kind=kind,
        elapsed=0.0,
        transmissions=0,
        iterations=1,
        converged=True,
        w_bar=np.full(horizon, float(iteration)),
        x0=np.zeros(households),
        target=np.ones(horizon),
        zbar=np.full(horizon, 0.1 * iteration),
        phase=phase,
    )


def _samples(count, dim=4, outputs=2):
    return SampleSet(
        chi=np.arange(count * dim, dtype=float).reshape(count, dim),
        zbar=np.zeros((count, outputs)),
        steps=np.arange(count),
        iterations=np.ones(count, dtype=int),
        phases=["loop"] * count,
    )


def test_build_input_layout():
    """Average net consumption, then SoC, then target."""
    chi = build_input(np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.4]), np.array([7.0, 8.0, 9.0]))
    assert chi.shape == (2 * 3 + 2,)
    assert np.array_equal(chi, [1.0, 2.0, 3.0, 0.5, 0.4, 7.0, 8.0, 9.0])


def test_build_input_rejects_nan():
    """Inputs must be finite."""
    with pytest.raises(DomainError):
        build_input(np.array([np.nan]), np.zeros(1), np.zeros(1))


def test_collect_samples_filters_by_grid_and_kind():
    """Only ground-truth solves of the requested microgrid become samples."""
    calls = [
        (10, _call(0, 1)),
        (10, _call(1, 1)),
        (10, _call(0, 2)),
        (11, _call(0, 1, kind="rbf")),
        (11, _call(0, 3, phase="repair")),
    ]
    samples = collect_samples(calls, mg=0, scenario="demo")
    assert len(samples) == 3
    assert samples.chi.shape == (3, 2 * 3 + 2)
    assert list(samples.steps) == [10, 10, 11]
    assert list(samples.iterations) == [1, 2, 3]
    assert samples.phases == ["loop", "loop", "repair"]
    assert np.allclose(samples.zbar[1], 0.2)
    assert samples.scenario == "demo"


def test_collect_samples_needs_calls():
    """No matching calls is an error."""
    with pytest.raises(DomainError):
        collect_samples([(0, _call(1, 1))], mg=0)


@pytest.mark.parametrize("count, stride, expected", [(4540, 25, 182), (10, 1, 10), (10, 3, 4), (1, 5, 1)])
def test_subsample_sizes(count, stride, expected):
    """Every stride-th sample, first included."""
    kept = subsample(_samples(count), stride)
    assert len(kept) == expected
    assert kept.steps[0] == 0
    assert len(kept.phases) == expected


def test_subsample_rejects_zero_stride():
    """The stride is at least one."""
    with pytest.raises(DomainError):
        subsample(_samples(3), 0)


def test_deduplicate_keeps_first_occurrences():
    """Repeated inputs, as produced by an identity exchange, are dropped in order."""
    samples = _samples(4)
    chi = samples.chi.copy()
    chi[2] = chi[0]
    repeated = SampleSet(
        chi=chi, zbar=np.arange(4.0)[:, None], steps=np.arange(4), iterations=np.arange(4), phases=list("abcd")
    )
    kept = deduplicate(repeated)
    assert list(kept.steps) == [0, 1, 3]
    assert kept.phases == ["a", "b", "d"]
    assert np.array_equal(kept.zbar[:, 0], [0.0, 1.0, 3.0])


def test_sample_set_shapes_must_agree():
    """One output per input."""
    with pytest.raises(DomainError):
        SampleSet(chi=np.zeros((3, 2)), zbar=np.zeros((2, 1)), steps=np.arange(3), iterations=np.arange(3))


def test_rbf_file_round_trip(tmp_path, rng):
    """A saved RBF evaluates identically after loading."""
    model = fit_rbf(rng.uniform(size=(20, 5)), rng.normal(size=(20, 3)), RBFConfig(kernel="multiquadric"))
    path = save_model(model, tmp_path / "models" / "rbf_mg0.npz")
    loaded = load_model(path, input_dim=5, output_dim=3, kind="rbf")
    inputs = rng.uniform(size=(4, 5))
    assert np.array_equal(evaluate(loaded, inputs), evaluate(model, inputs))
    assert loaded.kernel == "multiquadric"


@pytest.mark.parametrize("tail", ["affine", "constant"])
def test_rbf_reload_is_bit_identical(tmp_path, rng, tail):
    """Fitted and reloaded models share their memory layout and give the same bits on a batch."""
    model = fit_rbf(rng.uniform(size=(40, 7)), rng.normal(size=(40, 3)), RBFConfig(tail=tail))
    loaded = load_model(save_model(model, tmp_path / "rbf.npz"), kind="rbf")
    for name in ("centers", "weights", "tail_bias", "tail_matrix"):
        assert getattr(model, name).flags.c_contiguous
        assert getattr(loaded, name).flags.c_contiguous
    inputs = rng.uniform(size=(25, 7))
    assert np.array_equal(evaluate(loaded, inputs), evaluate(model, inputs))


def test_nn_file_round_trip(tmp_path, rng):
    """A saved network evaluates identically after loading."""
    model = fit_nn(rng.normal(size=(30, 4)), rng.normal(size=(30, 2)), TrainConfig(epochs=3, hidden=[5, 3]))
    loaded = load_model(save_model(model, tmp_path / "nn.npz"), input_dim=4, output_dim=2, kind="nn")
    inputs = rng.normal(size=4)
    assert np.array_equal(evaluate(loaded, inputs), evaluate(model, inputs))
    assert len(loaded.weights) == 3


def test_load_rejects_wrong_dimensions(tmp_path, rng):
    """A model for another horizon is refused."""
    path = save_model(fit_rbf(rng.uniform(size=(10, 3)), rng.normal(size=(10, 2))), tmp_path / "m.npz")
    with pytest.raises(ModelFormatError, match="dimensions"):
        load_model(path, input_dim=4, output_dim=2)


def test_load_rejects_wrong_kind(tmp_path, rng):
    """An RBF file is not a network."""
    path = save_model(fit_rbf(rng.uniform(size=(10, 3)), rng.normal(size=(10, 2))), tmp_path / "m.npz")
    with pytest.raises(ModelFormatError, match="expected nn"):
        load_model(path, kind="nn")


def test_load_rejects_unknown_version(tmp_path):
    """Files from another format version are refused."""
    path = tmp_path / "old.npz"
    np.savez(path, format_version=np.array(FORMAT_VERSION + 1), kind=np.array("rbf"), input_dim=1, output_dim=1)
    with pytest.raises(ModelFormatError, match="format version"):
        load_model(path)


def test_load_rejects_missing_fields(tmp_path):
    """A header without the model arrays is refused."""
    path = tmp_path / "empty.npz"
    np.savez(path, format_version=np.array(FORMAT_VERSION), kind=np.array("nn"), input_dim=1, output_dim=1)
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_load_rejects_garbage(tmp_path):
    """Missing and non-npz files are format errors."""
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "missing.npz")
    junk = tmp_path / "junk.npz"
    junk.write_text("not a model")
    with pytest.raises(ModelFormatError):
        load_model(junk)


def test_surrogate_solver_sends_nothing(scenario, rng):
    """Surrogate evaluations produce a profile without communication or controls."""
    horizon = scenario.settings.N
    mg = scenario.microgrids[0]
    dim = 2 * horizon + mg.size
    model = fit_rbf(rng.uniform(size=(30, dim)), rng.normal(size=(30, horizon)))
    solver = SurrogateLowerSolver(model)
    w = mg.net_consumption()[:, :horizon]
    result = solver.solve(0, mg, scenario.initial_soc[0], w, np.zeros(horizon))
    assert solver.kind == "rbf"
    assert result.transmissions == 0
    assert result.plan is None
    assert result.zbar.shape == (horizon,)
    chi = build_input(w.mean(axis=0), scenario.initial_soc[0], np.zeros(horizon))
    assert np.allclose(result.zbar, evaluate(model, chi))


@pytest.mark.parametrize("shift", [-10.0 + i for i in range(21) if i != 10])
def test_repair_fixes_a_bad_surrogate(scenario, shift):
    """A surrogate that is off by several kW still yields feasible controls and no worse exchange."""
    settings = scenario.settings
    k, horizon = settings.start_step, settings.N
    x0 = list(scenario.initial_soc)
    w = [mg.net_consumption()[:, k : k + horizon] for mg in scenario.microgrids]
    zeta = reference_profile(scenario.all_net_consumption(), k, horizon)
    admm = AdmmLowerSolver(ADMMConfig(), settings.T)

    result = run_bidirectional(scenario, k, x0, w, zeta, [Offset(shift), admm], BilevelConfig(j_max=3))
    loop_iterations = result.trace.iterations
    repaired = repair_with_admm(scenario, k, x0, w, zeta, result, admm)

    trace = repaired.trace
    assert trace.iterations == loop_iterations + 1
    assert repaired.best_iteration == trace.iterations
    assert repaired.cost <= trace.pre_costs[-1] + 1e-6
    assert [call.phase for call in trace.calls[-2:]] == ["repair", "repair"]
    assert all(call.kind == "admm" for call in trace.calls[-2:])
    for x, plan, mg in zip(x0, repaired.plans, scenario.microgrids):
        assert plan is not None
        fleet = BatteryFleet.from_params(mg.batteries())
        assert all(fleet_feasible(x, plan, fleet, settings.T, tol=1e-6))


def test_repair_starts_from_the_warm_states(scenario):
    """Surrogate microgrids start the repair from the given state, ADMM microgrids from their last solve."""
    settings = scenario.settings
    k, horizon = settings.start_step, settings.N
    x0 = list(scenario.initial_soc)
    w = [mg.net_consumption()[:, k : k + horizon] for mg in scenario.microgrids]
    zeta = reference_profile(scenario.all_net_consumption(), k, horizon)
    admm = AdmmLowerSolver(ADMMConfig(), settings.T)
    result = run_bidirectional(scenario, k, x0, w, zeta, [Offset(0.5), admm], BilevelConfig(j_max=2))
    warm = [ADMMState.initial(w[0]), ADMMState.initial(w[1])]

    recorder = RecordingAdmm(ADMMConfig(), settings.T)
    repair_with_admm(scenario, k, x0, w, zeta, result, recorder, warm=warm)
    assert recorder.starts[0] is warm[0]
    assert recorder.starts[1] is result.states[1]

    cold = RecordingAdmm(ADMMConfig(), settings.T)
    repair_with_admm(scenario, k, x0, w, zeta, result, cold)
    assert cold.starts[0] is None
