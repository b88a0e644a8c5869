import numpy as np
import pytest
from scipy.optimize import minimize

from microlink.admm import (
    ADMMConfig,
    ADMMState,
    AdmmLowerSolver,
    dual_update,
    global_a_update,
    local_z_update,
    solve_lower_level,
    tracking_cost,
)
from microlink.battery import BatteryFleet, fleet_feasible
from microlink.models import BatteryParams, Household, Microgrid

TIGHT = ADMMConfig(rho=1.0, max_iters=1000, primal_tol=1e-6, cost_tol=1e-10)


def _microgrid(params, horizon):
    households = tuple(
        Household(id=i, battery=p, load=np.ones(horizon), generation=np.zeros(horizon)) for i, p in enumerate(params)
    )
    return Microgrid(index=0, households=households)


def _random_battery(rng):
    return BatteryParams(
        alpha=rng.uniform(0.9, 1.0),
        beta=rng.uniform(0.85, 1.0),
        gamma=rng.uniform(0.85, 1.0),
        capacity=rng.uniform(0.5, 1.5),
        u_max=rng.uniform(0.1, 0.4),
        u_min=-rng.uniform(0.1, 0.4),
    )


def _soc_rows(fleet, x0, horizon, T):
    """Per-household functions returning the SoC trajectory for normalised controls."""

    def soc(i, p, q):
        values, x = [], x0[i]
        for n in range(horizon):
            x = fleet.alpha[i] * x + T * (fleet.beta[i] * fleet.u_max[i] * p[n] + fleet.u_min[i] * q[n])
            values.append(x)
        return np.array(values)

    return soc


def _centralised_optimum(params, x0, w, zeta, T):
    """Minimise ||mean demand - zeta||^2 over all households' controls at once."""
    fleet = BatteryFleet.from_params(params)
    count, horizon = w.shape
    soc = _soc_rows(fleet, x0, horizon, T)

    def split(v):
        v = v.reshape(count, 2, horizon)
        return v[:, 0], v[:, 1]

    def objective(v):
        p, q = split(v)
        z = w + fleet.u_max[:, None] * p + fleet.gamma[:, None] * fleet.u_min[:, None] * q
        return tracking_cost(z.mean(axis=0), zeta)

    constraints = []
    for i in range(count):
        constraints.append({"type": "ineq", "fun": lambda v, i=i: 1.0 - split(v)[0][i] - split(v)[1][i]})
        constraints.append({"type": "ineq", "fun": lambda v, i=i: soc(i, split(v)[0][i], split(v)[1][i])})
        constraints.append(
            {"type": "ineq", "fun": lambda v, i=i: fleet.capacity[i] - soc(i, split(v)[0][i], split(v)[1][i])}
        )
    result = minimize(
        objective,
        np.zeros(2 * count * horizon),
        method="SLSQP",
        bounds=[(0.0, 1.0)] * (2 * count * horizon),
        constraints=constraints,
        options={"maxiter": 1000, "ftol": 1e-14},
    )
    return float(result.fun)


def test_a_update_at_consensus():
    """With zero multipliers and every z at the reference, a equals z."""
    zeta = np.array([0.2, -0.1, 0.4])
    z = np.tile(zeta, (3, 1))
    assert np.allclose(global_a_update(z, np.zeros_like(z), 1.5, zeta), z)


def test_a_update_scalar():
    """I = N = 1: minimiser of (a - zeta)^2 - a lam + rho/2 (z - a)^2."""
    z, lam, rho, zeta = 0.8, 0.3, 2.0, 0.1
    expected = (2.0 * zeta + lam + rho * z) / (2.0 + rho)
    assert global_a_update(np.array([[z]]), np.array([[lam]]), rho, np.array([zeta]))[0, 0] == pytest.approx(expected)


def test_a_update_matches_numerical_minimum(rng):
    """Closed form against a quasi-Newton solve."""
    count, horizon, rho = 3, 4, 0.7
    z = rng.normal(size=(count, horizon))
    lam = rng.normal(size=(count, horizon))
    zeta = rng.normal(size=horizon)

    def objective(flat):
        a = flat.reshape(count, horizon)
        return tracking_cost(a.mean(axis=0), zeta) - np.sum(a * lam) + 0.5 * rho * np.sum((z - a) ** 2)

    numeric = minimize(objective, z.ravel(), method="BFGS", options={"gtol": 1e-10}).x.reshape(count, horizon)
    assert np.allclose(global_a_update(z, lam, rho, zeta), numeric, atol=1e-5)


def test_dual_update():
    """Dual ascent examples."""
    lam = np.array([[1.0]])
    assert np.array_equal(dual_update(lam, np.array([[0.5]]), np.array([[0.5]]), 3.0), lam)
    assert np.allclose(dual_update(np.zeros((1, 2)), np.array([[1.0, 2.0]]), np.array([[0.5, 0.0]]), 1.0), [[0.5, 2.0]])
    assert dual_update(lam, np.array([[1.0]]), np.array([[0.5]]), 2.0)[0, 0] == pytest.approx(2.0)


def test_local_update_without_storage():
    """A household without a battery keeps z = w."""
    household = Household(id=0, load=np.ones(3), generation=np.zeros(3))
    w = np.array([0.5, -0.2, 0.1])
    z, plan = local_z_update(np.ones(3), np.zeros(3), 1.0, household, 0.0, w, 0.5)
    assert np.array_equal(z, w)
    assert not plan.u_plus.any() and not plan.u_minus.any()


def test_local_update_at_target(battery):
    """lambda = 0 and a = w: doing nothing is optimal."""
    household = Household(id=0, battery=battery, load=np.ones(4), generation=np.zeros(4))
    w = np.array([0.5, -0.2, 0.1, 0.3])
    z, plan = local_z_update(np.zeros(4), w, 1.0, household, 0.5, w, 0.5)
    assert np.allclose(z, w, atol=1e-4)
    assert np.allclose(plan.u_plus, 0.0, atol=1e-3)
    assert np.allclose(plan.u_minus, 0.0, atol=1e-3)


def test_local_update_matches_dense_solve(battery, rng):
    """N = 2 local problem against SLSQP over the physical controls."""
    T, rho = 0.5, 1.3
    household = Household(id=0, battery=battery, load=np.ones(2), generation=np.zeros(2))
    w, lam, a = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
    x0 = 0.4

    def objective(u):
        z = w + u[:2] + battery.gamma * u[2:]
        return float(z @ lam + 0.5 * rho * np.sum((z - a) ** 2))

    def soc(u):
        x1 = battery.alpha * x0 + T * (battery.beta * u[0] + u[2])
        x2 = battery.alpha * x1 + T * (battery.beta * u[1] + u[3])
        return np.array([x1, x2])

    constraints = [
        {"type": "ineq", "fun": lambda u: 1.0 - u[:2] / battery.u_max - u[2:] / battery.u_min},
        {"type": "ineq", "fun": soc},
        {"type": "ineq", "fun": lambda u: battery.capacity - soc(u)},
    ]
    bounds = [(0.0, battery.u_max)] * 2 + [(battery.u_min, 0.0)] * 2
    oracle = minimize(
        objective,
        np.zeros(4),
        method="SLSQP",
        bounds=bounds,
        constraints=constraints,
        options={"ftol": 1e-14, "maxiter": 500},
    )

    z, plan = local_z_update(lam, a, rho, household, x0, w, T)
    value = float(z @ lam + 0.5 * rho * np.sum((z - a) ** 2))
    assert value == pytest.approx(oracle.fun, abs=1e-5)


def test_battery_free_microgrid_short_circuits():
    """Without storage the average demand is the average net consumption after one iteration."""
    mg = _microgrid([BatteryParams.none(), BatteryParams.none()], 3)
    w = np.array([[0.2, 0.4, 0.6], [0.0, 0.2, -0.2]])
    result = solve_lower_level(mg, np.zeros(2), w, np.zeros(3), ADMMConfig(), 0.5)
    assert np.allclose(result.zbar, w.mean(axis=0))
    assert result.iterations == 1
    assert result.transmissions == 4


def test_reference_equal_to_uncontrolled_average(battery):
    """Tracking w_bar itself costs nothing and needs no control."""
    mg = _microgrid([battery, battery], 3)
    w = np.array([[0.2, 0.4, 0.6], [0.0, 0.2, -0.2]])
    result = solve_lower_level(mg, np.full(2, 0.5), w, w.mean(axis=0), ADMMConfig(), 0.5)
    assert tracking_cost(result.zbar, w.mean(axis=0)) == pytest.approx(0.0, abs=1e-8)
    assert np.allclose(result.plan.u_plus, 0.0, atol=1e-3)


def test_admm_matches_centralised_optimum(rng):
    """Random small instances: ADMM reaches the centralised optimum of the tracking cost."""
    T = 0.5
    for _ in range(50):
        count, horizon = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        params = [_random_battery(rng) for _ in range(count)]
        x0 = np.array([rng.uniform(0.0, 1.0) * p.capacity for p in params])
        w = rng.uniform(-1.0, 1.0, size=(count, horizon))
        zeta = rng.uniform(-0.5, 0.5, size=horizon)
        result = solve_lower_level(_microgrid(params, horizon), x0, w, zeta, TIGHT, T)
        optimum = _centralised_optimum(params, x0, w, zeta, T)
        assert tracking_cost(result.zbar, zeta) == pytest.approx(optimum, abs=1e-3)


def test_converged_run_meets_tolerances(battery, rng):
    """The stopping rule holds at the returned iterate, and the controls are feasible."""
    cfg = ADMMConfig(rho=1.0, max_iters=2000, primal_tol=1e-5, cost_tol=1e-8)
    params = [battery, BatteryParams(alpha=1.0, beta=0.9, gamma=0.9, capacity=2.0, u_max=0.3, u_min=-0.2)]
    mg = _microgrid(params, 4)
    w = rng.uniform(-0.5, 1.0, size=(2, 4))
    x0 = np.array([0.5, 1.0])
    result = solve_lower_level(mg, x0, w, np.full(4, 0.1), cfg, 0.5)
    assert result.converged
    assert result.residuals[-1] <= cfg.primal_tol
    assert abs(result.costs[-1] - result.costs[-2]) <= cfg.cost_tol
    assert result.transmissions == 2 * 2 * result.iterations
    assert all(fleet_feasible(x0, result.plan, BatteryFleet.from_params(params), 0.5))


def test_iteration_cap_returns_best_iterate(battery):
    """Hitting max_iters is flagged and still returns a feasible plan."""
    mg = _microgrid([battery] * 3, 3)
    w = np.array([[1.0, 0.8, 0.9], [0.7, 1.2, 1.1], [0.9, 0.6, 1.0]])
    result = solve_lower_level(mg, np.full(3, 0.5), w, np.zeros(3), ADMMConfig(max_iters=2), 0.5)
    assert not result.converged
    assert result.iterations == 2
    assert all(fleet_feasible(np.full(3, 0.5), result.plan, BatteryFleet.from_params([battery] * 3), 0.5))


def test_replays_are_bitwise_identical(battery, rng):
    """Identical inputs give identical outputs."""
    mg = _microgrid([battery] * 3, 4)
    w = rng.uniform(-0.5, 1.0, size=(3, 4))
    solver = AdmmLowerSolver(ADMMConfig(), 0.5)
    first = solver.solve(0, mg, np.full(3, 0.4), w, np.zeros(4)).zbar
    for _ in range(10):
        assert np.array_equal(solver.solve(0, mg, np.full(3, 0.4), w, np.zeros(4)).zbar, first)


def test_warm_start_state_shift():
    """Shifting drops the first step and repeats the last one."""
    state = ADMMState(z=np.arange(6.0).reshape(2, 3), a=np.zeros((2, 3)), lam=np.ones((2, 3)), iteration=7)
    shifted = state.shifted()
    assert np.array_equal(shifted.z, [[1.0, 2.0, 2.0], [4.0, 5.0, 5.0]])
    assert shifted.iteration == 0


def test_warm_start_of_wrong_shape_is_ignored(battery):
    """A state from another microgrid falls back to the cold start."""
    mg = _microgrid([battery, battery], 3)
    w = np.array([[0.2, 0.4, 0.6], [0.0, 0.2, -0.2]])
    x0 = np.full(2, 0.5)
    cold = solve_lower_level(mg, x0, w, np.zeros(3), ADMMConfig(), 0.5)
    warm = solve_lower_level(mg, x0, w, np.zeros(3), ADMMConfig(), 0.5, warm=ADMMState.initial(np.ones((3, 3))))
    assert np.array_equal(cold.zbar, warm.zbar)
