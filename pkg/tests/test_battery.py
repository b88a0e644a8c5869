import numpy as np
import pytest

from microlink.battery import (
    BatteryFleet,
    ControlPair,
    ControlPlan,
    fleet_feasible,
    is_feasible,
    output_demand,
    simulate_fleet,
    simulate_horizon,
    step_dynamics,
)
from microlink.models import BatteryParams


@pytest.mark.parametrize(
    "x, u, params, expected",
    [
        (0.5, ControlPair(0.0, 0.0), BatteryParams(), 0.5),
        (0.5, ControlPair(0.2, 0.0), BatteryParams(alpha=1.0, beta=1.0), 0.6),
        (1.0, ControlPair(0.1, -0.05), BatteryParams(alpha=0.9, beta=0.8), 0.915),
    ],
)
def test_step_dynamics(x, u, params, expected):
    """One step of the SoC recursion with T = 0.5 h."""
    assert step_dynamics(x, u, params, 0.5) == pytest.approx(expected)


@pytest.mark.parametrize(
    "w, u, gamma, expected",
    [
        (0.4, ControlPair(0.0, 0.0), 0.9, 0.4),
        (1.0, ControlPair(0.3, -0.3), 1.0, 1.0),
        (0.5, ControlPair(0.0, -0.2), 0.95, 0.31),
    ],
)
def test_output_demand(w, u, gamma, expected):
    """Demand adds charging and efficiency-weighted discharging."""
    assert output_demand(w, u, BatteryParams(gamma=gamma)) == pytest.approx(expected)


def test_zero_controls_keep_demand(battery):
    """Without control the demand equals the net consumption and the SoC decays."""
    w = np.array([0.3, -0.2, 0.8])
    soc, z = simulate_horizon(0.5, ControlPlan.zeros(3), w, battery, 0.5)
    assert np.array_equal(z, w)
    assert np.allclose(soc, 0.5 * battery.alpha ** np.arange(4))


def test_horizon_matches_closed_form(battery):
    """Recursion against the explicit sum over past controls."""
    T = 0.5
    plan = ControlPlan(np.array([0.1, 0.0, 0.2]), np.array([0.0, -0.15, -0.05]))
    soc, _ = simulate_horizon(0.4, plan, np.zeros(3), battery, T)
    for n in range(3):
        expected = battery.alpha ** (n + 1) * 0.4 + T * sum(
            battery.alpha ** (n - j) * (battery.beta * plan.u_plus[j] + plan.u_minus[j]) for j in range(n + 1)
        )
        assert soc[n + 1] == pytest.approx(expected)


def test_horizon_of_one_step(battery):
    """N = 1 is a single dynamics and demand evaluation."""
    u = ControlPair(0.1, -0.02)
    soc, z = simulate_horizon(0.3, ControlPlan.from_pairs([u]), np.array([0.5]), battery, 0.5)
    assert soc[1] == pytest.approx(step_dynamics(0.3, u, battery, 0.5))
    assert z[0] == pytest.approx(output_demand(0.5, u, battery))


def test_fleet_simulation_matches_single(battery):
    """The vectorised fleet agrees with per-household simulation."""
    other = BatteryParams(alpha=0.95, beta=0.9, gamma=0.85, capacity=2.0, u_max=0.4, u_min=-0.3)
    fleet = BatteryFleet.from_params([battery, other])
    plan = ControlPlan(np.array([[0.1, 0.0], [0.0, 0.2]]), np.array([[0.0, -0.1], [-0.2, 0.0]]))
    w = np.array([[0.5, 0.1], [0.2, -0.3]])
    soc, z = simulate_fleet(np.array([0.5, 1.0]), plan, w, fleet, 0.5)
    for i, params in enumerate([battery, other]):
        soc_i, z_i = simulate_horizon([0.5, 1.0][i], plan.household(i), w[i], params, 0.5)
        assert np.allclose(soc[i], soc_i)
        assert np.allclose(z[i], z_i)


def test_zero_controls_are_feasible(battery):
    """Zero control keeps the SoC inside [0, C]."""
    assert is_feasible(0.7, ControlPlan.zeros(6), battery, 0.5)


def test_simultaneous_full_charge_and_discharge(battery):
    """Using both power bounds at once breaks the combined bound."""
    plan = ControlPlan(np.array([battery.u_max]), np.array([battery.u_min]))
    report = is_feasible(0.5, plan, battery, 0.5)
    assert not report
    assert report.violation == "combined charge/discharge bound"


def test_charging_a_full_battery():
    """A full lossless battery overflows after one charging step."""
    params = BatteryParams(alpha=1.0, capacity=1.0, u_max=0.3, u_min=-0.3)
    report = is_feasible(1.0, ControlPlan(np.array([0.1]), np.array([0.0])), params, 0.5)
    assert report.violation == "state of charge bound"
    assert report.step == 1


def test_storage_free_household_cannot_act():
    """Any nonzero control is infeasible without a battery."""
    report = is_feasible(0.0, ControlPlan(np.array([0.0]), np.array([-0.1])), BatteryParams.none(), 0.5)
    assert report.violation == "discharge bound"


def test_fleet_feasible_reports_per_household(battery):
    """One report per household."""
    fleet = BatteryFleet.from_params([battery, BatteryParams.none()])
    plan = ControlPlan(np.array([[0.1], [0.1]]), np.array([[0.0], [0.0]]))
    reports = fleet_feasible(np.array([0.5, 0.0]), plan, fleet, 0.5)
    assert [bool(r) for r in reports] == [True, False]


def test_plan_helpers():
    """Pairs convert both ways and `first` takes the leading step."""
    pairs = [ControlPair(0.1, 0.0), ControlPair(0.0, -0.2)]
    plan = ControlPlan.from_pairs(pairs)
    assert plan.pairs() == pairs
    stacked = ControlPlan(np.arange(6.0).reshape(2, 3), -np.arange(6.0).reshape(2, 3))
    assert np.array_equal(stacked.first().u_plus, [0.0, 3.0])


def test_fleet_storage_mask(battery):
    """Households without capacity or power have no control authority."""
    fleet = BatteryFleet.from_params([battery, BatteryParams.none(), BatteryParams(capacity=1.0)])
    assert fleet.has_storage.tolist() == [True, False, False]
    assert len(fleet.subset(fleet.has_storage)) == 1


def test_feasibility_is_monotone_in_tolerance(rng):
    """A plan accepted at one tolerance is accepted at every larger tolerance."""
    tolerances = [0.0, 1e-9, 1e-6, 1e-3, 1e-2, 0.1, 1.0]
    outcomes = set()
    for _ in range(200):
        params = BatteryParams(
            alpha=rng.uniform(0.9, 1.0),
            beta=rng.uniform(0.8, 1.0),
            gamma=rng.uniform(0.8, 1.0),
            capacity=rng.uniform(0.5, 2.0),
            u_max=rng.uniform(0.0, 0.5),
            u_min=-rng.uniform(0.0, 0.5),
        )
        horizon = int(rng.integers(1, 8))
        plan = ControlPlan(
            rng.uniform(-0.05, 0.6, size=horizon) * (rng.uniform(size=horizon) < 0.5),
            rng.uniform(-0.6, 0.05, size=horizon) * (rng.uniform(size=horizon) < 0.5),
        )
        x0 = rng.uniform(-0.1, 1.1) * params.capacity
        accepted = [bool(is_feasible(x0, plan, params, 0.5, tol)) for tol in tolerances]
        outcomes.update(accepted)
        for strict, loose in zip(accepted, accepted[1:]):
            assert loose or not strict
    assert outcomes == {True, False}


def test_lossless_energy_bookkeeping(rng):
    """Without losses the SoC changes by T times the net charge and demand is w plus net charge."""
    params = BatteryParams(alpha=1.0, beta=1.0, gamma=1.0, capacity=5.0, u_max=1.0, u_min=-1.0)
    for _ in range(50):
        horizon, T = int(rng.integers(1, 12)), float(rng.uniform(0.1, 1.0))
        u_plus = rng.uniform(0.0, 1.0, size=horizon)
        u_minus = rng.uniform(-1.0, 0.0, size=horizon)
        w = rng.normal(size=horizon)
        x0 = float(rng.uniform(0.0, 5.0))
        soc, z = simulate_horizon(x0, ControlPlan(u_plus, u_minus), w, params, T)
        assert np.allclose(np.diff(soc), T * (u_plus + u_minus))
        assert soc[-1] == pytest.approx(x0 + T * (u_plus.sum() + u_minus.sum()))
        assert np.allclose(z, w + u_plus + u_minus)
