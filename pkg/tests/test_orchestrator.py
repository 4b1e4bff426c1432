"""Tests for the outer loop, the bundle controllers and the closed-loop driver."""

from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rollbundle import orchestrator
from rollbundle.adapt import AdaptConfig, Violations
from rollbundle.certificate import PHI_MIN_A_PRIORI, LipschitzEstimates
from rollbundle.config import load_scenario, shipped_scenario
from rollbundle.exceptions import ContractViolation, SubproblemFailure
from rollbundle.lqr import LQRController
from rollbundle.orchestrator import (
    CONVERGED,
    ITERATION_CAP,
    SOLVER_FAILURE,
    BundleController,
    IterationRecord,
    SolveTrace,
    closed_loop,
    hold_trajectory,
    make_controller,
    replay_consistent,
    tbm_solve,
)
from rollbundle.plant import equilibrium_torques, reference_state
from rollbundle.problem import R2RProblem
from rollbundle.traces import ControlDecision


@pytest.fixture
def horizon_setup(small_problem, small_plant):
    tensions = np.array([[20.0, 30.0], [24.0, 30.0], [24.0, 30.0]])
    upstream = np.full(3, 0.01)
    x0 = reference_state([20.0, 30.0], 0.01, small_plant)
    funcs = small_problem.functions(small_problem.reference(tensions, upstream))
    return funcs, x0, hold_trajectory(x0, 3, small_plant)


def record(iteration, delta, mu, gammas, dyn=0.0, attempts=0):
    return IterationRecord(
        iteration=iteration,
        delta=delta,
        mu=mu,
        gammas=gammas,
        j_sub=1.0,
        violations=Violations(dyn=dyn, hard=0.0, soft=(0.0, 0.0)),
        step_norm=1.0,
        solve_time=0.0,
        attempts=attempts,
    )


# Starting trajectory
def test_hold_trajectory_repeats_state_and_equilibrium_torques(small_plant):
    x0 = reference_state([20.0, 30.0], 0.01, small_plant)
    z = hold_trajectory(x0, 4, small_plant)
    assert z.states.shape == (4, 4)
    assert_allclose(z.states, np.tile(x0, (4, 1)))
    assert_allclose(z.controls[2], equilibrium_torques(x0, small_plant))


# Replay
def test_replay_reproduces_adaptation():
    trace = SolveTrace(
        iterates=[],
        records=[
            record(0, 0.5, 10.0, (100.0, 10.0), dyn=0.5),  # contract, raise mu
            record(1, 0.25, 20.0, (100.0, 10.0), dyn=1e-6),  # expand
            record(2, 0.375, 20.0, (100.0, 10.0)),
        ],
    )
    assert replay_consistent(trace, AdaptConfig())


def test_replay_accounts_for_failed_attempts():
    trace = SolveTrace(
        iterates=[],
        records=[record(0, 0.5, 10.0, (100.0, 10.0), dyn=5e-3), record(1, 0.25, 10.0, (100.0, 10.0), attempts=1)],
    )
    assert replay_consistent(trace, AdaptConfig())


def test_replay_detects_tampering():
    trace = SolveTrace(
        iterates=[],
        records=[record(0, 0.5, 10.0, (100.0, 10.0), dyn=0.5), record(1, 0.25, 10.0, (100.0, 10.0))],
    )
    assert not replay_consistent(trace, AdaptConfig())


def test_penalty_increases_are_counted():
    trace = SolveTrace(
        iterates=[],
        records=[record(0, 0.5, 10.0, (100.0, 10.0)), record(1, 0.5, 20.0, (100.0, 20.0)), record(2, 0.5, 20.0, (100.0, 40.0))],
    )
    assert trace.penalty_increases() == (1, (0, 2))
    assert SolveTrace(iterates=[]).penalty_increases() == (0, ())


# Outer loop
def test_solve_records_every_iteration(horizon_setup):
    funcs, x0, z0 = horizon_setup
    trace = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=4, seed=1)
    assert trace.status in (CONVERGED, ITERATION_CAP)
    assert 1 <= len(trace.records) <= 4
    assert len(trace.iterates) == len(trace.records) + 1
    assert replay_consistent(trace, AdaptConfig())
    assert_allclose(trace.final.states[0], x0, atol=1e-6)
    path = trace.penalty_path()
    assert all(b[0] >= a[0] for a, b in zip(path, path[1:]))


def test_solve_is_deterministic(horizon_setup):
    funcs, x0, z0 = horizon_setup
    first = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=2, seed=9)
    second = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=2, seed=9)
    assert_array_equal(first.final.controls, second.final.controls)
    assert [r.mu for r in first.records] == [r.mu for r in second.records]


def test_fixed_variant_never_adapts(horizon_setup):
    funcs, x0, z0 = horizon_setup
    trace = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=3, seed=2, adaptive=False)
    assert {(r.delta, r.mu, r.gammas) for r in trace.records} == {(0.5, 10.0, (100.0, 10.0))}
    assert replay_consistent(trace, AdaptConfig())


def test_budget_must_be_positive(horizon_setup):
    funcs, x0, z0 = horizon_setup
    with pytest.raises(ContractViolation):
        tbm_solve(funcs, x0, z0, AdaptConfig(), budget=0)


def test_failed_solve_contracts_and_retries(horizon_setup, monkeypatch):
    funcs, x0, z0 = horizon_setup
    real_solve = orchestrator.solve
    calls = []

    def flaky(p, **kwargs):
        calls.append(p.bundles.delta)
        if len(calls) == 1:
            raise SubproblemFailure("infeasible", status="infeasible")
        return real_solve(p, **kwargs)

    monkeypatch.setattr(orchestrator, "solve", flaky)
    trace = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=1, seed=0)
    assert calls == [0.5, 0.25]
    assert trace.records[0].attempts == 1
    assert trace.records[0].delta == 0.25


def test_failure_at_minimum_radius_ends_solve(horizon_setup, monkeypatch):
    funcs, x0, z0 = horizon_setup

    def always_fail(p, **kwargs):
        raise SubproblemFailure("infeasible", status="infeasible")

    monkeypatch.setattr(orchestrator, "solve", always_fail)
    trace = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=5)
    assert trace.status == SOLVER_FAILURE
    assert trace.records == []
    assert trace.final_state.delta == pytest.approx(0.01)


def test_monitors_record_objectives(horizon_setup):
    funcs, x0, z0 = horizon_setup
    estimates = LipschitzEstimates(1.0, 1.0, 1.0, 1.0)
    trace = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=2, estimates=estimates)
    assert len(trace.monitors) == len(trace.records)
    assert all(np.isfinite(r.phi_prev) and np.isfinite(r.phi_next) for r in trace.records)


def test_subproblems_are_dumped(horizon_setup, tmp_path):
    funcs, x0, z0 = horizon_setup
    trace = tbm_solve(funcs, x0, z0, AdaptConfig(), budget=1, dump_dir=tmp_path)
    assert len(trace.records) == 1
    assert (tmp_path / "subproblem_000_0.json").exists()


# Controllers
def test_make_controller_kinds(small_problem, short_scenario):
    atbm = make_controller("atbm", small_problem, short_scenario)
    assert isinstance(atbm, BundleController) and atbm.adaptive
    assert not make_controller("tbm-fixed", small_problem, short_scenario).adaptive
    assert isinstance(make_controller("lqr", small_problem, short_scenario), LQRController)
    with pytest.raises(ContractViolation, match="unknown controller"):
        make_controller("pid", small_problem, short_scenario)


def test_a_priori_report_uses_penalty_caps(small_problem, short_scenario):
    controller = make_controller("atbm", small_problem, short_scenario)
    tensions, upstream = short_scenario.horizon_schedule(0)
    report = controller.a_priori_report(short_scenario.initial_state(), tensions, upstream)
    assert report.k_star == 17 + 14 + 17
    assert report.phi_min_label == PHI_MIN_A_PRIORI
    assert report.estimates.method == "sampled-estimate"
    assert report.kappa == pytest.approx(1.0 / np.sqrt(6))


def test_bound_report_needs_monitors(small_problem, short_scenario):
    controller = make_controller("atbm", small_problem, short_scenario)
    assert controller.bound_report() is None


# Closed loop
class ScriptedController:
    """Holds equilibrium torques and fails on the listed steps."""

    name = "scripted"

    def __init__(self, plant, failing_steps):
        self.plant = plant
        self.failing_steps = set(failing_steps)

    def act(self, x, step, tensions, upstream, last_control):
        if step in self.failing_steps:
            raise SubproblemFailure(f"scripted failure at step {step}", status="infeasible")
        return ControlDecision(control=equilibrium_torques(x, self.plant))


def test_closed_loop_runs_every_step(small_problem, short_scenario):
    trace = closed_loop("atbm", small_problem, short_scenario)
    assert len(trace) == 5
    assert trace.status == "completed"
    assert trace.controller == "atbm"
    assert all(step.iterations >= 1 for step in trace.steps)
    # the tension step lands on span 1 at t = 0.02 s
    assert_allclose(trace.steps[2].tension_ref, [24.0, 30.0])
    assert_allclose(trace.steps[1].tension_ref, [20.0, 30.0])


def test_single_failure_is_bridged(small_problem, short_scenario):
    controller = ScriptedController(small_problem.plant, failing_steps=[2])
    trace = closed_loop(controller, small_problem, short_scenario)
    assert trace.status == "completed"
    assert len(trace) == 5
    assert trace.steps[2].status == "hold"
    assert_allclose(trace.steps[2].control, trace.steps[1].control)


def test_repeated_failure_truncates(small_problem, short_scenario):
    controller = ScriptedController(small_problem.plant, failing_steps=[1, 2, 3])
    trace = closed_loop(controller, small_problem, short_scenario)
    assert trace.status == "truncated"
    assert len(trace) == 2
    assert "step 2" in trace.failure


def test_closed_loop_is_reproducible(small_problem, short_scenario):
    noisy = replace(short_scenario, noise_enabled=True, plant=replace(short_scenario.plant, noise_gains=0.01))
    problem = R2RProblem(noisy.plant)
    first = closed_loop("lqr", problem, noisy)
    second = closed_loop("lqr", problem, noisy)
    for a, b in zip(first.steps, second.steps):
        assert_array_equal(a.state, b.state)
    third = closed_loop("lqr", problem, noisy, seed=99)
    assert not np.array_equal(first.steps[-1].state, third.steps[-1].state)


def test_monitored_run_yields_bound_report(small_problem, short_scenario):
    controller = make_controller("atbm", small_problem, short_scenario, monitors=True)
    closed_loop(controller, small_problem, short_scenario)
    report = controller.bound_report()
    assert report is not None
    assert report.monitors
    assert report.phi_min <= report.monitors[0].phi_prev


@pytest.mark.parametrize("name", ["tension_step", "velocity_change"])
def test_shipped_scenarios_start_cleanly(name):
    scenario = load_scenario(shipped_scenario(name))
    scenario = replace(scenario, duration=10 * scenario.plant.dt)
    problem = R2RProblem(scenario.plant, scenario.problem)
    trace = closed_loop("atbm", problem, scenario)
    assert trace.status == "completed", trace.failure
    assert len(trace) == 10
