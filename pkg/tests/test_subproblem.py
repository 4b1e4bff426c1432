"""Tests for subproblem assembly, solution and recovery."""

import json

import cvxpy as cp
import numpy as np
import pytest
from numpy.testing import assert_allclose

from rollbundle import subproblem
from rollbundle.bundle import build_bundles
from rollbundle.certificate import penalized_objective
from rollbundle.config import load_scenario, shipped_scenario
from rollbundle.exceptions import ContractViolation, SubproblemFailure
from rollbundle.orchestrator import hold_trajectory
from rollbundle.plant import equilibrium_torques
from rollbundle.problem import R2RProblem
from rollbundle.subproblem import (
    SolverSettings,
    assemble,
    dump_subproblem,
    evaluate,
    induced_slacks,
    recover,
    solve,
    vertex_weights,
)
from rollbundle.verify import random_instance, zero_vertex_instance


@pytest.fixture
def instance():
    return random_instance(seed=3, index=0)


def center_weights(p):
    return vertex_weights(p, [p.bundles.center_index] * p.horizon)


# Settings
def test_solver_name_is_normalized():
    assert SolverSettings(name="clarabel").name == "CLARABEL"


def test_fallback_matching_the_primary_is_dropped():
    assert SolverSettings(fallback="osqp").fallback == "OSQP"
    assert SolverSettings(name="OSQP").fallback is None
    assert SolverSettings(fallback=None).kwargs()["fallback"] is None


@pytest.mark.parametrize(
    "kwargs",
    [{"name": "ECOS_BB"}, {"fallback": "SCS"}, {"tol_feas": 0.0}, {"tol_opt": -1.0}, {"max_iter": 0}, {"max_iter": 2.5}],
)
def test_invalid_solver_settings_raise(kwargs):
    with pytest.raises(ContractViolation):
        SolverSettings(**kwargs)


# Assembly
def test_non_positive_penalties_raise(instance):
    with pytest.raises(ContractViolation):
        assemble(instance.bundles, 0.0, instance.gammas)
    with pytest.raises(ContractViolation):
        assemble(instance.bundles, 1.0, (1.0, -1.0))


def test_penalty_count_must_match_soft_classes(instance):
    with pytest.raises(ContractViolation, match="soft classes"):
        assemble(instance.bundles, 1.0, (1.0,))


def test_anchor_shape_is_checked(instance):
    with pytest.raises(ContractViolation):
        assemble(instance.bundles, 1.0, instance.gammas, x_init=np.zeros(3))


def test_block_counts(instance):
    p = assemble(instance.bundles, 1.0, instance.gammas, x_init=instance.z.states[0])
    H = p.horizon
    assert p.block_counts() == {"simplex": H, "dynamics": H - 1, "hard": H - 1, "soft": 2 * (H - 1), "anchor": 1}


# Evaluation
def test_center_vertex_reproduces_penalized_objective():
    for index in range(10):
        inst = random_instance(seed=12, index=index)
        p = inst.subproblem
        value = evaluate(p, center_weights(p)).objective
        phi = penalized_objective(inst.z, p.mu, p.gammas, inst.funcs, inst.x_init)
        assert value == pytest.approx(phi, rel=1e-8, abs=1e-8)


def test_induced_slacks_are_minimal(instance):
    p = instance.subproblem
    alphas = np.full((p.horizon, p.m), 1.0 / p.m)
    s, w, d = induced_slacks(p, alphas)
    steps = p.bundles.steps
    assert_allclose(s[0], steps[0].f @ alphas[0] - steps[1].x @ alphas[1])
    assert np.all(w >= 0) and all(np.all(block >= 0) for block in d)
    assert np.all(steps[0].hard @ alphas[0] + w[0] >= -1e-12)


def test_evaluate_rejects_wrong_weight_shape(instance):
    with pytest.raises(ContractViolation):
        evaluate(instance.subproblem, np.ones((1, 1)))


# Solving
def test_solution_is_on_the_simplex_and_not_worse_than_center(instance):
    p = instance.subproblem
    sol = solve(p)
    assert np.all(sol.alphas >= 0)
    assert_allclose(sol.alphas.sum(axis=1), 1.0)
    baseline = evaluate(p, center_weights(p)).objective
    assert sol.objective <= baseline + 1e-6 * max(1.0, abs(baseline))
    assert sol.status == cp.OPTIMAL
    assert sol.backend == "CLARABEL"


def test_zero_cost_vertex_is_found():
    inst = zero_vertex_instance()
    sol = solve(inst.subproblem)
    assert sol.objective == pytest.approx(0.0, abs=1e-8)
    assert_allclose(recover(inst.bundles, sol).states[:, 0], [0.0, 1.0, 2.0], atol=1e-6)


def test_anchor_holds_at_solution(instance):
    x_init = instance.z.states[0]
    p = assemble(instance.bundles, instance.mu, instance.gammas, x_init=x_init)
    sol = solve(p)
    assert sol.anchor_residual <= 1e-6


def test_recover_interpolates_bundle_columns(instance):
    sol = solve(instance.subproblem)
    z = recover(instance.bundles, sol)
    for k, step in enumerate(instance.bundles.steps):
        assert_allclose(z.states[k], step.x @ sol.alphas[k])
        assert_allclose(z.controls[k], step.u @ sol.alphas[k])


def test_solver_error_becomes_subproblem_failure(instance, monkeypatch):
    def broken(self, *args, **kwargs):
        raise cp.error.SolverError("numerical trouble")

    monkeypatch.setattr(cp.Problem, "solve", broken)
    with pytest.raises(SubproblemFailure) as info:
        solve(instance.subproblem)
    assert info.value.status == "solver_error"


def test_osqp_backend(instance):
    p = instance.subproblem
    sol = solve(p, solver="OSQP", tol_feas=1e-7, tol_opt=1e-7, max_iter=20000)
    baseline = evaluate(p, center_weights(p)).objective
    assert sol.objective <= baseline + 1e-4 * max(1.0, abs(baseline))


def shipped_subproblem(delta, mu, gammas):
    scenario = load_scenario(shipped_scenario("tension_step"))
    plant = scenario.plant
    problem = R2RProblem(plant, scenario.problem)
    x = scenario.initial_state()
    tensions, upstream = scenario.horizon_schedule(0)
    funcs = problem.functions(problem.reference(tensions, upstream), initial_control=equilibrium_torques(x, plant))
    z = hold_trajectory(x, scenario.horizon, plant)
    bundles = build_bundles(z, delta, funcs.lagged_on(z), seed=0, x_init=x)
    return assemble(bundles, mu, gammas, x_init=x)


@pytest.mark.parametrize(
    "delta, mu, gammas",
    [(0.5, 10.0, (100.0, 10.0)), (0.01, 10.0, (100.0, 10.0)), (0.01, 1e6, (1e6, 1e6))],
)
def test_clarabel_solves_shipped_plant_subproblems(delta, mu, gammas):
    p = shipped_subproblem(delta, mu, gammas)
    sol = solve(p, fallback=None)
    assert sol.status == cp.OPTIMAL
    assert sol.simplex_error <= 1e-6
    baseline = evaluate(p, center_weights(p)).objective
    assert sol.objective <= baseline + 1e-6 * max(1.0, abs(baseline))


def mark_inaccurate(monkeypatch, backends):
    real = subproblem._run_backend
    calls = []

    def run(problem, solver, options):
        calls.append(solver)
        status = real(problem, solver, options)
        return cp.OPTIMAL_INACCURATE if solver in backends else status

    monkeypatch.setattr(subproblem, "_run_backend", run)
    return calls


def test_inaccurate_status_is_a_failure(instance, monkeypatch):
    mark_inaccurate(monkeypatch, {"CLARABEL"})
    with pytest.raises(SubproblemFailure) as info:
        solve(instance.subproblem, fallback=None)
    assert info.value.status == cp.OPTIMAL_INACCURATE


def test_inaccurate_primary_falls_back(instance, monkeypatch):
    calls = mark_inaccurate(monkeypatch, {"CLARABEL"})
    sol = solve(instance.subproblem, tol_feas=1e-7, tol_opt=1e-7, fallback="OSQP")
    assert calls == ["CLARABEL", "OSQP"]
    assert sol.backend == "OSQP"
    assert sol.status == cp.OPTIMAL


def test_inaccurate_everywhere_fails_with_last_status(instance, monkeypatch):
    calls = mark_inaccurate(monkeypatch, {"CLARABEL", "OSQP"})
    with pytest.raises(SubproblemFailure) as info:
        solve(instance.subproblem)
    assert calls == ["CLARABEL", "OSQP"]
    assert info.value.status == cp.OPTIMAL_INACCURATE


def test_solver_error_falls_back(instance, monkeypatch):
    real = subproblem._run_backend

    def run(problem, solver, options):
        if solver == "CLARABEL":
            raise cp.error.SolverError("numerical trouble")
        return real(problem, solver, options)

    monkeypatch.setattr(subproblem, "_run_backend", run)
    assert solve(instance.subproblem, tol_feas=1e-7, tol_opt=1e-7).backend == "OSQP"


# Dumps
def test_dump_is_self_describing(instance, tmp_path):
    path = dump_subproblem(instance.subproblem, tmp_path / "dumps" / "p.json")
    data = json.loads(path.read_text())
    assert data["kind"] == "rollbundle.subproblem"
    assert data["dims"]["H"] == instance.subproblem.horizon
    assert len(data["steps"]) == instance.subproblem.horizon
    assert data["mu"] == instance.mu
