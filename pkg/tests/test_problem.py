"""Tests for the tension tracking problem."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rollbundle.exceptions import ContractViolation
from rollbundle.plant import propagate, reference_state
from rollbundle.problem import (
    HorizonReference,
    ProblemSettings,
    R2RProblem,
    StageWeights,
    box_constraints,
    stage_residual,
)


@pytest.fixture
def reference(small_problem):
    tensions = np.array([[20.0, 30.0], [20.0, 30.0], [24.0, 30.0]])
    return small_problem.reference(tensions, np.full(3, 0.01))


# Settings and weights
@pytest.mark.parametrize(
    "overrides",
    [
        {"q_tension": -1.0},
        {"tension_bounds": (60.0, 1.0)},
        {"velocity_bounds": (0.5, 0.5)},
        {"torque_limit": 0.0},
        {"band_under": 0.0},
    ],
)
def test_invalid_settings_raise(overrides):
    with pytest.raises(ContractViolation):
        ProblemSettings(**overrides)


def test_settings_round_trip():
    settings = ProblemSettings(q_tension=50.0, tension_bounds=[2, 40])
    assert ProblemSettings.from_dict(settings.to_dict()) == settings
    assert "notes" not in settings.to_dict()


def test_weights_layout(small_problem):
    weights = small_problem.weights()
    assert_allclose(weights.q, [100.0, 100.0, 10.0, 10.0])
    assert_allclose(weights.r, [1.0, 1.0])
    assert weights.n_r == 8


def test_weights_must_match():
    with pytest.raises(ContractViolation):
        StageWeights(np.ones(2), np.ones(1), np.ones(2))
    with pytest.raises(ContractViolation):
        StageWeights(np.array([1.0, -1.0]), np.ones(1), np.ones(1))


# Residual
def test_stage_residual_scales_each_block():
    w = StageWeights(np.array([4.0, 1.0]), np.array([9.0]), np.array([0.25]))
    r = stage_residual(np.array([1.0, 2.0]), np.array([1.0]), np.array([3.0]), np.zeros(2), np.zeros(1), w)
    assert_allclose(r, [2.0, 2.0, 3.0, -1.0])


def test_stage_residual_is_column_wise():
    w = StageWeights(np.ones(2), np.ones(1), np.ones(1))
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    U = np.array([[0.5, -0.5]])
    batched = stage_residual(X, U, np.zeros(1), np.ones(2), np.zeros(1), w)
    for i in range(2):
        assert_allclose(batched[:, i], stage_residual(X[:, i], U[:, i], np.zeros(1), np.ones(2), np.zeros(1), w))


def test_stage_residual_rejects_wrong_sizes():
    w = StageWeights(np.ones(2), np.ones(1), np.ones(1))
    with pytest.raises(ContractViolation):
        stage_residual(np.zeros(3), np.zeros(1), np.zeros(1), np.zeros(2), np.zeros(1), w)


# Constraints
def test_box_constraints_row_order():
    settings = ProblemSettings()
    X = np.array([10.0, 70.0, 0.5, -0.1])
    U = np.array([0.0, 31.0])
    c = box_constraints(X, U, settings)
    assert c.shape == (12,)
    assert_allclose(c[:2], [9.0, 69.0])
    assert_allclose(c[2:4], [50.0, -10.0])
    assert_allclose(c[4:6], [0.5, -0.1])
    assert_allclose(c[10:], [30.0, -1.0])


def test_hard_violation_reports_largest(small_problem):
    x = np.array([10.0, 70.0, 0.5, -0.1])
    assert small_problem.hard_violation(x, np.array([0.0, 31.0])) == pytest.approx(10.0)
    assert small_problem.hard_violation(np.array([30.0, 30.0, 0.1, 0.1]), np.zeros(2)) == 0.0


def test_soft_band_is_asymmetric(small_problem):
    ref = np.array([30.0, 30.0])
    over, under = small_problem.soft_constraints(np.array([33.0, 25.0, 0.0, 0.0]), ref)
    assert_allclose(over, [-1.0, 7.0])
    assert_allclose(under, [7.0, -1.0])


# References and functions
def test_reference_schedule_must_align(small_problem):
    with pytest.raises(ContractViolation):
        small_problem.reference(np.full((3, 2), 20.0), np.full(2, 0.01))


def test_reference_states_are_equilibria(small_plant, reference):
    assert isinstance(reference, HorizonReference)
    for k in range(reference.horizon):
        x, u = reference.states[k], reference.controls[k]
        assert_allclose(propagate(x, u, small_plant, reference.upstream[k]), x, atol=1e-12)


def test_functions_dimensions(small_problem, reference):
    funcs = small_problem.functions(reference)
    assert (funcs.horizon, funcs.n_x, funcs.n_u, funcs.n_r, funcs.n_hard) == (3, 4, 2, 8, 12)
    assert funcs.soft_dims == (2, 2)
    assert_allclose(funcs.initial_control, reference.controls[0])


def test_residual_vanishes_on_reference(small_problem, reference):
    funcs = small_problem.functions(reference)
    funcs.previous_controls = reference.controls.copy()
    for k in range(3):
        X = reference.states[k][:, None]
        U = reference.controls[k][:, None]
        assert_allclose(funcs.residual_at(k, X, U), 0.0, atol=1e-12)


def test_soft_band_tracks_the_stepped_reference(small_problem, small_plant, reference):
    funcs = small_problem.functions(reference)
    x = reference_state([20.0, 30.0], 0.01, small_plant)[:, None]
    _, under = funcs.soft(2, x, np.zeros((2, 1)))
    # reference 24 N with a 4 N under-band: 20 N sits exactly on the edge
    assert under[0, 0] == pytest.approx(0.0)
