"""Tests for scenario loading and validation."""

import copy
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rollbundle.config import (
    default_plant,
    dump_scenario,
    load_scenario,
    scenario_from_dict,
    shipped_scenario,
)
from rollbundle.exceptions import ScenarioValidationError


@pytest.fixture
def minimal():
    return {
        "schema_version": 1,
        "plant": {"n_rollers": 2, "ea": 500.0, "span_lengths": 0.5, "inertias": 0.01, "frictions": 0.1, "radii": 0.05},
        "references": {"tensions": [20.0, 30.0], "events": [{"time": 0.1, "spans": [2], "tensions": [25.0]}]},
        "upstream_velocity": {"initial": 0.01},
        "duration": 0.2,
        "seed": 3,
    }


# Shipped data
def test_default_plant():
    plant = default_plant()
    assert plant.n_rollers == 6
    assert plant.ea == 500.0
    assert plant.dt == 0.01
    assert_allclose(plant.radii, 0.05)


def test_tension_step_scenario():
    config = load_scenario(shipped_scenario("tension_step"))
    assert config.name == "tension_step"
    assert config.initial_tensions == (28.0, 36.0, 20.0, 40.0, 24.0, 32.0)
    assert config.seed == 20240501
    assert (config.horizon, config.iteration_budget, config.n_steps) == (15, 30, 150)
    assert config.tension_reference(0.49)[2] == 20.0
    assert config.tension_reference(0.5)[2] == 44.0
    assert config.event_times() == (0.5,)


def test_velocity_change_scenario():
    config = load_scenario(shipped_scenario("velocity_change"))
    assert config.initial_tensions == (30.0,) * 6
    assert config.upstream_velocity(0.0) == 0.01
    assert config.upstream_velocity(1.0) == 0.1
    assert config.seed == 20240502


# Defaults and schedules
def test_defaults_fill_optional_sections(minimal):
    config = scenario_from_dict(minimal)
    assert config.horizon == 15
    assert config.iteration_budget == 30
    assert config.controller == "atbm"
    assert config.adapt.gamma_init == (100.0, 10.0)
    assert config.solver.name == "CLARABEL"
    assert config.solver.fallback == "OSQP"
    assert not config.noise_enabled


def test_horizon_schedule_crosses_events(minimal):
    minimal["horizon"] = 4
    config = scenario_from_dict(minimal)
    tensions, upstream = config.horizon_schedule(8)
    assert tensions.shape == (4, 2)
    assert_allclose(tensions[:, 1], [30.0, 30.0, 25.0, 25.0])
    assert_allclose(upstream, 0.01)


def test_initial_state_is_equilibrium(minimal):
    config = scenario_from_dict(minimal)
    x0 = config.initial_state()
    assert_allclose(x0[:2], [20.0, 30.0])
    assert np.all(x0[2:] > 0)


# Validation
def field_of(data):
    with pytest.raises(ScenarioValidationError) as info:
        scenario_from_dict(data, "case.json")
    assert str(info.value).startswith("case.json: ")
    return info.value.field


def test_missing_seed(minimal):
    del minimal["seed"]
    assert field_of(minimal) == "seed"


def test_wrong_schema_version(minimal):
    minimal["schema_version"] = 2
    assert field_of(minimal) == "schema_version"


def test_event_times_must_increase(minimal):
    minimal["references"]["events"].append({"time": 0.1, "spans": [1], "tensions": [22.0]})
    assert field_of(minimal) == "references.events[1].time"


def test_event_outside_duration(minimal):
    minimal["upstream_velocity"]["events"] = [{"time": 0.5, "value": 0.02}]
    assert field_of(minimal) == "upstream_velocity.events[0].time"


@pytest.mark.parametrize(
    "mutate, expected",
    [
        (lambda d: d["references"].update(tensions=[20.0]), "references.tensions"),
        (lambda d: d["references"]["events"][0].update(spans=[3]), "references.events[0].spans[0]"),
        (lambda d: d.update(duration=-1.0), "duration"),
        (lambda d: d.update(horizon=0), "horizon"),
        (lambda d: d.update(controller="pid"), "controller"),
        (lambda d: d.update(solver={"name": "GUROBI"}), "solver"),
        (lambda d: d.update(solver={"fallback": "SCS"}), "solver"),
        (lambda d: d.update(adapt={"gamma_init": [1.0], "gamma_max": [10.0]}), "adapt.gamma_init"),
        (lambda d: d.update(lqr={"weighting": "pole_placement"}), "lqr.weighting"),
        (lambda d: d["plant"].update(dt=0.0), "plant"),
        (lambda d: d["references"].update(tensions=[20.0, 500.0]), "references"),
        (lambda d: d.update(noise={"enabled": "yes"}), "noise.enabled"),
    ],
)
def test_invalid_fields_are_named(minimal, mutate, expected):
    data = copy.deepcopy(minimal)
    mutate(data)
    assert field_of(data) == expected


def test_unreadable_file(tmp_path):
    with pytest.raises(ScenarioValidationError, match="<file>"):
        load_scenario(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioValidationError, match="invalid JSON"):
        load_scenario(bad)


# Canonical form
def test_canonical_dump_is_idempotent(minimal, tmp_path):
    source = tmp_path / "source.json"
    source.write_text(json.dumps(minimal))
    first = dump_scenario(load_scenario(source), tmp_path / "first.json")
    second = dump_scenario(load_scenario(first), tmp_path / "second.json")
    assert first.read_text() == second.read_text()
    assert json.loads(first.read_text())["name"] == "source"


def test_solver_fallback_can_be_disabled(minimal):
    minimal["solver"] = {"fallback": None}
    assert scenario_from_dict(minimal).solver.fallback is None
