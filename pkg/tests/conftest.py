"""Shared fixtures: a two-roller line, a short scenario and trace builders."""

import numpy as np
import pytest

from rollbundle.config import ScenarioConfig, TensionEvent
from rollbundle.metrics import MetricsReport
from rollbundle.plant import PlantParams, reference_state
from rollbundle.problem import R2RProblem
from rollbundle.traces import ClosedLoopTrace, StepRecord


@pytest.fixture
def small_plant():
    """Two rollers with round-number constants."""
    return PlantParams(
        n_rollers=2,
        ea=500.0,
        span_lengths=0.5,
        inertias=0.01,
        frictions=0.1,
        radii=0.05,
        dt=0.01,
    )


@pytest.fixture
def small_problem(small_plant):
    return R2RProblem(small_plant)


@pytest.fixture
def short_scenario(small_plant):
    """Five steps with a tension step on span 1 at t = 0.02 s."""
    return ScenarioConfig(
        name="short",
        plant=small_plant,
        initial_tensions=(20.0, 30.0),
        upstream_initial=0.01,
        duration=0.05,
        seed=7,
        tension_events=(TensionEvent(time=0.02, spans=(1,), tensions=(24.0,)),),
        horizon=3,
        iteration_budget=3,
    )


def build_trace(n_steps=10, n_rollers=2, n_soft=2, tension_offset=None, dt=0.01, tensions=30.0, upstream=0.01):
    """Trace sitting at equilibrium, optionally with a constant tension offset per span."""
    plant = PlantParams(n_rollers, 500.0, 0.5, 0.01, 0.1, 0.05, dt=dt)
    tension_ref = np.full(n_rollers, float(tensions))
    x_ref = reference_state(tension_ref, upstream, plant)
    offset = np.zeros(2 * n_rollers)
    if tension_offset is not None:
        offset[:n_rollers] = tension_offset
    trace = ClosedLoopTrace(n_rollers=n_rollers, n_soft=n_soft, controller="test")
    for step in range(n_steps):
        trace.steps.append(
            StepRecord(
                time=step * dt,
                state=x_ref + offset,
                control=np.full(n_rollers, 0.5),
                tension_ref=tension_ref.copy(),
                velocity_ref=x_ref[n_rollers:].copy(),
                nu_dyn=1e-3 / (step + 1),
                nu_hard=0.0,
                delta=0.5,
                mu=10.0 * (step + 1),
                j_sub=1.0,
                gammas=(100.0, 10.0)[:n_soft],
                iterations=3,
                solve_ms=0.0,
            )
        )
    return trace


@pytest.fixture
def trace_factory():
    return build_trace


@pytest.fixture
def multiple_results():
    """Three controllers whose span-1 offsets double from one to the next."""
    return {
        name: MetricsReport(name=name, trace=build_trace(n_steps=10, tension_offset=[offset, 0.0]))
        for name, offset in (("atbm", 0.5), ("tbm-fixed", 1.0), ("lqr", 2.0))
    }
