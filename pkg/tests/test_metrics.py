"""Tests for closed-loop metrics."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rollbundle.metrics import MetricsReport, compute_metrics
from rollbundle.traces import ClosedLoopTrace


def with_span1_error(trace, errors):
    """Set the span-1 tension error step by step."""
    for step, error in zip(trace.steps, errors):
        step.state = step.state.copy()
        step.state[0] = step.tension_ref[0] + error
    return trace


def test_single_span_error(trace_factory):
    trace = trace_factory(n_steps=20, n_rollers=6, tension_offset=[1.0, 0, 0, 0, 0, 0])
    report = MetricsReport(name="offset", trace=trace)
    assert_allclose(report.span_rmse, [1.0, 0, 0, 0, 0, 0], atol=1e-12)
    assert report.tension_rmse == pytest.approx(np.sqrt(1.0 / 6.0))
    assert report.velocity_rmse == pytest.approx(0.0, abs=1e-15)


def test_solver_statistics(trace_factory):
    report = MetricsReport(name="t", trace=trace_factory(n_steps=5))
    assert report.mean_iterations == 3.0
    assert report.max_iterations == 3
    assert report.mean_solve_time == 0.0


def test_hard_violation_uses_box_limits(trace_factory):
    trace = trace_factory(n_steps=3, tension_offset=[40.0, 0.0])  # 70 N against a 60 N limit
    assert MetricsReport(name="t", trace=trace).max_hard_violation == pytest.approx(10.0)
    assert MetricsReport(name="t", trace=trace_factory(n_steps=3)).max_hard_violation == 0.0


def test_empty_trace_raises():
    with pytest.raises(ValueError, match="empty"):
        MetricsReport(name="empty", trace=ClosedLoopTrace(n_rollers=2, n_soft=2))


# Settling
def test_settling_time_after_event(trace_factory):
    trace = with_span1_error(trace_factory(n_steps=10), [2.0] * 6 + [0.1] * 4)
    report = MetricsReport(name="t", trace=trace, event_times=(0.02,))
    assert report.settling_times[0] == pytest.approx(0.04)


def test_already_settled_after_event(trace_factory):
    report = MetricsReport(name="t", trace=trace_factory(n_steps=10), event_times=(0.05,))
    assert report.settling_times == [pytest.approx(0.0)]


def test_band_scales_with_reference_step(trace_factory):
    trace = trace_factory(n_steps=10)
    for step in trace.steps[4:]:
        step.tension_ref = np.array([80.0, 30.0])
    # 50 N step: 2 % band is 1 N, so a 0.8 N error counts as settled
    with_span1_error(trace, [0.0] * 4 + [0.8] * 6)
    report = MetricsReport(name="t", trace=trace, event_times=(0.04,))
    assert report.settling_times[0] == pytest.approx(0.0)


@pytest.mark.parametrize("event_time", [0.02, 1.0])
def test_unsettled_runs_report_none(trace_factory, event_time):
    trace = with_span1_error(trace_factory(n_steps=10), [0.0] * 9 + [3.0])
    report = MetricsReport(name="t", trace=trace, event_times=(event_time,))
    assert report.settling_times == [None]
    assert "not settled" in str(report)


# Presentation
@pytest.mark.parametrize(
    "seconds, expected",
    [(2.5, "2.500s"), (0.0125, "12.50ms"), (2.5e-5, "25.0μs")],
)
def test_format_time(seconds, expected):
    assert MetricsReport.format_time(seconds) == expected


def test_compute_metrics_uses_scenario(trace_factory, short_scenario):
    report = compute_metrics(trace_factory(n_steps=5), short_scenario)
    assert report.name == "test"
    assert list(report.event_times) == [0.02]
    data = report.as_dict()
    assert data["steps"] == 5
    assert data["improvement"] is None
    assert "Closed-loop metrics: test" in str(report)
