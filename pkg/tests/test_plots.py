"""Tests for the SVG panels."""

import pytest

from rollbundle.plots import PANELS, emit_plots
from rollbundle.traces import ClosedLoopTrace


def test_one_svg_per_panel(trace_factory, tmp_path):
    paths = emit_plots(trace_factory(n_steps=10), tmp_path / "out" / "trace")
    assert [p.name for p in paths] == [f"trace_{panel}.svg" for panel in PANELS]
    for path in paths:
        assert path.read_text().lstrip().startswith("<?xml")


def test_references_are_tagged(trace_factory, tmp_path):
    paths = emit_plots(trace_factory(n_steps=5), tmp_path / "trace")
    svg = paths[0].read_text()
    assert 'id="reference_1"' in svg
    assert 'id="reference_2"' in svg


def test_single_step_trace_renders(trace_factory, tmp_path):
    paths = emit_plots(trace_factory(n_steps=1), tmp_path / "single")
    assert all(p.stat().st_size > 0 for p in paths)


def test_trace_without_adaptation_data(trace_factory, tmp_path):
    trace = trace_factory(n_steps=3)
    for step in trace.steps:
        step.delta = step.mu = step.nu_dyn = step.nu_hard = float("nan")
        step.gammas = ()
    paths = emit_plots(trace, tmp_path / "lqr")
    assert "no adaptation data" in paths[3].read_text()


def test_output_is_reproducible(trace_factory, tmp_path):
    trace = trace_factory(n_steps=4)
    first = emit_plots(trace, tmp_path / "a")
    second = emit_plots(trace, tmp_path / "b")
    assert [p.read_text() for p in first] == [p.read_text() for p in second]


def test_empty_trace_raises(tmp_path):
    with pytest.raises(ValueError):
        emit_plots(ClosedLoopTrace(n_rollers=2, n_soft=2), tmp_path / "empty")
