"""Tests for trace records and CSV files."""

import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rollbundle.exceptions import ContractViolation
from rollbundle.traces import ClosedLoopTrace, StepRecord, read_trace, trace_header, write_trace


def test_header_layout():
    header = trace_header(6, 2)
    assert len(header) == 40
    assert header[:2] == ["time_s", "T_1"]
    assert header[7] == "v_1"
    assert header[-6:] == ["mu", "j_sub", "gamma_1", "gamma_2", "iters", "solve_ms"]


def test_empty_trace_is_header_only(tmp_path):
    path = write_trace(ClosedLoopTrace(n_rollers=2, n_soft=2, controller="atbm"), tmp_path / "trace.csv")
    lines = path.read_text().splitlines()
    assert lines == ["# controller: atbm", "# status: completed", ",".join(trace_header(2, 2))]
    assert len(read_trace(path)) == 0


def test_written_rows_read_back(trace_factory, tmp_path):
    trace = trace_factory(n_steps=4, tension_offset=[1.0, -2.0])
    loaded = read_trace(write_trace(trace, tmp_path / "run" / "trace.csv"))
    assert len(loaded) == 4
    assert (loaded.n_rollers, loaded.n_soft) == (2, 2)
    for original, restored in zip(trace.steps, loaded.steps):
        assert_allclose(restored.state, original.state, rtol=1e-8)
        assert_allclose(restored.tension_ref, original.tension_ref)
        assert restored.gammas == (100.0, 10.0)
        assert restored.iterations == 3
    assert loaded.steps[2].mu == pytest.approx(30.0)


def test_missing_adaptation_columns_are_nan(tmp_path):
    trace = ClosedLoopTrace(n_rollers=2, n_soft=2, controller="lqr")
    trace.steps.append(
        StepRecord(
            time=0.0,
            state=np.array([20.0, 30.0, 0.01, 0.01]),
            control=np.zeros(2),
            tension_ref=np.array([20.0, 30.0]),
            velocity_ref=np.array([0.01, 0.01]),
        )
    )
    path = write_trace(trace, tmp_path / "lqr.csv")
    with open(path, newline="") as handle:
        row = list(csv.DictReader(line for line in handle if not line.startswith("#")))[0]
    assert row["mu"] == "nan"
    assert row["gamma_2"] == "nan"
    assert row["iters"] == "0"
    restored = read_trace(path).steps[0]
    assert np.isnan(restored.delta)
    assert len(restored.gammas) == 2 and all(np.isnan(restored.gammas))


def test_numbers_use_nine_significant_digits(tmp_path):
    trace = ClosedLoopTrace(n_rollers=2, n_soft=0)
    trace.steps.append(
        StepRecord(
            time=1.0 / 3.0,
            state=np.array([20.0, 30.0, 0.01, 0.01]),
            control=np.zeros(2),
            tension_ref=np.array([20.0, 30.0]),
            velocity_ref=np.array([0.01, 0.01]),
        )
    )
    path = write_trace(trace, tmp_path / "t.csv")
    assert path.read_text().splitlines()[3].startswith("0.333333333,")


def test_run_outcome_reads_back(trace_factory, tmp_path):
    trace = trace_factory(n_steps=2)
    trace.controller = "tbm-fixed"
    trace.status = "truncated"
    trace.failure = "step 2: subproblem failed\nat the minimum trust radius"
    loaded = read_trace(write_trace(trace, tmp_path / "trace.csv"))
    assert loaded.controller == "tbm-fixed"
    assert loaded.status == "truncated"
    assert loaded.failure == "step 2: subproblem failed at the minimum trust radius"
    assert len(loaded) == 2


def test_plain_csv_reads_as_completed(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text(",".join(trace_header(2, 0)) + "\n")
    loaded = read_trace(path)
    assert (loaded.controller, loaded.status, loaded.failure) == ("", "completed", None)


def test_short_row_line_counts_comments(tmp_path):
    path = tmp_path / "short.csv"
    path.write_text("# status: completed\n" + ",".join(trace_header(2, 0)) + "\n0.0,1.0\n")
    with pytest.raises(ContractViolation, match="line 3"):
        read_trace(path)


@pytest.mark.parametrize("content", ["", "time_s,foo\n", "time_s,T_1,v_1\n"])
def test_unrecognized_files_raise(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(ContractViolation):
        read_trace(path)


def test_short_row_names_its_line(tmp_path):
    path = tmp_path / "short.csv"
    path.write_text(",".join(trace_header(2, 0)) + "\n0.0,1.0\n")
    with pytest.raises(ContractViolation, match="line 2"):
        read_trace(path)


def test_column_stacks_values(trace_factory):
    trace = trace_factory(n_steps=3)
    assert_allclose(trace.column("mu"), [10.0, 20.0, 30.0])
    assert_allclose(trace.times, [0.0, 0.01, 0.02])
