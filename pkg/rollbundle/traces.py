"""Closed-loop trace records and their CSV form.

One row per control step. Columns: ``time_s``, ``T_1..T_N``, ``v_1..v_N``,
``u_1..u_N``, ``Tref_1..Tref_N``, ``vref_1..vref_N``, ``nu_dyn``, ``nu_hard``,
``delta``, ``mu``, ``j_sub``, ``gamma_1..gamma_J``, ``iters``, ``solve_ms``.
Numbers are written with 9 significant digits. The header row is preceded
by ``# key: value`` comment lines carrying the controller name, the run
status and, for a truncated run, the failure.
"""

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rollbundle.exceptions import ContractViolation

logger = logging.getLogger(__name__)

NUMBER_FORMAT = "%.9g"
COMMENT = "#"
_META = re.compile(r"^#\s*(\w+):\s?(.*)$")


@dataclass(eq=False)
class ControlDecision:
    """Torques chosen by a controller plus the statistics of its inner solve."""

    control: np.ndarray
    nu_dyn: float = float("nan")
    nu_hard: float = float("nan")
    delta: float = float("nan")
    mu: float = float("nan")
    j_sub: float = float("nan")
    gammas: Tuple[float, ...] = ()
    iterations: int = 0
    solve_ms: float = 0.0
    status: str = "ok"


@dataclass(eq=False)
class StepRecord:
    """What happened at one control step.

    Adaptation columns are NaN for controllers without an inner solve.
    """

    time: float
    state: np.ndarray
    control: np.ndarray
    tension_ref: np.ndarray
    velocity_ref: np.ndarray
    nu_dyn: float = float("nan")
    nu_hard: float = float("nan")
    delta: float = float("nan")
    mu: float = float("nan")
    j_sub: float = float("nan")
    gammas: Tuple[float, ...] = ()
    iterations: int = 0
    solve_ms: float = 0.0
    status: str = "ok"


@dataclass(eq=False)
class ClosedLoopTrace:
    """Sequence of step records plus the run outcome.

    ``status`` is ``"completed"`` or ``"truncated"``; a truncated trace names
    the failure in ``failure``.
    """

    n_rollers: int
    n_soft: int
    steps: List[StepRecord] = field(default_factory=list)
    controller: str = ""
    status: str = "completed"
    failure: Optional[str] = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.steps])

    def column(self, name: str) -> np.ndarray:
        """Stacked per-step values of a record attribute."""
        return np.array([getattr(s, name) for s in self.steps], dtype=float)


def trace_header(n_rollers: int, n_soft: int) -> List[str]:
    spans = range(1, n_rollers + 1)
    header = ["time_s"]
    for prefix in ("T", "v", "u", "Tref", "vref"):
        header += [f"{prefix}_{i}" for i in spans]
    header += ["nu_dyn", "nu_hard", "delta", "mu", "j_sub"]
    header += [f"gamma_{j}" for j in range(1, n_soft + 1)]
    header += ["iters", "solve_ms"]
    return header


def _fmt(value: float) -> str:
    return NUMBER_FORMAT % value


def _row(step: StepRecord, n_soft: int) -> List[str]:
    numbers: List[float] = [step.time]
    for block in (step.state, step.control, step.tension_ref, step.velocity_ref):
        numbers.extend(float(v) for v in block)
    numbers += [step.nu_dyn, step.nu_hard, step.delta, step.mu, step.j_sub]
    gammas = list(step.gammas) if step.gammas else [float("nan")] * n_soft
    numbers.extend(gammas)
    return [_fmt(v) for v in numbers] + [str(int(step.iterations)), _fmt(step.solve_ms)]


def _metadata(trace: ClosedLoopTrace) -> List[Tuple[str, str]]:
    meta = [("controller", trace.controller), ("status", trace.status)]
    if trace.failure is not None:
        meta.append(("failure", " ".join(trace.failure.split())))
    return meta


def write_trace(trace: ClosedLoopTrace, path: Path) -> Path:
    """Write ``trace`` as CSV; an empty trace yields comments and the header only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        for key, value in _metadata(trace):
            handle.write(f"{COMMENT} {key}: {value}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(trace_header(trace.n_rollers, trace.n_soft))
        for step in trace.steps:
            writer.writerow(_row(step, trace.n_soft))
    logger.info("wrote %d trace rows to %s", len(trace), path)
    return path


def _count(header: Sequence[str], prefix: str) -> int:
    pattern = re.compile(rf"^{prefix}_\d+$")
    return sum(1 for name in header if pattern.match(name))


def read_trace(path: Path) -> ClosedLoopTrace:
    """Parse a CSV written by ``write_trace``, including its comment lines.

    Files without comment lines read as a completed run of an unnamed controller.

    Raises:
        ContractViolation: If the header does not follow the trace layout
        OSError: If the file cannot be read
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as handle:
        lines = handle.readlines()
    meta = {}
    skipped = 0
    for line in lines:
        if not line.startswith(COMMENT):
            break
        skipped += 1
        match = _META.match(line.rstrip("\r\n"))
        if match:
            meta[match.group(1)] = match.group(2)

    reader = csv.reader(lines[skipped:])
    try:
        header = next(reader)
    except StopIteration:
        raise ContractViolation(f"{path}: empty trace file") from None
    n = _count(header, "T")
    n_soft = _count(header, "gamma")
    if n < 1 or header != trace_header(n, n_soft):
        raise ContractViolation(f"{path}: unrecognized trace header")
    trace = ClosedLoopTrace(
        n_rollers=n,
        n_soft=n_soft,
        controller=meta.get("controller", ""),
        status=meta.get("status", "completed"),
        failure=meta.get("failure"),
    )
    for line_no, row in enumerate(reader, start=skipped + 2):
        if len(row) != len(header):
            raise ContractViolation(f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}")
        values = np.array([float(v) for v in row])
        blocks = [values[1 + i * n : 1 + (i + 1) * n] for i in range(5)]
        tail = values[1 + 5 * n :]
        trace.steps.append(
            StepRecord(
                time=float(values[0]),
                state=np.concatenate(blocks[:2]),
                control=blocks[2],
                tension_ref=blocks[3],
                velocity_ref=blocks[4],
                nu_dyn=float(tail[0]),
                nu_hard=float(tail[1]),
                delta=float(tail[2]),
                mu=float(tail[3]),
                j_sub=float(tail[4]),
                gammas=tuple(float(g) for g in tail[5 : 5 + n_soft]),
                iterations=int(tail[5 + n_soft]),
                solve_ms=float(tail[6 + n_soft]),
            )
        )
    return trace
