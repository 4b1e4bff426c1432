"""Tracking and solver metrics of a closed-loop trace."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from rollbundle.problem import ProblemSettings, box_constraints
from rollbundle.traces import ClosedLoopTrace

SETTLE_TOLERANCE = 0.5
SETTLE_FRACTION = 0.02


@dataclass
class MetricsReport:
    """Container for closed-loop metrics.

    Attributes:
        name: Controller name
        trace: The evaluated trace
        settings: Constraint limits used for the hard-violation metric
        event_times: Times of scheduled reference changes
        span_rmse: Per-span tension RMSE in N
        tension_rmse: Aggregate tension RMSE over all spans in N
        velocity_rmse: Aggregate velocity RMSE in m/s
        max_hard_violation: Largest box-constraint violation over the run
        settling_times: Seconds after each event until every span stays in band (None if never)
        mean_solve_time: Mean inner solve wall time in seconds (0 without timing)
        max_solve_time: Largest inner solve wall time in seconds
        mean_iterations: Mean outer iterations per step
        max_iterations: Largest outer iteration count of any step
        improvement: Relative tension RMSE improvement over a baseline in percent (set by comparison)
        relative_rmse: Tension RMSE divided by the best controller's (set by comparison)
    """

    name: str
    trace: ClosedLoopTrace = field(repr=False)
    settings: ProblemSettings = field(default_factory=ProblemSettings, repr=False)
    event_times: Sequence[float] = ()
    span_rmse: np.ndarray = field(init=False)
    tension_rmse: float = field(init=False)
    velocity_rmse: float = field(init=False)
    max_hard_violation: float = field(init=False)
    settling_times: List[Optional[float]] = field(init=False)
    mean_solve_time: float = field(init=False)
    max_solve_time: float = field(init=False)
    mean_iterations: float = field(init=False)
    max_iterations: int = field(init=False)
    improvement: Optional[float] = field(default=None, init=False)
    relative_rmse: Optional[float] = field(default=None, init=False)

    def __post_init__(self):
        """Calculate metrics after initialization."""
        if not len(self.trace):
            raise ValueError("trace cannot be empty")
        n = self.trace.n_rollers
        states = self.trace.column("state")
        tension_error = states[:, :n] - self.trace.column("tension_ref")
        velocity_error = states[:, n:] - self.trace.column("velocity_ref")

        self.span_rmse = np.sqrt(np.mean(tension_error**2, axis=0))
        self.tension_rmse = float(np.sqrt(np.mean(tension_error**2)))
        self.velocity_rmse = float(np.sqrt(np.mean(velocity_error**2)))

        controls = self.trace.column("control")
        violations = [
            float(np.max(np.maximum(0.0, -box_constraints(x, u, self.settings))))
            for x, u in zip(states, controls)
        ]
        self.max_hard_violation = max(violations)

        self.settling_times = [self._settling_time(t, tension_error) for t in self.event_times]

        solve_ms = self.trace.column("solve_ms")
        self.mean_solve_time = float(np.mean(solve_ms)) / 1e3
        self.max_solve_time = float(np.max(solve_ms)) / 1e3
        iterations = self.trace.column("iterations")
        self.mean_iterations = float(np.mean(iterations))
        self.max_iterations = int(np.max(iterations))

    def _settling_time(self, event_time: float, tension_error: np.ndarray) -> Optional[float]:
        """First time after ``event_time`` from which every span stays inside its band."""
        times = self.trace.times
        after = times >= event_time - 1e-9
        if not np.any(after):
            return None
        refs = self.trace.column("tension_ref")
        first = int(np.argmax(after))
        before = refs[first - 1] if first > 0 else refs[first]
        step = np.abs(refs[first] - before)
        band = np.maximum(SETTLE_FRACTION * step, SETTLE_TOLERANCE)
        inside = np.all(np.abs(tension_error) <= band, axis=1)
        window = inside[first:]
        if not window[-1]:
            return None
        outside = np.flatnonzero(~window)
        settle_index = first + (int(outside[-1]) + 1 if outside.size else 0)
        return float(times[settle_index] - event_time)

    def as_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "steps": len(self.trace),
            "status": self.trace.status,
            "failure": self.trace.failure,
            "span_rmse": [float(v) for v in self.span_rmse],
            "tension_rmse": self.tension_rmse,
            "velocity_rmse": self.velocity_rmse,
            "max_hard_violation": self.max_hard_violation,
            "settling_times": list(self.settling_times),
            "mean_solve_time": self.mean_solve_time,
            "max_solve_time": self.max_solve_time,
            "mean_iterations": self.mean_iterations,
            "max_iterations": self.max_iterations,
            "improvement": self.improvement,
            "relative_rmse": self.relative_rmse,
        }

    @staticmethod
    def format_time(time_value: float) -> str:
        """Format a time value with appropriate units.

        Args:
            time_value: Time in seconds

        Returns:
            Formatted string with appropriate unit (s, ms, μs)
        """
        if time_value >= 1.0:
            return f"{time_value:.3f}s"
        elif time_value >= 1e-3:
            return f"{time_value * 1e3:.2f}ms"
        return f"{time_value * 1e6:.1f}μs"

    def __str__(self) -> str:
        lines = [
            f"Closed-loop metrics: {self.name}",
            f"  Steps: {len(self.trace)} ({self.trace.status})",
            f"  Tension RMSE:  {self.tension_rmse:.4f} N",
            "  Per span:      " + ", ".join(f"{v:.4f}" for v in self.span_rmse),
            f"  Velocity RMSE: {self.velocity_rmse:.3e} m/s",
            f"  Max hard violation: {self.max_hard_violation:.3e}",
        ]
        for event_time, settle in zip(self.event_times, self.settling_times):
            text = "not settled" if settle is None else f"{settle:.2f}s"
            lines.append(f"  Settling after t={event_time:g}s: {text}")
        if self.max_iterations:
            lines.append(f"  Iterations: mean {self.mean_iterations:.1f}, max {self.max_iterations}")
        if self.max_solve_time > 0:
            lines.append(
                f"  Solve time: mean {self.format_time(self.mean_solve_time)}, "
                f"max {self.format_time(self.max_solve_time)}"
            )
        if self.improvement is not None:
            lines.append(f"  Improvement: {self.improvement:+.1f}%")
        return "\n".join(lines)


def compute_metrics(trace: ClosedLoopTrace, config=None) -> MetricsReport:
    """Metrics of ``trace`` against the limits and events of scenario ``config``."""
    if config is None:
        return MetricsReport(name=trace.controller or "trace", trace=trace)
    return MetricsReport(
        name=trace.controller or config.controller,
        trace=trace,
        settings=config.problem,
        event_times=config.event_times(),
    )

