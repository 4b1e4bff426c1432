"""SVG panels of a closed-loop trace.

Every panel is rendered from the trace alone, so plots can be regenerated
offline from a CSV with ``read_trace``.
"""

import logging
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from rollbundle.traces import ClosedLoopTrace  # noqa: E402

logger = logging.getLogger(__name__)

PANELS = ("tensions", "velocities", "torques", "adaptation")

_RC = {
    "path.simplify": False,
    "svg.hashsalt": "rollbundle",
    "svg.fonttype": "none",
}


def _style(trace: ClosedLoopTrace) -> Dict[str, object]:
    return {"marker": "o"} if len(trace) == 1 else {}


def tension_figure(trace: ClosedLoopTrace):
    """Tensions with their references drawn as step-post lines tagged ``reference_<i>``."""
    t = trace.times
    n = trace.n_rollers
    states = trace.column("state")
    refs = trace.column("tension_ref")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for i in range(n):
        (line,) = ax.plot(t, states[:, i], label=f"T{i + 1}", **_style(trace))
        (ref,) = ax.plot(
            t, refs[:, i], linestyle="--", drawstyle="steps-post", color=line.get_color(), linewidth=0.8, **_style(trace)
        )
        line.set_gid(f"tension_{i + 1}")
        ref.set_gid(f"reference_{i + 1}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("tension [N]")
    ax.set_title(f"Web tensions ({trace.controller or 'trace'})")
    ax.legend(ncol=min(n, 6), fontsize="small")
    ax.grid(True, alpha=0.3)
    return fig


def velocity_figure(trace: ClosedLoopTrace):
    t = trace.times
    n = trace.n_rollers
    states = trace.column("state")
    refs = trace.column("velocity_ref")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for i in range(n):
        (line,) = ax.plot(t, states[:, n + i], label=f"v{i + 1}", **_style(trace))
        ax.plot(t, refs[:, i], linestyle="--", drawstyle="steps-post", color=line.get_color(), linewidth=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("velocity [m/s]")
    ax.legend(ncol=min(n, 6), fontsize="small")
    ax.grid(True, alpha=0.3)
    return fig


def torque_figure(trace: ClosedLoopTrace):
    t = trace.times
    controls = trace.column("control")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for i in range(trace.n_rollers):
        ax.plot(t, controls[:, i], drawstyle="steps-post", label=f"u{i + 1}", **_style(trace))
    ax.set_xlabel("time [s]")
    ax.set_ylabel("torque [N m]")
    ax.legend(ncol=min(trace.n_rollers, 6), fontsize="small")
    ax.grid(True, alpha=0.3)
    return fig


def adaptation_figure(trace: ClosedLoopTrace):
    """Radius, penalties and violation metrics on a log axis."""
    t = trace.times
    series = {
        "delta": trace.column("delta"),
        "mu": trace.column("mu"),
        "nu_dyn": trace.column("nu_dyn"),
        "nu_hard": trace.column("nu_hard"),
    }
    gammas = [s.gammas for s in trace.steps]
    for j in range(trace.n_soft):
        series[f"gamma_{j + 1}"] = np.array([g[j] if len(g) > j else np.nan for g in gammas], dtype=float)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    plotted = False
    for name, values in series.items():
        positive = np.where(values > 0, values, np.nan)
        if np.any(np.isfinite(positive)):
            ax.plot(t, positive, label=name, **_style(trace))
            plotted = True
    if plotted:
        ax.set_yscale("log")
        ax.legend(fontsize="small")
    else:
        ax.text(0.5, 0.5, "no adaptation data", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("time [s]")
    ax.grid(True, alpha=0.3)
    return fig


_FIGURES = {
    "tensions": tension_figure,
    "velocities": velocity_figure,
    "torques": torque_figure,
    "adaptation": adaptation_figure,
}


def emit_plots(trace: ClosedLoopTrace, path_prefix: Path) -> List[Path]:
    """Write one SVG per panel as ``<prefix>_<panel>.svg``.

    Raises:
        ValueError: If the trace is empty
    """
    if not len(trace):
        raise ValueError("cannot plot an empty trace")
    path_prefix = Path(path_prefix)
    path_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    with plt.rc_context(_RC):
        for panel in PANELS:
            fig = _FIGURES[panel](trace)
            path = path_prefix.parent / f"{path_prefix.name}_{panel}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    logger.info("wrote %d plots with prefix %s", len(paths), path_prefix)
    return paths
