"""Scenario files: loading, validation and canonical serialization.

A scenario is a JSON document with ``schema_version`` 1. Every section is
optional except ``references``, ``upstream_velocity``, ``duration`` and
``seed``. Validation failures raise ``ScenarioValidationError`` naming the
file and the dotted field.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from rollbundle.adapt import AdaptConfig
from rollbundle.exceptions import ContractViolation, ScenarioValidationError
from rollbundle.plant import PlantParams, reference_state
from rollbundle.problem import ProblemSettings
from rollbundle.subproblem import SolverSettings

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONTROLLERS = ("atbm", "tbm-fixed", "lqr")
LQR_WEIGHTINGS = ("problem", "bryson")

_TIME_EPS = 1e-9


def default_plant() -> PlantParams:
    """Plant constants shipped with the package."""
    text = (resources.files("rollbundle") / "data" / "default_plant.json").read_text(encoding="utf-8")
    return PlantParams.from_dict(json.loads(text))


def shipped_scenario(name: str) -> Path:
    """Path of a scenario file shipped under ``rollbundle/data/scenarios``."""
    path = resources.files("rollbundle") / "data" / "scenarios" / f"{name}.json"
    return Path(str(path))


@dataclass(frozen=True)
class TensionEvent:
    """Set the reference tension of the listed (1-based) spans from ``time`` on."""

    time: float
    spans: Tuple[int, ...]
    tensions: Tuple[float, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {"time": self.time, "spans": list(self.spans), "tensions": list(self.tensions)}


@dataclass(frozen=True)
class VelocityEvent:
    """Set the unwind velocity from ``time`` on."""

    time: float
    value: float

    def to_dict(self) -> Dict[str, Any]:
        return {"time": self.time, "value": self.value}


@dataclass(frozen=True)
class LQRSettings:
    """LQR weighting: ``"problem"`` reuses Q and R, ``"bryson"`` uses 1/limit^2."""

    weighting: str = "problem"
    max_tension_dev: float = 2.0
    max_velocity_dev: float = 0.01
    max_torque: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weighting": self.weighting,
            "max_tension_dev": self.max_tension_dev,
            "max_velocity_dev": self.max_velocity_dev,
            "max_torque": self.max_torque,
        }


@dataclass(eq=False)
class ScenarioConfig:
    """Everything needed to reproduce one closed-loop run."""

    name: str
    plant: PlantParams
    initial_tensions: Tuple[float, ...]
    upstream_initial: float
    duration: float
    seed: int
    tension_events: Tuple[TensionEvent, ...] = ()
    upstream_events: Tuple[VelocityEvent, ...] = ()
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    problem: ProblemSettings = field(default_factory=ProblemSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    lqr: LQRSettings = field(default_factory=LQRSettings)
    horizon: int = 15
    iteration_budget: int = 30
    controller: str = "atbm"
    output_dir: str = "runs"
    noise_enabled: bool = False
    record_timing: bool = False
    notes: str = ""

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.plant.dt))

    def tension_reference(self, t: float) -> np.ndarray:
        """Reference tensions in force at time ``t`` (events apply from their time on)."""
        tensions = np.array(self.initial_tensions, dtype=float)
        for event in self.tension_events:
            if event.time > t + _TIME_EPS:
                break
            tensions[np.asarray(event.spans) - 1] = event.tensions
        return tensions

    def upstream_velocity(self, t: float) -> float:
        value = self.upstream_initial
        for event in self.upstream_events:
            if event.time > t + _TIME_EPS:
                break
            value = event.value
        return float(value)

    def horizon_schedule(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        """Reference tensions (H, N) and unwind velocities (H,) starting at ``step``."""
        times = (step + np.arange(self.horizon)) * self.plant.dt
        return (
            np.array([self.tension_reference(t) for t in times]),
            np.array([self.upstream_velocity(t) for t in times]),
        )

    def initial_state(self) -> np.ndarray:
        """Equilibrium state of the initial references."""
        return reference_state(self.tension_reference(0.0), self.upstream_velocity(0.0), self.plant)

    def event_times(self) -> Tuple[float, ...]:
        return tuple(sorted({e.time for e in self.tension_events} | {e.time for e in self.upstream_events}))

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "plant": self.plant.to_dict(),
            "adapt": self.adapt.to_dict(),
            "problem": self.problem.to_dict(),
            "references": {
                "tensions": list(self.initial_tensions),
                "events": [e.to_dict() for e in self.tension_events],
            },
            "upstream_velocity": {
                "initial": self.upstream_initial,
                "events": [e.to_dict() for e in self.upstream_events],
            },
            "duration": self.duration,
            "horizon": self.horizon,
            "iteration_budget": self.iteration_budget,
            "seed": self.seed,
            "controller": self.controller,
            "output_dir": self.output_dir,
            "noise": {"enabled": self.noise_enabled},
            "solver": self.solver.to_dict(),
            "lqr": self.lqr.to_dict(),
            "record_timing": self.record_timing,
        }
        if self.notes:
            data["notes"] = self.notes
        return data


class _Validator:
    """Field lookups that raise ``ScenarioValidationError`` with a dotted path."""

    def __init__(self, path: str):
        self.path = path

    def fail(self, name: str, reason: str):
        raise ScenarioValidationError(self.path, name, reason)

    def section(self, data: Dict[str, Any], key: str, required: bool = False) -> Dict[str, Any]:
        if key not in data:
            if required:
                self.fail(key, "missing required section")
            return {}
        value = data[key]
        if not isinstance(value, dict):
            self.fail(key, "must be an object")
        return value

    def finite(self, value: Any, name: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            self.fail(name, f"must be a finite number, got {value!r}")
        return float(value)

    def number(self, data: Dict[str, Any], key: str, name: str, default: Any = None, positive: bool = False) -> float:
        if key not in data:
            if default is None:
                self.fail(name, "missing required field")
            return default
        value = self.finite(data[key], name)
        if positive and value <= 0:
            self.fail(name, f"must be positive, got {value!r}")
        return float(value)

    def integer(self, data: Dict[str, Any], key: str, name: str, default: Optional[int] = None, minimum: int = 0) -> int:
        if key not in data:
            if default is None:
                self.fail(name, "missing required field")
            return default
        value = data[key]
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(name, f"must be an integer, got {value!r}")
        if value < minimum:
            self.fail(name, f"must be >= {minimum}, got {value}")
        return value

    def build(self, name: str, factory, payload):
        """Run a dataclass constructor, converting its errors to validation errors."""
        try:
            return factory(payload)
        except (ContractViolation, TypeError, ValueError) as exc:
            self.fail(name, str(exc))


def scenario_from_dict(data: Dict[str, Any], path: str = "<scenario>") -> ScenarioConfig:
    """Validate a parsed scenario document.

    Raises:
        ScenarioValidationError: On any missing or invalid field
    """
    check = _Validator(path)
    if not isinstance(data, dict):
        check.fail("<root>", "scenario must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        check.fail("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    if "seed" not in data:
        check.fail("seed", "missing required field (runs must be reproducible)")
    seed = check.integer(data, "seed", "seed")

    plant = default_plant()
    if "plant" in data:
        plant = check.build("plant", PlantParams.from_dict, check.section(data, "plant"))
    n = plant.n_rollers

    duration = check.number(data, "duration", "duration", positive=True)
    horizon = check.integer(data, "horizon", "horizon", default=15, minimum=1)
    budget = check.integer(data, "iteration_budget", "iteration_budget", default=30, minimum=1)

    refs = check.section(data, "references", required=True)
    tensions = refs.get("tensions")
    if not isinstance(tensions, list) or len(tensions) != n:
        check.fail("references.tensions", f"must list {n} tensions")
    initial_tensions = tuple(check.finite(tensions[i], f"references.tensions[{i}]") for i in range(n))

    tension_events = []
    last_time = -math.inf
    for i, event in enumerate(refs.get("events", [])):
        name = f"references.events[{i}]"
        if not isinstance(event, dict):
            check.fail(name, "must be an object")
        time = check.number(event, "time", f"{name}.time")
        if not time > last_time:
            check.fail(f"{name}.time", f"event times must be strictly increasing ({time} after {last_time})")
        if not 0.0 <= time <= duration:
            check.fail(f"{name}.time", f"must lie in [0, {duration}], got {time}")
        spans, values = event.get("spans"), event.get("tensions")
        if not isinstance(spans, list) or not isinstance(values, list) or len(spans) != len(values) or not spans:
            check.fail(name, "spans and tensions must be non-empty lists of equal length")
        for j, span in enumerate(spans):
            if isinstance(span, bool) or not isinstance(span, int) or not 1 <= span <= n:
                check.fail(f"{name}.spans[{j}]", f"must be a span index in 1..{n}, got {span!r}")
        tension_events.append(
            TensionEvent(
                time=time,
                spans=tuple(spans),
                tensions=tuple(check.finite(values[j], f"{name}.tensions[{j}]") for j in range(len(values))),
            )
        )
        last_time = time

    upstream = check.section(data, "upstream_velocity", required=True)
    upstream_initial = check.number(upstream, "initial", "upstream_velocity.initial")
    upstream_events = []
    last_time = -math.inf
    for i, event in enumerate(upstream.get("events", [])):
        name = f"upstream_velocity.events[{i}]"
        if not isinstance(event, dict):
            check.fail(name, "must be an object")
        time = check.number(event, "time", f"{name}.time")
        if not time > last_time:
            check.fail(f"{name}.time", f"event times must be strictly increasing ({time} after {last_time})")
        if not 0.0 <= time <= duration:
            check.fail(f"{name}.time", f"must lie in [0, {duration}], got {time}")
        upstream_events.append(VelocityEvent(time=time, value=check.number(event, "value", f"{name}.value")))
        last_time = time

    adapt = check.build("adapt", AdaptConfig.from_dict, check.section(data, "adapt"))
    if adapt.n_soft != 2:
        check.fail("adapt.gamma_init", f"needs one penalty per soft class (2), got {adapt.n_soft}")
    problem = check.build("problem", ProblemSettings.from_dict, check.section(data, "problem"))

    solver_data = dict(check.section(data, "solver"))
    solver_data.pop("notes", None)
    solver = check.build("solver", lambda d: SolverSettings(**d), solver_data)

    lqr_data = dict(check.section(data, "lqr"))
    lqr_data.pop("notes", None)
    for key in ("max_tension_dev", "max_velocity_dev", "max_torque"):
        if key in lqr_data:
            lqr_data[key] = check.number(lqr_data, key, f"lqr.{key}", positive=True)
    lqr = check.build("lqr", lambda d: LQRSettings(**d), lqr_data)
    if lqr.weighting not in LQR_WEIGHTINGS:
        check.fail("lqr.weighting", f"must be one of {LQR_WEIGHTINGS}, got {lqr.weighting!r}")

    controller = data.get("controller", "atbm")
    if controller not in CONTROLLERS:
        check.fail("controller", f"must be one of {CONTROLLERS}, got {controller!r}")
    noise = check.section(data, "noise")
    record_timing = data.get("record_timing", False)
    if not isinstance(record_timing, bool):
        check.fail("record_timing", "must be true or false")
    noise_enabled = noise.get("enabled", False)
    if not isinstance(noise_enabled, bool):
        check.fail("noise.enabled", "must be true or false")

    config = ScenarioConfig(
        name=str(data.get("name", Path(path).stem)),
        plant=plant,
        initial_tensions=initial_tensions,
        upstream_initial=upstream_initial,
        duration=duration,
        seed=seed,
        tension_events=tuple(tension_events),
        upstream_events=tuple(upstream_events),
        adapt=adapt,
        problem=problem,
        solver=solver,
        lqr=lqr,
        horizon=horizon,
        iteration_budget=budget,
        controller=controller,
        output_dir=str(data.get("output_dir", "runs")),
        noise_enabled=noise_enabled,
        record_timing=record_timing,
        notes=str(data.get("notes", "")),
    )
    try:
        config.initial_state()
        for t in config.event_times():
            reference_state(config.tension_reference(t), config.upstream_velocity(t), plant)
    except ContractViolation as exc:
        check.fail("references", str(exc))
    return config


def load_scenario(path: Path) -> ScenarioConfig:
    """Read and validate a scenario file.

    Raises:
        ScenarioValidationError: If the file is missing, does not parse or fails validation
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioValidationError(str(path), "<file>", f"cannot read: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError(str(path), "<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    config = scenario_from_dict(data, str(path))
    logger.info("loaded scenario %s (%d steps, H=%d)", config.name, config.n_steps, config.horizon)
    return config


def dump_scenario(config: ScenarioConfig, path: Path) -> Path:
    """Write the canonical form of ``config``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path
