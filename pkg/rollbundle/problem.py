"""Web-tension tracking problem: stage residual, constraint sets and references."""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from rollbundle.bundle import ProblemFunctions
from rollbundle.exceptions import ContractViolation
from rollbundle.plant import PlantParams, equilibrium_torques, propagate, reference_state

N_SOFT_CLASSES = 2


@dataclass(frozen=True)
class ProblemSettings:
    """Tracking weights and constraint limits.

    ``q_tension``, ``q_velocity``, ``r_torque`` and ``s_rate`` are the diagonal
    entries of Q, R and S. The soft band allows tensions up to
    ``T_ref + band_over`` and down to ``T_ref - band_under``.
    """

    q_tension: float = 100.0
    q_velocity: float = 10.0
    r_torque: float = 1.0
    s_rate: float = 0.1
    tension_bounds: Tuple[float, float] = (1.0, 60.0)
    velocity_bounds: Tuple[float, float] = (0.0, 1.0)
    torque_limit: float = 30.0
    band_over: float = 2.0
    band_under: float = 4.0
    notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tension_bounds", tuple(float(b) for b in self.tension_bounds))
        object.__setattr__(self, "velocity_bounds", tuple(float(b) for b in self.velocity_bounds))
        if min(self.q_tension, self.q_velocity, self.r_torque, self.s_rate) < 0:
            raise ContractViolation("tracking weights must be non-negative")
        for name in ("tension_bounds", "velocity_bounds"):
            low, high = getattr(self, name)
            if not low < high:
                raise ContractViolation(f"{name} must satisfy min < max, got ({low}, {high})")
        if not self.torque_limit > 0:
            raise ContractViolation(f"torque_limit must be positive, got {self.torque_limit}")
        if not (self.band_over > 0 and self.band_under > 0):
            raise ContractViolation("soft band widths must be positive")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["tension_bounds"] = list(self.tension_bounds)
        data["velocity_bounds"] = list(self.velocity_bounds)
        if not self.notes:
            data.pop("notes")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProblemSettings":
        return cls(**data)


@dataclass(frozen=True)
class StageWeights:
    """Diagonals of Q (n_x), R (n_u) and S (n_u)."""

    q: np.ndarray
    r: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        for name in ("q", "r", "s"):
            values = np.asarray(getattr(self, name), dtype=float)
            if values.ndim != 1 or np.any(values < 0) or not np.all(np.isfinite(values)):
                raise ContractViolation(f"weight {name} must be a finite non-negative vector")
            object.__setattr__(self, name, values)
        if self.r.shape != self.s.shape:
            raise ContractViolation("R and S must have the same size")

    @property
    def n_r(self) -> int:
        return self.q.size + 2 * self.r.size


def stage_residual(
    x: np.ndarray,
    u: np.ndarray,
    u_prev: np.ndarray,
    x_ref: np.ndarray,
    u_ref: np.ndarray,
    weights: StageWeights,
) -> np.ndarray:
    """Stacked tracking residual ``[Q^1/2 (x - x_ref); R^1/2 (u - u_ref); S^1/2 (u - u_prev)]``.

    ``x`` and ``u`` may be single vectors or column matrices; references and
    ``u_prev`` are vectors broadcast across columns.

    Example:
        >>> w = StageWeights(np.array([100.0, 10.0]), np.array([1.0]), np.array([0.1]))
        >>> stage_residual(np.array([1.0, 0.0]), np.zeros(1), np.zeros(1), np.zeros(2), np.zeros(1), w)
        array([10.,  0.,  0.,  0.])
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[0] != weights.q.size or u.shape[0] != weights.r.size:
        raise ContractViolation(
            f"residual expects {weights.q.size} states and {weights.r.size} controls, "
            f"got shapes {x.shape} and {u.shape}"
        )
    if x.ndim != u.ndim:
        raise ContractViolation("state and control must both be vectors or both be matrices")

    def col(v):
        v = np.asarray(v, dtype=float)
        return v[:, None] if x.ndim == 2 else v

    return np.concatenate(
        [
            col(np.sqrt(weights.q)) * (x - col(x_ref)),
            col(np.sqrt(weights.r)) * (u - col(u_ref)),
            col(np.sqrt(weights.s)) * (u - col(u_prev)),
        ],
        axis=0,
    )


@dataclass(eq=False)
class HorizonReference:
    """Per-timestep references over one horizon.

    Attributes:
        states: Equilibrium states ``[T_ref, v_ref]``, shape (H, 2N)
        controls: Equilibrium torques, shape (H, N)
        upstream: Unwind velocity at each timestep, shape (H,)
    """

    states: np.ndarray
    controls: np.ndarray
    upstream: np.ndarray

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @classmethod
    def from_schedule(
        cls, plant: PlantParams, tensions: np.ndarray, upstream: np.ndarray
    ) -> "HorizonReference":
        tensions = np.atleast_2d(np.asarray(tensions, dtype=float))
        upstream = np.asarray(upstream, dtype=float).reshape(-1)
        if tensions.shape[0] != upstream.size:
            raise ContractViolation("tension and upstream schedules must cover the same horizon")
        states = np.array([reference_state(t, v0, plant) for t, v0 in zip(tensions, upstream)])
        controls = np.array([equilibrium_torques(x, plant) for x in states])
        return cls(states=states, controls=controls, upstream=upstream)


def box_constraints(X: np.ndarray, U: np.ndarray, settings: ProblemSettings) -> np.ndarray:
    """Tension, velocity and torque bounds as ``c >= 0``, stacked into 6N rows."""
    n = U.shape[0]
    tension, velocity = X[:n], X[n:]
    return np.concatenate(
        [
            tension - settings.tension_bounds[0],
            settings.tension_bounds[1] - tension,
            velocity - settings.velocity_bounds[0],
            settings.velocity_bounds[1] - velocity,
            U + settings.torque_limit,
            settings.torque_limit - U,
        ],
        axis=0,
    )


class R2RProblem:
    """Tracking problem for an N-roller line.

    Hard constraints are the 6N box bounds on tensions, velocities and
    torques. The two soft classes are over-tension ``T_ref + band_over - T``
    and under-tension ``T - (T_ref - band_under)``. All constraints are
    satisfied when non-negative.
    """

    def __init__(self, plant: PlantParams, settings: Optional[ProblemSettings] = None):
        self.plant = plant
        self.settings = settings or ProblemSettings()

    @property
    def n_rollers(self) -> int:
        return self.plant.n_rollers

    @property
    def n_hard(self) -> int:
        return 6 * self.n_rollers

    @property
    def soft_dims(self) -> Tuple[int, ...]:
        return (self.n_rollers,) * N_SOFT_CLASSES

    def weights(self) -> StageWeights:
        n = self.n_rollers
        s = self.settings
        return StageWeights(
            q=np.concatenate([np.full(n, s.q_tension), np.full(n, s.q_velocity)]),
            r=np.full(n, s.r_torque),
            s=np.full(n, s.s_rate),
        )

    def hard_constraints(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return box_constraints(X, U, self.settings)

    def soft_constraints(self, X: np.ndarray, tension_ref: np.ndarray) -> List[np.ndarray]:
        n = self.n_rollers
        tension = X[:n]
        ref = tension_ref[:, None] if X.ndim == 2 else tension_ref
        return [
            ref + self.settings.band_over - tension,
            tension - (ref - self.settings.band_under),
        ]

    def hard_violation(self, x: np.ndarray, u: np.ndarray) -> float:
        """Largest hard-constraint violation at one state/control pair."""
        values = self.hard_constraints(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
        return float(np.max(np.maximum(0.0, -values)))

    def reference(self, tensions: np.ndarray, upstream: np.ndarray) -> HorizonReference:
        return HorizonReference.from_schedule(self.plant, tensions, upstream)

    def functions(
        self, reference: HorizonReference, initial_control: Optional[np.ndarray] = None
    ) -> ProblemFunctions:
        """Problem functions over the horizon of ``reference``.

        Args:
            reference: Per-timestep references and unwind velocities
            initial_control: Control applied just before the horizon, used by
                the rate term at k = 1 (defaults to the first reference torque)
        """
        n = self.n_rollers
        weights = self.weights()
        if initial_control is None:
            initial_control = reference.controls[0]

        def dynamics(k, X, U):
            return propagate(X, U, self.plant, reference.upstream[k])

        def residual(k, X, U, u_prev):
            return stage_residual(X, U, u_prev, reference.states[k], reference.controls[k], weights)

        def hard(k, X, U):
            return self.hard_constraints(X, U)

        def soft(k, X, U):
            return self.soft_constraints(X, reference.states[k][:n])

        return ProblemFunctions(
            horizon=reference.horizon,
            n_x=self.plant.n_x,
            n_u=self.plant.n_u,
            n_r=weights.n_r,
            n_hard=self.n_hard,
            soft_dims=self.soft_dims,
            dynamics=dynamics,
            residual=residual,
            hard=hard,
            soft=soft,
            initial_control=initial_control,
        )
