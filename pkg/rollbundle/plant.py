"""Roll-to-roll web transport dynamics.

State layout is ``x = [T_1..T_N, v_1..v_N]`` (tensions in N, roller surface
velocities in m/s) and control ``u = [u_1..u_N]`` (motor torques in N*m).
All functions accept either a single vector or a matrix whose columns are
independent samples, so bundle construction evaluates a whole stencil at once.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Union

import numpy as np

from rollbundle.exceptions import ContractViolation, SingularReferenceError

ArrayLike = Union[float, Sequence[float], np.ndarray]

_PER_ROLLER = ("span_lengths", "inertias", "frictions", "radii", "noise_gains")


@dataclass(eq=False)
class PlantParams:
    """Physical constants of an N-roller line.

    Attributes:
        n_rollers: Number of driven rollers N (at least 2)
        ea: Web stiffness E*A in N
        span_lengths: Span lengths L_i in m
        inertias: Roller inertias J_i in kg*m^2
        frictions: Viscous damping gains f_i, entering as (f_i/J_i) v_i
        radii: Roller radii R_i in m
        noise_gains: Velocity noise intensities b_i in (m/s)/sqrt(s)
        dt: Sampling period in s
    """

    n_rollers: int
    ea: float
    span_lengths: ArrayLike
    inertias: ArrayLike
    frictions: ArrayLike
    radii: ArrayLike
    noise_gains: ArrayLike = 0.0
    dt: float = 0.01
    notes: str = ""
    input_gain: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.n_rollers) != self.n_rollers or self.n_rollers < 2:
            raise ContractViolation(f"n_rollers must be an integer >= 2, got {self.n_rollers}")
        self.n_rollers = int(self.n_rollers)
        self.ea = float(self.ea)
        self.dt = float(self.dt)
        if not (math.isfinite(self.ea) and self.ea > 0):
            raise ContractViolation(f"ea must be positive, got {self.ea}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ContractViolation(f"dt must be positive, got {self.dt}")

        for name in _PER_ROLLER:
            raw = np.asarray(getattr(self, name), dtype=float)
            try:
                values = np.broadcast_to(raw, (self.n_rollers,)).copy()
            except ValueError:
                raise ContractViolation(
                    f"{name} must be a scalar or have {self.n_rollers} entries, got shape {raw.shape}"
                ) from None
            if not np.all(np.isfinite(values)):
                raise ContractViolation(f"{name} must be finite")
            if name == "noise_gains":
                if np.any(values < 0):
                    raise ContractViolation("noise_gains must be non-negative")
            elif np.any(values <= 0):
                raise ContractViolation(f"{name} must be strictly positive")
            setattr(self, name, values)

        self.input_gain = self.radii / self.inertias

    @property
    def n_x(self) -> int:
        return 2 * self.n_rollers

    @property
    def n_u(self) -> int:
        return self.n_rollers

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "n_rollers": self.n_rollers,
            "ea": self.ea,
            "dt": self.dt,
        }
        for name in _PER_ROLLER:
            data[name] = [float(v) for v in getattr(self, name)]
        if self.notes:
            data["notes"] = self.notes
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PlantParams":
        return cls(**data)


def _columns(values: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-roller vector so it broadcasts against sample columns."""
    return values.reshape((-1,) + (1,) * (ndim - 1))


def _check_state(x: ArrayLike, params: PlantParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[0] != params.n_x:
        raise ContractViolation(f"state must have {params.n_x} rows, got shape {x.shape}")
    return x


def _check_control(u: ArrayLike, params: PlantParams) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim not in (1, 2) or u.shape[0] != params.n_u:
        raise ContractViolation(f"control must have {params.n_u} rows, got shape {u.shape}")
    return u


def drift(x: ArrayLike, params: PlantParams, upstream_velocity: float = 0.0) -> np.ndarray:
    """Control-free part of the tension and velocity derivatives.

    Boundary tensions T_0 and T_{N+1} are zero; the velocity feeding span 1 is
    the unwind velocity ``upstream_velocity``.

    Args:
        x: State vector (2N,) or matrix of state columns (2N, m)
        params: Plant constants
        upstream_velocity: Unwind velocity v_0 in m/s

    Returns:
        Array with the same shape as ``x`` holding dT/dt and dv/dt

    Raises:
        ContractViolation: If ``x`` does not have 2N rows
    """
    x = _check_state(x, params)
    n = params.n_rollers
    tension, velocity = x[:n], x[n:]

    def col(values):
        return _columns(values, x.ndim)

    zero_row = np.zeros_like(tension[:1])
    tension_prev = np.concatenate([zero_row, tension[:-1]], axis=0)
    tension_next = np.concatenate([tension[1:], zero_row], axis=0)
    velocity_prev = np.concatenate(
        [np.full_like(velocity[:1], float(upstream_velocity)), velocity[:-1]], axis=0
    )

    lengths = col(params.span_lengths)
    d_tension = (params.ea / lengths) * (velocity - velocity_prev) + (
        tension_prev * velocity_prev - tension * velocity
    ) / lengths
    d_velocity = (col(params.radii) ** 2 / col(params.inertias)) * (tension_next - tension) - (
        col(params.frictions) / col(params.inertias)
    ) * velocity
    return np.concatenate([d_tension, d_velocity], axis=0)


def input_map(u: ArrayLike, params: PlantParams) -> np.ndarray:
    """Contribution G u of the torques to the state derivative."""
    u = _check_control(u, params)
    gain = _columns(params.input_gain, u.ndim)
    return np.concatenate([np.zeros_like(u), gain * u], axis=0)


def propagate(
    x: ArrayLike, u: ArrayLike, params: PlantParams, upstream_velocity: float = 0.0
) -> np.ndarray:
    """Deterministic Euler step ``F(x, u) = x + (f(x) + G u) dt``.

    Example:
        >>> params = PlantParams(2, 1000.0, 1.0, 1.0, 0.1, 0.05)
        >>> propagate(np.zeros(4), np.zeros(2), params)
        array([0., 0., 0., 0.])
    """
    x = _check_state(x, params)
    u = _check_control(u, params)
    if x.ndim != u.ndim or (x.ndim == 2 and x.shape[1] != u.shape[1]):
        raise ContractViolation(f"state shape {x.shape} and control shape {u.shape} disagree")
    return x + (drift(x, params, upstream_velocity) + input_map(u, params)) * params.dt


def step_stochastic(
    x: ArrayLike,
    u: ArrayLike,
    params: PlantParams,
    upstream_velocity: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Euler-Maruyama step: ``propagate`` plus ``b_i sqrt(dt) xi_i`` on velocities.

    With every noise gain at zero the generator is left untouched and the
    result is exactly ``propagate(x, u)``.
    """
    nxt = propagate(x, u, params, upstream_velocity)
    if not np.any(params.noise_gains):
        return nxt
    n = params.n_rollers
    velocity_shape = nxt[n:].shape
    scale = _columns(params.noise_gains, nxt.ndim) * math.sqrt(params.dt)
    nxt[n:] = nxt[n:] + scale * rng.standard_normal(velocity_shape)
    return nxt


def reference_velocities(
    tensions_ref: ArrayLike, upstream_velocity: float, params: PlantParams
) -> np.ndarray:
    """Equilibrium velocity chain from mass conservation.

    ``v_i = (EA - T_{i-1}) / (EA - T_i) * v_{i-1}`` with ``T_0 = 0`` and
    ``v_0 = upstream_velocity``. At the resulting pair every tension
    derivative vanishes.

    Raises:
        SingularReferenceError: If any reference tension is >= EA
    """
    tensions = np.asarray(tensions_ref, dtype=float)
    if tensions.shape != (params.n_rollers,):
        raise ContractViolation(
            f"tensions_ref must have {params.n_rollers} entries, got shape {tensions.shape}"
        )
    if np.any(tensions >= params.ea):
        span = int(np.argmax(tensions >= params.ea)) + 1
        raise SingularReferenceError(
            f"reference tension of span {span} ({tensions[span - 1]} N) is not below EA={params.ea} N"
        )

    velocities = np.empty(params.n_rollers)
    upstream_tension, upstream = 0.0, float(upstream_velocity)
    for i, tension in enumerate(tensions):
        upstream = (params.ea - upstream_tension) / (params.ea - tension) * upstream
        velocities[i] = upstream
        upstream_tension = tension
    return velocities


def equilibrium_torques(x: ArrayLike, params: PlantParams) -> np.ndarray:
    """Torques that zero every velocity derivative at state ``x``."""
    x = _check_state(x, params)
    n = params.n_rollers
    tension, velocity = x[:n], x[n:]
    tension_next = np.concatenate([tension[1:], np.zeros_like(tension[:1])], axis=0)
    radii = _columns(params.radii, x.ndim)
    frictions = _columns(params.frictions, x.ndim)
    return (frictions * velocity - radii**2 * (tension_next - tension)) / radii


def reference_state(
    tensions_ref: ArrayLike, upstream_velocity: float, params: PlantParams
) -> np.ndarray:
    """Stacked equilibrium state ``[T^r, v^r]``."""
    tensions = np.asarray(tensions_ref, dtype=float)
    return np.concatenate([tensions, reference_velocities(tensions, upstream_velocity, params)])
