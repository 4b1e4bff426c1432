"""Violation metrics and the adaptive trust-region and penalty rules.

All threshold comparisons are strict: a violation exactly at a threshold
neither expands nor contracts the radius and never raises a penalty.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Deque, Dict, Optional, Sequence, Tuple

import numpy as np

from rollbundle.exceptions import ContractViolation

HISTORY_LENGTH = 16


@dataclass(frozen=True)
class AdaptConfig:
    """Tuning of the adaptive loop.

    ``mu_max``, ``gamma_max``, ``soft_thresholds``, ``eps_feas`` and ``eps_z``
    have no standard value and are tuned for the shipped plant.
    """

    beta_exp: float = 1.5
    beta_con: float = 0.5
    delta_init: float = 0.5
    delta_min: float = 0.01
    delta_max: float = 2.0
    tau_feas: float = 1e-4
    tau_viol: float = 1e-2
    rho_mu: float = 2.0
    rho_gamma: float = 2.0
    mu_init: float = 10.0
    mu_max: float = 1e6
    gamma_init: Tuple[float, ...] = (100.0, 10.0)
    gamma_max: Tuple[float, ...] = (1e6, 1e6)
    soft_thresholds: Optional[Tuple[float, ...]] = None
    eps_feas: float = 1e-5
    eps_z: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "gamma_init", tuple(float(g) for g in self.gamma_init))
        object.__setattr__(self, "gamma_max", tuple(float(g) for g in self.gamma_max))
        if self.soft_thresholds is None:
            object.__setattr__(self, "soft_thresholds", (self.tau_viol,) * len(self.gamma_init))
        else:
            object.__setattr__(self, "soft_thresholds", tuple(float(t) for t in self.soft_thresholds))
        self._validate()

    def _validate(self):
        def check(ok: bool, message: str):
            if not ok:
                raise ContractViolation(message)

        check(self.beta_exp > 1, f"beta_exp must exceed 1, got {self.beta_exp}")
        check(0 < self.beta_con < 1, f"beta_con must lie in (0, 1), got {self.beta_con}")
        check(
            0 < self.delta_min <= self.delta_init <= self.delta_max,
            "radii must satisfy 0 < delta_min <= delta_init <= delta_max",
        )
        check(
            0 < self.eps_feas < self.tau_feas < self.tau_viol,
            "thresholds must satisfy 0 < eps_feas < tau_feas < tau_viol",
        )
        check(self.rho_mu > 1 and self.rho_gamma > 1, "penalty growth factors must exceed 1")
        check(0 < self.mu_init <= self.mu_max, "mu must satisfy 0 < mu_init <= mu_max")
        check(self.eps_z > 0, "eps_z must be positive")
        n = len(self.gamma_init)
        check(
            len(self.gamma_max) == n and len(self.soft_thresholds) == n,
            "gamma_init, gamma_max and soft_thresholds must have one entry per soft class",
        )
        check(
            all(0 < g0 <= gm for g0, gm in zip(self.gamma_init, self.gamma_max)),
            "every soft penalty must satisfy 0 < gamma_init <= gamma_max",
        )
        check(all(t > 0 for t in self.soft_thresholds), "soft thresholds must be positive")

    @property
    def n_soft(self) -> int:
        return len(self.gamma_init)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta_exp": self.beta_exp,
            "beta_con": self.beta_con,
            "delta_init": self.delta_init,
            "delta_min": self.delta_min,
            "delta_max": self.delta_max,
            "tau_feas": self.tau_feas,
            "tau_viol": self.tau_viol,
            "rho_mu": self.rho_mu,
            "rho_gamma": self.rho_gamma,
            "mu_init": self.mu_init,
            "mu_max": self.mu_max,
            "gamma_init": list(self.gamma_init),
            "gamma_max": list(self.gamma_max),
            "soft_thresholds": list(self.soft_thresholds),
            "eps_feas": self.eps_feas,
            "eps_z": self.eps_z,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AdaptConfig":
        data = dict(data)
        data.pop("notes", None)
        for key in ("gamma_init", "gamma_max", "soft_thresholds"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class Violations:
    """Constraint violation metrics of one subproblem solution.

    Attributes:
        dyn: Largest dynamics defect, max_k ||s_k||_inf
        hard: Largest hard violation, max_k ||w_k||_inf
        soft: Per-class total soft violation, sum_k ||d_kj||_1
    """

    dyn: float
    hard: float
    soft: Tuple[float, ...] = ()

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.dyn, self.hard) + tuple(self.soft)


@dataclass
class AdaptState:
    """Radius, penalties and recent violation history of a running solve."""

    delta: float
    mu: float
    gammas: Tuple[float, ...]
    iteration: int = 0
    history: Deque[Violations] = field(default_factory=lambda: deque(maxlen=HISTORY_LENGTH))

    @classmethod
    def initial(cls, config: AdaptConfig) -> "AdaptState":
        return cls(delta=config.delta_init, mu=config.mu_init, gammas=tuple(config.gamma_init))

    def check(self, config: AdaptConfig) -> None:
        """Raise if the state left its admissible ranges."""
        if not config.delta_min <= self.delta <= config.delta_max:
            raise ContractViolation(f"delta {self.delta} outside [{config.delta_min}, {config.delta_max}]")
        if not 0 < self.mu <= config.mu_max:
            raise ContractViolation(f"mu {self.mu} outside (0, {config.mu_max}]")
        if any(not 0 < g <= gm for g, gm in zip(self.gammas, config.gamma_max)):
            raise ContractViolation(f"gammas {self.gammas} outside (0, {config.gamma_max}]")


def violations(sol) -> Violations:
    """Violation metrics from the slacks of a subproblem solution."""
    s = np.asarray(sol.dynamics_slacks, dtype=float)
    w = np.asarray(sol.hard_slacks, dtype=float)
    nu_dyn = float(np.max(np.abs(s))) if s.size else 0.0
    nu_hard = float(np.max(np.abs(w))) if w.size else 0.0
    nu_soft = tuple(float(np.sum(np.abs(d))) for d in sol.soft_slacks)
    return Violations(nu_dyn, nu_hard, nu_soft)


def update_trust_region(state: AdaptState, config: AdaptConfig, nu_dyn: float, nu_hard: float) -> float:
    """New radius: expand when both metrics are below tau_feas, contract when either exceeds tau_viol.

    Example:
        >>> update_trust_region(AdaptState.initial(AdaptConfig()), AdaptConfig(), 1e-5, 1e-5)
        0.75
    """
    if nu_dyn < config.tau_feas and nu_hard < config.tau_feas:
        return min(config.beta_exp * state.delta, config.delta_max)
    if nu_dyn > config.tau_viol or nu_hard > config.tau_viol:
        return max(config.beta_con * state.delta, config.delta_min)
    return state.delta


def update_penalties(
    state: AdaptState,
    config: AdaptConfig,
    nu_dyn: float,
    nu_hard: float,
    nu_soft: Sequence[float],
) -> Tuple[float, Tuple[float, ...]]:
    """New (mu, gammas); each grows geometrically up to its cap when its violation is too large."""
    mu = state.mu
    if nu_dyn > config.tau_viol or nu_hard > config.tau_viol:
        mu = min(config.rho_mu * mu, config.mu_max)
    gammas = tuple(
        min(config.rho_gamma * gamma, cap) if nu > tau else gamma
        for gamma, cap, nu, tau in zip(state.gammas, config.gamma_max, nu_soft, config.soft_thresholds)
    )
    return mu, gammas


def converged(nu_dyn: float, nu_hard: float, step_norm: float, config: AdaptConfig) -> bool:
    return nu_dyn < config.eps_feas and nu_hard < config.eps_feas and step_norm < config.eps_z


def advance(state: AdaptState, config: AdaptConfig, v: Violations) -> AdaptState:
    """Apply both update rules and record ``v``; returns a new state."""
    mu, gammas = update_penalties(state, config, v.dyn, v.hard, v.soft)
    history = deque(state.history, maxlen=HISTORY_LENGTH)
    history.append(v)
    return replace(
        state,
        delta=update_trust_region(state, config, v.dyn, v.hard),
        mu=mu,
        gammas=gammas,
        iteration=state.iteration + 1,
        history=history,
    )


def contract(state: AdaptState, config: AdaptConfig) -> AdaptState:
    """Shrink the radius once, as after a failed subproblem."""
    return replace(state, delta=max(config.beta_con * state.delta, config.delta_min))


def max_penalty_increases(config: AdaptConfig) -> Tuple[int, Tuple[int, ...]]:
    """Upper bounds on how often mu and each gamma can grow."""
    return (
        _increase_count(config.mu_init, config.mu_max, config.rho_mu),
        tuple(
            _increase_count(g0, gm, config.rho_gamma)
            for g0, gm in zip(config.gamma_init, config.gamma_max)
        ),
    )


def _increase_count(start: float, cap: float, rate: float) -> int:
    return ceil_log(cap / start, rate) if cap > start else 0


def ceil_log(ratio: float, base: float) -> int:
    """ceil(log_base(ratio)), with values within 1e-9 of an integer snapped to it.

    Example:
        >>> ceil_log(1e6 / 10.0, 2.0)
        17
    """
    value = math.log(ratio) / math.log(base)
    nearest = round(value)
    # log ratios of exact powers land a few ulps off an integer
    if abs(value - nearest) < 1e-9:
        return int(nearest)
    return int(math.ceil(value))
