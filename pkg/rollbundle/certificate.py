"""Penalized objective, Lipschitz estimates and convergence-bound monitors.

The bounds assume true Lipschitz constants. Only sampled estimates are
available, so monitors report whether each inequality held and never stop
a run.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from rollbundle.adapt import AdaptConfig, ceil_log, max_penalty_increases
from rollbundle.bundle import ProblemFunctions, Trajectory
from rollbundle.exceptions import ContractViolation

logger = logging.getLogger(__name__)

C_APPROX = 2.0
SAFETY_FACTOR = 1.5
_FLOOR = 1e-12

SATISFIED = "satisfied"
VIOLATED = "violated"
NOT_APPLICABLE = "not applicable"

PHI_MIN_OBSERVED = "minimum observed penalized objective"
PHI_MIN_A_PRIORI = "a priori lower bound (sum of squares >= 0)"


def negative_part(values: np.ndarray) -> np.ndarray:
    """Element-wise max(0, -v): the violated amount of ``v >= 0``."""
    return np.maximum(0.0, -np.asarray(values, dtype=float))


def penalized_objective(
    z: Trajectory,
    mu: float,
    gammas: Sequence[float],
    funcs: ProblemFunctions,
    x_init: Optional[np.ndarray] = None,
) -> float:
    """Exact-penalty merit function of a trajectory.

    Quadratic cost over k = 1..H plus ``mu`` times the l1 dynamics defects and
    hard violations and ``gamma_j`` times the l1 soft violations over
    k = 1..H-1. With ``x_init`` the anchor defect ``mu * ||x_1 - x_init||_1``
    is added. The rate term uses ``funcs.previous_controls`` as given.
    """
    if z.horizon != funcs.horizon:
        raise ContractViolation(f"trajectory horizon {z.horizon} != problem horizon {funcs.horizon}")
    gammas = tuple(gammas)
    if len(gammas) != funcs.n_soft:
        raise ContractViolation(f"{funcs.n_soft} soft classes but {len(gammas)} penalties")
    cost = 0.0
    defect = 0.0
    soft = [0.0] * funcs.n_soft
    for k in range(z.horizon):
        X = z.states[k][:, None]
        U = z.controls[k][:, None]
        cost += float(np.sum(np.asarray(funcs.residual_at(k, X, U)) ** 2))
        if k == z.horizon - 1:
            break
        defect += float(np.sum(np.abs(np.asarray(funcs.dynamics(k, X, U)).ravel() - z.states[k + 1])))
        defect += float(np.sum(negative_part(funcs.hard(k, X, U))))
        for j, block in enumerate(funcs.soft(k, X, U)):
            soft[j] += float(np.sum(negative_part(block)))
    if x_init is not None:
        defect += float(np.sum(np.abs(z.states[0] - np.asarray(x_init, dtype=float))))
    return cost + mu * defect + sum(g * s for g, s in zip(gammas, soft))


@dataclass
class LipschitzEstimates:
    """Lipschitz constants of residual, dynamics and constraints, plus a residual bound.

    ``method`` is ``"user-supplied"`` or ``"sampled-estimate"``; sampled values
    are lower bounds on the true constants, inflated by a safety factor.
    """

    L_r: float
    L_F: float
    L_c: float
    R: float
    method: str = "user-supplied"

    def __post_init__(self):
        for name in ("L_r", "L_F", "L_c", "R"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ContractViolation(f"{name} must be finite and non-negative, got {value}")
            setattr(self, name, max(value, _FLOOR))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def max_slope(
    fn: Callable[[np.ndarray], np.ndarray],
    lower: np.ndarray,
    upper: np.ndarray,
    n_pairs: int,
    rng: np.random.Generator,
) -> float:
    """Largest ``||fn(a) - fn(b)|| / ||a - b||`` over random pairs in a box."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    slope = 0.0
    for _ in range(n_pairs):
        a = rng.uniform(lower, upper)
        b = rng.uniform(lower, upper)
        gap = float(np.linalg.norm(a - b))
        if gap == 0.0:
            continue
        rise = float(np.linalg.norm(np.asarray(fn(a), dtype=float) - np.asarray(fn(b), dtype=float)))
        slope = max(slope, rise / gap)
    return slope


def estimate_lipschitz(
    funcs: ProblemFunctions,
    sample_domain: Tuple[np.ndarray, np.ndarray],
    n_pairs: int = 200,
    rng: Optional[np.random.Generator] = None,
) -> LipschitzEstimates:
    """Sampled Lipschitz constants over a box of stacked ``(x, u)`` points.

    Args:
        funcs: Problem functions
        sample_domain: ``(lower, upper)`` bounds, each of length n_x + n_u
        n_pairs: Random pairs per function and timestep
        rng: Generator for the pairs

    Raises:
        ContractViolation: If the domain has zero diameter or the wrong size
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    lower, upper = (np.asarray(b, dtype=float) for b in sample_domain)
    n = funcs.n_x + funcs.n_u
    if lower.shape != (n,) or upper.shape != (n,):
        raise ContractViolation(f"sample domain bounds must have {n} entries")
    if np.any(upper < lower) or not np.all(np.isfinite(upper - lower)):
        raise ContractViolation("sample domain must be a finite box with lower <= upper")
    if float(np.linalg.norm(upper - lower)) == 0.0:
        raise ContractViolation("sample domain has zero diameter")

    def split(y):
        return y[: funcs.n_x, None], y[funcs.n_x :, None]

    def constraints(k):
        def fn(y):
            X, U = split(y)
            blocks = [np.asarray(funcs.hard(k, X, U)).ravel()]
            blocks += [np.asarray(b).ravel() for b in funcs.soft(k, X, U)]
            return np.concatenate(blocks)

        return fn

    L_r = L_F = L_c = R = 0.0
    for k in range(funcs.horizon):
        L_r = max(L_r, max_slope(lambda y: funcs.residual_at(k, *split(y)).ravel(), lower, upper, n_pairs, rng))
        L_F = max(L_F, max_slope(lambda y: np.asarray(funcs.dynamics(k, *split(y))).ravel(), lower, upper, n_pairs, rng))
        L_c = max(L_c, max_slope(constraints(k), lower, upper, n_pairs, rng))
        for y in rng.uniform(lower, upper, size=(n_pairs, n)):
            R = max(R, float(np.linalg.norm(funcs.residual_at(k, *split(y)))))

    estimates = LipschitzEstimates(
        L_r=SAFETY_FACTOR * L_r,
        L_F=SAFETY_FACTOR * L_F,
        L_c=SAFETY_FACTOR * L_c,
        R=SAFETY_FACTOR * R,
        method="sampled-estimate",
    )
    logger.info(
        "sampled Lipschitz estimates: L_r=%.4g L_F=%.4g L_c=%.4g R=%.4g",
        estimates.L_r, estimates.L_F, estimates.L_c, estimates.R,
    )
    return estimates


def lipschitz_bound(est: LipschitzEstimates, H: int, mu: float, gammas: Sequence[float]) -> float:
    """Lipschitz constant of the penalized objective over a horizon of ``H`` steps."""
    coupled = H - 1
    return (
        2.0 * H * est.R * est.L_r
        + coupled * mu * (1.0 + est.L_F + est.L_c)
        + coupled * est.L_c * float(sum(gammas))
    )


@dataclass
class MonitorCheck:
    name: str
    lhs: float
    rhs: float
    status: str


@dataclass
class MonitorRecord:
    """Outcome of the per-iteration inequality checks."""

    iteration: int
    checks: List[MonitorCheck]
    phi_prev: float = float("nan")
    phi_next: float = float("nan")

    @property
    def satisfied(self) -> bool:
        return all(check.status != VIOLATED for check in self.checks)

    def check(self, name: str) -> MonitorCheck:
        for item in self.checks:
            if item.name == name:
                return item
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "phi_prev": self.phi_prev,
            "phi_next": self.phi_next,
            "checks": [asdict(c) for c in self.checks],
        }


def monitor_iteration(
    prev_z: Trajectory,
    next_z: Trajectory,
    j_sub: float,
    delta: float,
    mu: float,
    gammas: Sequence[float],
    est: LipschitzEstimates,
    funcs: ProblemFunctions,
    tau_viol: float,
    violation_exceeded: bool = False,
    x_init: Optional[np.ndarray] = None,
    iteration: int = 0,
) -> MonitorRecord:
    """Check the approximation, bounded-variation and feasibility-improvement inequalities.

    ``delta`` is the per-timestep radius; the checks use the trajectory-level
    radius ``sqrt(H) * delta``. The feasibility-improvement check is armed only
    when that radius is at most the critical radius and a violation reached
    ``tau_viol`` in this iteration.
    """
    H = prev_z.horizon
    l_phi = lipschitz_bound(est, H, mu, gammas)
    radius = math.sqrt(H) * delta
    phi_prev = penalized_objective(prev_z, mu, gammas, funcs, x_init)
    phi_next = penalized_objective(next_z, mu, gammas, funcs, x_init)

    def status(ok: bool) -> str:
        return SATISFIED if ok else VIOLATED

    approximation = abs(phi_next - j_sub)
    approximation_bound = C_APPROX * l_phi * radius
    variation_bound = phi_prev + C_APPROX * l_phi * radius
    checks = [
        MonitorCheck("approximation", approximation, approximation_bound, status(approximation <= approximation_bound)),
        MonitorCheck("bounded_variation", phi_next, variation_bound, status(phi_next <= variation_bound)),
    ]

    critical = mu * tau_viol / (16.0 * C_APPROX * l_phi)
    decrease_bound = phi_prev - mu * tau_viol / 4.0
    if radius <= critical and violation_exceeded:
        checks.append(
            MonitorCheck("feasibility_improvement", phi_next, decrease_bound, status(phi_next <= decrease_bound))
        )
    else:
        checks.append(MonitorCheck("feasibility_improvement", phi_next, decrease_bound, NOT_APPLICABLE))

    record = MonitorRecord(iteration=iteration, checks=checks, phi_prev=phi_prev, phi_next=phi_next)
    for check in checks:
        if check.status == VIOLATED:
            logger.warning(
                "iteration %d: %s monitor violated (%.6g > %.6g)", iteration, check.name, check.lhs, check.rhs
            )
    return record


@dataclass
class BoundReport:
    """Iteration-complexity bounds for reaching near-feasibility.

    Attributes:
        l_phi: Lipschitz bound of the penalized objective at the stabilized penalties
        delta_bar: Critical trust radius
        k_star: Bound on iterations spent raising penalties
        k_delta: Contractions needed to reach the critical radius
        n_viol: Bound on iterations with a violation above tau_viol
        k_feas: ``k_star + k_delta + n_viol``
    """

    l_phi: float
    delta_bar: float
    k_star: int
    k_delta: int
    n_viol: int
    kappa: Optional[float] = None
    c_approx: float = C_APPROX
    phi_min: float = 0.0
    phi_min_label: str = PHI_MIN_A_PRIORI
    estimates: Optional[LipschitzEstimates] = None
    monitors: List[MonitorRecord] = field(default_factory=list)
    k_feas: int = field(init=False)

    def __post_init__(self):
        self.k_feas = self.k_star + self.k_delta + self.n_viol

    @property
    def monitor_pass_rate(self) -> Dict[str, float]:
        """Share of armed checks that held, per check name."""
        totals: Dict[str, List[int]] = {}
        for record in self.monitors:
            for check in record.checks:
                if check.status == NOT_APPLICABLE:
                    continue
                passed, armed = totals.setdefault(check.name, [0, 0])
                totals[check.name] = [passed + (check.status == SATISFIED), armed + 1]
        return {name: passed / armed for name, (passed, armed) in totals.items()}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "l_phi": self.l_phi,
            "delta_bar": self.delta_bar,
            "k_star": self.k_star,
            "k_delta": self.k_delta,
            "n_viol": self.n_viol,
            "k_feas": self.k_feas,
            "kappa": self.kappa,
            "c_approx": self.c_approx,
            "phi_min": self.phi_min,
            "phi_min_label": self.phi_min_label,
            "estimates": None if self.estimates is None else self.estimates.to_dict(),
            "monitor_pass_rate": self.monitor_pass_rate,
            "monitors": [record.to_dict() for record in self.monitors],
        }

    def __str__(self) -> str:
        lines = [
            f"L_phi:     {self.l_phi:.6g}",
            f"delta_bar: {self.delta_bar:.6g}",
            f"K*:        {self.k_star}",
            f"K_delta:   {self.k_delta}",
            f"N_viol:    {self.n_viol}",
            f"K_feas:    {self.k_feas}",
            f"phi_min:   {self.phi_min:.6g} ({self.phi_min_label})",
        ]
        if self.kappa is not None:
            lines.append(f"kappa:     {self.kappa:.6g}")
        for name, rate in sorted(self.monitor_pass_rate.items()):
            lines.append(f"monitor {name}: {100 * rate:.1f}% satisfied")
        return "\n".join(lines)


def complexity_bounds(
    config: AdaptConfig,
    est: LipschitzEstimates,
    H: int,
    phi_at_kstar: float,
    phi_min: Optional[float],
    delta_at_kstar: float,
    mu_bar: Optional[float] = None,
    gammas_bar: Optional[Sequence[float]] = None,
    n_vars: Optional[int] = None,
) -> BoundReport:
    """Evaluate the closed-form bounds on iterations to near-feasibility.

    Without ``mu_bar``/``gammas_bar`` the penalty caps stand in for the
    stabilized penalties (a priori report). Without ``phi_min`` the lower bound
    0 of the quadratic cost is used.

    Example:
        >>> cfg = AdaptConfig(gamma_init=(10.0,), gamma_max=(1e6,))
        >>> complexity_bounds(cfg, LipschitzEstimates(1, 1, 1, 1), 15, 0.0, 0.0, 0.5).k_star
        34
    """
    mu_bar = config.mu_max if mu_bar is None else float(mu_bar)
    gammas_bar = tuple(config.gamma_max if gammas_bar is None else gammas_bar)
    label = PHI_MIN_OBSERVED
    if phi_min is None:
        phi_min, label = 0.0, PHI_MIN_A_PRIORI

    l_phi = lipschitz_bound(est, H, mu_bar, gammas_bar)
    delta_bar = mu_bar * config.tau_viol / (16.0 * C_APPROX * l_phi)

    mu_count, gamma_counts = max_penalty_increases(config)
    k_star = mu_count + sum(gamma_counts)
    k_delta = ceil_log(delta_bar / delta_at_kstar, config.beta_con) if delta_at_kstar > delta_bar else 0
    n_viol = max(0, int(math.floor(4.0 * (phi_at_kstar - phi_min) / (mu_bar * config.tau_viol))))
    kappa = 1.0 / math.sqrt(n_vars) if n_vars else None

    return BoundReport(
        l_phi=l_phi,
        delta_bar=delta_bar,
        k_star=k_star,
        k_delta=k_delta,
        n_viol=n_viol,
        kappa=kappa,
        phi_min=phi_min,
        phi_min_label=label,
        estimates=est,
    )
