"""Exhaustive oracles and randomized property campaigns on tiny instances.

Every instance is small enough (N <= 2, H <= 4, m <= 8) that the vertex set
of the subproblem can be enumerated, so the solver can be checked against
brute force. ``run_property_campaign`` runs the whole invariant suite over
seeded random instances and reports a pass/fail matrix.
"""

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from rollbundle import certificate
from rollbundle.adapt import AdaptConfig, AdaptState, Violations, advance, max_penalty_increases
from rollbundle.bundle import BundleSet, ProblemFunctions, Sampler, Trajectory, build_bundles
from rollbundle.exceptions import OracleTooLargeError
from rollbundle.orchestrator import replay_consistent, tbm_solve
from rollbundle.plant import PlantParams, drift, reference_state
from rollbundle.problem import R2RProblem
from rollbundle.subproblem import ConvexSubproblem, SolverSettings, assemble, evaluate, recover, solve, vertex_weights

logger = logging.getLogger(__name__)

MAX_VERTEX_ASSIGNMENTS = 100_000
MAX_ROLLERS = 2
MAX_HORIZON = 4
MAX_SAMPLES = 8

AFFINE_TOLERANCE = 1e-10
IDENTITY_TOLERANCE = 1e-8
SOLVER_SLACK = 1e-6
CONSERVATION_TOLERANCE = 1e-9

CHECKS = (
    "affine_exactness",
    "phi_consistency",
    "subproblem_decrease",
    "oracle_consistency",
    "oracle_bound",
    "simplex",
    "recovery",
    "penalty_stabilization",
    "outer_loop_replay",
    "plant_conservation",
)


def ball_sampler(n_samples: int) -> Sampler:
    """Sampler returning the center plus ``n_samples - 1`` Gaussian draws clipped to the ball.

    Keeps bundles small enough for vertex enumeration.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}")

    def sample(center_x, center_u, delta, rng, anchored=False):
        n_x = len(center_x)
        center = np.concatenate([np.asarray(center_x, dtype=float), np.asarray(center_u, dtype=float)])
        offsets = rng.normal(scale=delta / 2.0, size=(center.size, n_samples))
        offsets[:, 0] = 0.0
        norms = np.linalg.norm(offsets, axis=0)
        offsets *= np.where(norms > delta, delta / np.maximum(norms, np.finfo(float).tiny), 1.0)
        if anchored:
            offsets[:n_x] = 0.0
        samples = center[:, None] + offsets
        return samples[:n_x], samples[n_x:]

    return sample


@dataclass(eq=False)
class OracleInstance:
    """A tiny problem with its bundles and assembled subproblem.

    Attributes:
        seed: Campaign seed the instance was drawn from
        index: Position in the campaign; ``(seed, index)`` reproduces the instance
        funcs: Problem functions, rate term lagged on ``z``
        z: Iterate the bundles are centered on
        delta: Sampling radius
        mu: Dynamics and hard-constraint penalty
        gammas: Soft-class penalties
        n_samples: Columns per bundle
        x_init: Anchor state, or None
        plant: Plant of roll-to-roll instances (None for synthetic ones)
        label: Instance family
    """

    seed: int
    index: int
    funcs: ProblemFunctions
    z: Trajectory
    delta: float
    mu: float
    gammas: Tuple[float, ...]
    n_samples: int = MAX_SAMPLES
    x_init: Optional[np.ndarray] = None
    plant: Optional[PlantParams] = None
    label: str = "r2r"
    bundles: BundleSet = field(init=False, repr=False)
    subproblem: ConvexSubproblem = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_samples > MAX_SAMPLES or self.z.horizon > MAX_HORIZON:
            raise OracleTooLargeError(
                f"oracle instances need m <= {MAX_SAMPLES} and H <= {MAX_HORIZON}, "
                f"got m={self.n_samples}, H={self.z.horizon}"
            )
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.index, 0))
        self.bundles = build_bundles(
            self.z, self.delta, self.funcs, sequence, self.x_init, sampler=ball_sampler(self.n_samples)
        )
        self.subproblem = assemble(self.bundles, self.mu, self.gammas, self.x_init)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "index": self.index,
            "label": self.label,
            "delta": self.delta,
            "mu": self.mu,
            "gammas": list(self.gammas),
            "z": {"states": self.z.states.tolist(), "controls": self.z.controls.tolist()},
            "plant": None if self.plant is None else self.plant.to_dict(),
            "subproblem": self.subproblem.to_dict(),
        }


@dataclass
class OracleResult:
    """Best vertex assignment of a subproblem."""

    value: float
    assignment: Tuple[int, ...]
    count: int


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, 1)))


def random_plant(rng: np.random.Generator, n_rollers: int = MAX_ROLLERS) -> PlantParams:
    return PlantParams(
        n_rollers=n_rollers,
        ea=float(rng.uniform(200.0, 800.0)),
        span_lengths=rng.uniform(0.3, 1.0, n_rollers),
        inertias=rng.uniform(0.005, 0.02, n_rollers),
        frictions=rng.uniform(0.05, 0.2, n_rollers),
        radii=rng.uniform(0.04, 0.08, n_rollers),
        dt=0.01,
    )


def random_instance(seed: int, index: int = 0) -> OracleInstance:
    """Roll-to-roll instance with random plant, references, iterate and penalties.

    The iterate is a perturbed reference so that the bundles straddle
    constraint boundaries on some instances and sit inside them on others.
    """
    rng = _instance_rng(seed, index)
    horizon = int(rng.integers(2, MAX_HORIZON + 1))
    n_samples = int(rng.integers(2, MAX_SAMPLES + 1))
    plant = random_plant(rng)
    problem = R2RProblem(plant)
    n = plant.n_rollers

    tensions = rng.uniform(5.0, 55.0, size=(horizon, n))
    upstream = np.full(horizon, rng.uniform(0.005, 0.05))
    reference = problem.reference(tensions, upstream)
    scale = np.concatenate([np.full(n, 2.0), np.full(n, 0.01)])
    z = Trajectory(
        reference.states + scale * rng.standard_normal(reference.states.shape),
        reference.controls + 0.2 * rng.standard_normal(reference.controls.shape),
    )
    funcs = problem.functions(reference).lagged_on(z)
    x_init = z.states[0].copy() if rng.random() < 0.5 else None
    return OracleInstance(
        seed=seed,
        index=index,
        funcs=funcs,
        z=z,
        delta=float(rng.uniform(0.05, 1.0)),
        mu=float(10.0 ** rng.uniform(0.0, 3.0)),
        gammas=tuple(float(g) for g in 10.0 ** rng.uniform(0.0, 2.0, size=len(problem.soft_dims))),
        n_samples=n_samples,
        x_init=x_init,
        plant=plant,
    )


def affine_functions(
    rng: np.random.Generator, n_x: int = 4, n_u: int = 2, horizon: int = 5
) -> ProblemFunctions:
    """Random time-varying affine dynamics with a quadratic cost and one hard row."""
    A = rng.normal(size=(horizon, n_x, n_x))
    B = rng.normal(size=(horizon, n_x, n_u))
    c = rng.normal(size=(horizon, n_x))

    def dynamics(k, X, U):
        return A[k] @ X + B[k] @ U + c[k][:, None]

    def residual(k, X, U, u_prev):
        return np.concatenate([X, U - u_prev[:, None]], axis=0)

    def hard(k, X, U):
        return 10.0 - np.abs(X[:1])

    return ProblemFunctions(
        horizon=horizon,
        n_x=n_x,
        n_u=n_u,
        n_r=n_x + n_u,
        n_hard=1,
        soft_dims=(),
        dynamics=dynamics,
        residual=residual,
        hard=hard,
        soft=lambda k, X, U: [],
    )


def zero_vertex_instance(seed: int = 0, horizon: int = 3, n_samples: int = 4) -> OracleInstance:
    """Instance whose center vertex is feasible with zero cost.

    Scalar integrator ``x+ = x + u`` tracking the ramp ``x_k = k``, ``u_k = 1``
    exactly; every other vertex pays a positive residual, so the optimum is 0
    and it is attained at the center only.
    """
    x_ref = np.arange(horizon, dtype=float)

    def residual(k, X, U, u_prev):
        return np.concatenate([X - x_ref[k], U - 1.0], axis=0)

    funcs = ProblemFunctions(
        horizon=horizon,
        n_x=1,
        n_u=1,
        n_r=2,
        n_hard=1,
        soft_dims=(),
        dynamics=lambda k, X, U: X + U,
        residual=residual,
        hard=lambda k, X, U: np.ones((1, X.shape[1])),
        soft=lambda k, X, U: [],
        initial_control=np.ones(1),
    )
    z = Trajectory(x_ref[:, None], np.ones((horizon, 1)))
    return OracleInstance(
        seed=seed, index=0, funcs=funcs, z=z, delta=0.5, mu=10.0, gammas=(),
        n_samples=n_samples, label="zero_vertex",
    )


def _vertex_tables(p: ConvexSubproblem):
    """Per-column cost/penalty terms and per-pair coupling defects."""
    steps = p.bundles.steps
    H = len(steps)
    node = np.zeros((H, p.m))
    for k, step in enumerate(steps):
        node[k] = np.sum(step.r**2, axis=0)
        if k < H - 1:
            node[k] += p.mu * np.sum(certificate.negative_part(step.hard), axis=0)
            for gamma, block in zip(p.gammas, step.soft):
                node[k] += gamma * np.sum(certificate.negative_part(block), axis=0)
    edges = [
        p.mu * np.sum(np.abs(steps[k].f[:, :, None] - steps[k + 1].x[:, None, :]), axis=0)
        for k in range(H - 1)
    ]
    return node, edges


def vertex_enumeration_oracle(instance: Union[OracleInstance, ConvexSubproblem]) -> OracleResult:
    """Exhaustive minimum of the subproblem objective over vertex assignments.

    Each timestep picks a single bundle column; slacks take their induced
    values. With an anchor, only first columns whose state equals ``x_init``
    are admissible.

    Example:
        >>> vertex_enumeration_oracle(zero_vertex_instance(n_samples=2)).count
        8

    Raises:
        OracleTooLargeError: If m^H exceeds ``MAX_VERTEX_ASSIGNMENTS``
    """
    p = instance.subproblem if isinstance(instance, OracleInstance) else instance
    H, m = p.horizon, p.m
    count = m**H
    if count > MAX_VERTEX_ASSIGNMENTS:
        raise OracleTooLargeError(f"{m}^{H} = {count} vertex assignments exceed {MAX_VERTEX_ASSIGNMENTS}")

    node, edges = _vertex_tables(p)
    if p.x_init is not None:
        first = p.bundles.steps[0].x
        inadmissible = np.max(np.abs(first - p.x_init[:, None]), axis=0) > 1e-12
        node[0, inadmissible] = np.inf

    assignments = np.array(list(itertools.product(range(m), repeat=H)), dtype=int)
    totals = np.sum(node[np.arange(H), assignments], axis=1)
    for k, edge in enumerate(edges):
        totals += edge[assignments[:, k], assignments[:, k + 1]]
    best = int(np.argmin(totals))
    return OracleResult(value=float(totals[best]), assignment=tuple(int(i) for i in assignments[best]), count=count)


def _close(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _not_above(value: float, bound: float) -> bool:
    return value <= bound + SOLVER_SLACK * max(1.0, abs(bound))


@dataclass
class InstanceOutcome:
    """Results of every check on one instance; ``details`` explains the failures."""

    index: int
    results: Dict[str, bool] = field(default_factory=dict)
    details: Dict[str, str] = field(default_factory=dict)
    dump: Optional[Dict[str, Any]] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return all(self.results.values())

    def record(self, name: str, ok: bool, detail: str = "") -> None:
        self.results[name] = bool(ok)
        if not ok:
            self.details[name] = detail


def check_affine_exactness(rng: np.random.Generator, n_weights: int = 100) -> Tuple[bool, str]:
    """Interpolated dynamics equal the dynamics of the interpolated point for affine systems."""
    funcs = affine_functions(rng)
    z = Trajectory(rng.normal(size=(funcs.horizon, funcs.n_x)), rng.normal(size=(funcs.horizon, funcs.n_u)))
    bundles = build_bundles(z, float(rng.uniform(0.1, 1.0)), funcs, int(rng.integers(2**32)))
    worst = 0.0
    for k, step in enumerate(bundles.steps):
        alphas = rng.dirichlet(np.ones(step.m), size=n_weights).T
        exact = funcs.dynamics(k, step.x @ alphas, step.u @ alphas)
        scale = max(1.0, float(np.max(np.abs(exact))))
        worst = max(worst, float(np.max(np.abs(step.f @ alphas - exact))) / scale)
    return worst <= AFFINE_TOLERANCE, f"max interpolation defect {worst:.3e}"


def check_penalty_stabilization(rng: np.random.Generator, n_iterations: int = 80) -> Tuple[bool, str]:
    """Random violation sequences never grow a penalty more often than its cap allows."""
    config = AdaptConfig()
    state = AdaptState.initial(config)
    mu_count = 0
    gamma_counts = [0] * config.n_soft
    for _ in range(n_iterations):
        v = Violations(
            dyn=float(10.0 ** rng.uniform(-8, 1)),
            hard=float(10.0 ** rng.uniform(-8, 1)),
            soft=tuple(float(x) for x in 10.0 ** rng.uniform(-6, 1, size=config.n_soft)),
        )
        previous = state
        state = advance(state, config, v)
        state.check(config)
        mu_count += state.mu > previous.mu
        for j, (old, new) in enumerate(zip(previous.gammas, state.gammas)):
            gamma_counts[j] += new > old
    mu_cap, gamma_caps = max_penalty_increases(config)
    ok = mu_count <= mu_cap and all(c <= cap for c, cap in zip(gamma_counts, gamma_caps))
    return ok, f"increases mu={mu_count}/{mu_cap}, gammas={gamma_counts}/{list(gamma_caps)}"


def check_plant_conservation(plant: PlantParams, rng: np.random.Generator, n_profiles: int = 100) -> Tuple[bool, str]:
    """The equilibrium reference pair annihilates the tension drift."""
    worst = 0.0
    n = plant.n_rollers
    for _ in range(n_profiles):
        tensions = rng.uniform(0.0, 0.9 * plant.ea, size=n)
        upstream = float(rng.uniform(0.001, 1.0))
        x_ref = reference_state(tensions, upstream, plant)
        worst = max(worst, float(np.max(np.abs(drift(x_ref, plant, upstream)[:n]))))
    return worst <= CONSERVATION_TOLERANCE * plant.ea, f"max tension drift {worst:.3e}"


def run_instance(seed: int, index: int, solver: Optional[SolverSettings] = None) -> InstanceOutcome:
    """Draw instance ``index`` of campaign ``seed`` and run every check on it."""
    solver = solver or SolverSettings()
    outcome = InstanceOutcome(index=index)
    rng = _instance_rng(seed, index + 1_000_000)

    def guarded(name: str, fn: Callable[[], Tuple[bool, str]]) -> None:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        outcome.record(name, ok, detail)

    guarded("affine_exactness", lambda: check_affine_exactness(rng))
    guarded("penalty_stabilization", lambda: check_penalty_stabilization(rng))

    try:
        instance = random_instance(seed, index)
    except Exception as exc:
        for name in CHECKS:
            outcome.results.setdefault(name, False)
            outcome.details.setdefault(name, f"instance construction failed: {exc}")
        return outcome
    p = instance.subproblem
    center = vertex_weights(p, [instance.bundles.center_index] * p.horizon)
    baseline = evaluate(p, center).objective

    def phi_consistency():
        phi = certificate.penalized_objective(instance.z, p.mu, p.gammas, instance.funcs, instance.x_init)
        return _close(baseline, phi, IDENTITY_TOLERANCE), f"J_sub(center)={baseline:.12g} phi={phi:.12g}"

    guarded("phi_consistency", phi_consistency)

    solution = None
    try:
        solution = solve(p, **solver.kwargs())
    except Exception as exc:
        for name in ("subproblem_decrease", "oracle_bound", "simplex", "recovery"):
            outcome.record(name, False, f"solve failed: {exc}")

    oracle = None
    try:
        oracle = vertex_enumeration_oracle(p)
        at_best = evaluate(p, vertex_weights(p, oracle.assignment)).objective
        outcome.record(
            "oracle_consistency",
            _close(oracle.value, at_best, IDENTITY_TOLERANCE) and oracle.value <= baseline * (1 + IDENTITY_TOLERANCE) + 1e-12,
            f"oracle={oracle.value:.12g} evaluated={at_best:.12g} center={baseline:.12g}",
        )
    except Exception as exc:
        outcome.record("oracle_consistency", False, f"{type(exc).__name__}: {exc}")

    if solution is not None:
        outcome.record(
            "subproblem_decrease",
            _not_above(solution.objective, baseline),
            f"solver={solution.objective:.12g} center={baseline:.12g}",
        )
        if oracle is not None:
            outcome.record(
                "oracle_bound",
                _not_above(solution.objective, oracle.value),
                f"solver={solution.objective:.12g} oracle={oracle.value:.12g}",
            )
        else:
            outcome.record("oracle_bound", False, "no oracle value")
        simplex_defect = float(
            max(np.max(-solution.alphas.min(axis=1).clip(max=0.0)), np.max(np.abs(solution.alphas.sum(axis=1) - 1.0)))
        )
        outcome.record("simplex", simplex_defect <= 1e-12, f"simplex defect {simplex_defect:.3e}")

        def recovery():
            z_next = recover(instance.bundles, solution)
            defect = max(
                float(np.max(np.abs(z_next.states[k] - step.x @ solution.alphas[k])))
                for k, step in enumerate(instance.bundles.steps)
            )
            if instance.x_init is not None:
                defect = max(defect, float(np.max(np.abs(z_next.states[0] - instance.x_init))))
            return defect <= 1e-9, f"recovery defect {defect:.3e}"

        guarded("recovery", recovery)

    def outer_loop():
        config = AdaptConfig()
        trace = tbm_solve(
            instance.funcs, instance.x_init, instance.z, config, budget=3,
            seed=np.random.SeedSequence(seed, spawn_key=(index, 2)), solver=solver,
        )
        mu_count, gamma_counts = trace.penalty_increases()
        mu_cap, gamma_caps = max_penalty_increases(config)
        ok = (
            replay_consistent(trace, config)
            and mu_count <= mu_cap
            and all(c <= cap for c, cap in zip(gamma_counts, gamma_caps))
        )
        return ok, f"status={trace.status} increases mu={mu_count} gammas={list(gamma_counts)}"

    guarded("outer_loop_replay", outer_loop)
    guarded("plant_conservation", lambda: check_plant_conservation(instance.plant, rng))

    if not outcome.passed:
        outcome.dump = instance.to_dict()
    return outcome


@dataclass
class CampaignReport:
    """Pass/fail matrix of a property campaign.

    Attributes:
        seed: Campaign seed
        outcomes: One outcome per instance, in index order
    """

    seed: int
    outcomes: List[InstanceOutcome] = field(default_factory=list)

    @property
    def n_instances(self) -> int:
        return len(self.outcomes)

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes)

    def failures(self) -> Dict[str, List[int]]:
        """Failing instance indices per check."""
        failed: Dict[str, List[int]] = {}
        for outcome in self.outcomes:
            for name, ok in outcome.results.items():
                if not ok:
                    failed.setdefault(name, []).append(outcome.index)
        return failed

    def pass_counts(self) -> Dict[str, int]:
        return {name: sum(1 for o in self.outcomes if o.results.get(name, False)) for name in CHECKS}

    def reproducer(self) -> Optional[Dict[str, Any]]:
        """Seed, index, failed checks and instance dump of the first failing instance."""
        for outcome in self.outcomes:
            if not outcome.passed:
                return {
                    "seed": self.seed,
                    "index": outcome.index,
                    "failed": {name: outcome.details.get(name, "") for name, ok in outcome.results.items() if not ok},
                    "instance": outcome.dump,
                }
        return None

    def write_reproducer(self, path: Path) -> Optional[Path]:
        reproducer = self.reproducer()
        if reproducer is None:
            return None
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(reproducer, handle, indent=2)
        return path

    def matrix_lines(self) -> List[str]:
        """One row per instance, one column per check (``.`` pass, ``F`` fail)."""
        width = len(str(max(self.n_instances - 1, 0)))
        lines = [" " * (width + 2) + " ".join(f"{i:>2}" for i in range(len(CHECKS)))]
        for outcome in self.outcomes:
            marks = " ".join(f"{'.' if outcome.results.get(name, False) else 'F':>2}" for name in CHECKS)
            lines.append(f"{outcome.index:>{width}}  {marks}")
        return lines

    def __str__(self) -> str:
        lines = [f"Property campaign (seed {self.seed}, {self.n_instances} instances)", "=" * 60]
        counts = self.pass_counts()
        for i, name in enumerate(CHECKS):
            lines.append(f"  [{i:>2}] {name:<22} {counts[name]}/{self.n_instances}")
        if self.outcomes:
            lines.append("")
            lines.extend(self.matrix_lines())
        lines.append("")
        lines.append("PASSED" if self.passed else f"FAILED: {self.failures()}")
        return "\n".join(lines)


def run_property_campaign(
    seed: int,
    n_instances: int = 50,
    workers: int = 1,
    solver: Optional[SolverSettings] = None,
) -> CampaignReport:
    """Run every check on ``n_instances`` seeded random instances.

    Instances are independent; with ``workers > 1`` they run on a thread pool
    and the report is identical to the serial one.
    """
    if n_instances < 0:
        raise ValueError(f"n_instances must be non-negative, got {n_instances}")
    indices: Sequence[int] = range(n_instances)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda i: run_instance(seed, i, solver), indices))
    else:
        outcomes = [run_instance(seed, i, solver) for i in indices]
    report = CampaignReport(seed=seed, outcomes=outcomes)
    if report.passed:
        logger.info("property campaign passed on %d instances", n_instances)
    else:
        logger.warning("property campaign failed: %s", report.failures())
    return report
