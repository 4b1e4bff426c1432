"""Outer bundle-method loop, bundle-based controllers and the closed-loop driver."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from rollbundle.adapt import AdaptConfig, AdaptState, Violations, advance, contract, converged, violations
from rollbundle.bundle import ProblemFunctions, SeedLike, Trajectory, build_bundles
from rollbundle.certificate import (
    BoundReport,
    LipschitzEstimates,
    MonitorRecord,
    complexity_bounds,
    estimate_lipschitz,
    monitor_iteration,
    penalized_objective,
)
from rollbundle.config import ScenarioConfig
from rollbundle.exceptions import BaselineUnavailableError, ContractViolation, EvaluationError, SubproblemFailure
from rollbundle.lqr import LQRController
from rollbundle.plant import PlantParams, equilibrium_torques, propagate, reference_state, step_stochastic
from rollbundle.problem import R2RProblem
from rollbundle.subproblem import SolverSettings, assemble, dump_subproblem, recover, solve
from rollbundle.traces import ClosedLoopTrace, ControlDecision, StepRecord

logger = logging.getLogger(__name__)

CONVERGED = "converged"
ITERATION_CAP = "iteration_cap"
SOLVER_FAILURE = "solver_failure"

DEFAULT_BUDGET = 30
MONITOR_PAIRS = 100


@dataclass
class IterationRecord:
    """One outer iteration.

    ``delta``, ``mu`` and ``gammas`` are the values the subproblem was built
    with, i.e. before this iteration's adaptation. ``attempts`` counts the
    failed solves (each followed by a contraction) that preceded the solve.
    """

    iteration: int
    delta: float
    mu: float
    gammas: Tuple[float, ...]
    j_sub: float
    violations: Violations
    step_norm: float
    solve_time: float
    attempts: int = 0
    phi_prev: float = float("nan")
    phi_next: float = float("nan")


@dataclass
class SolveTrace:
    """Iterates and per-iteration records of one ``tbm_solve`` call."""

    iterates: List[Trajectory]
    records: List[IterationRecord] = field(default_factory=list)
    status: str = ITERATION_CAP
    adaptive: bool = True
    final_state: Optional[AdaptState] = None
    monitors: List[MonitorRecord] = field(default_factory=list)

    @property
    def final(self) -> Trajectory:
        return self.iterates[-1]

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def total_solve_time(self) -> float:
        return sum(r.solve_time for r in self.records)

    def penalty_path(self) -> List[Tuple[float, Tuple[float, ...]]]:
        path = [(r.mu, r.gammas) for r in self.records]
        if self.final_state is not None:
            path.append((self.final_state.mu, self.final_state.gammas))
        return path

    def penalty_increases(self) -> Tuple[int, Tuple[int, ...]]:
        """How often mu and each gamma grew during the solve."""
        path = self.penalty_path()
        if not path:
            return 0, ()
        mu_count = sum(1 for a, b in zip(path, path[1:]) if b[0] > a[0])
        gamma_counts = tuple(
            sum(1 for a, b in zip(path, path[1:]) if b[1][j] > a[1][j]) for j in range(len(path[0][1]))
        )
        return mu_count, gamma_counts


def replay_consistent(trace: SolveTrace, config: AdaptConfig) -> bool:
    """Whether the logged violations reproduce the logged radius and penalties."""
    for prev, nxt in zip(trace.records, trace.records[1:]):
        state = AdaptState(delta=prev.delta, mu=prev.mu, gammas=prev.gammas)
        if trace.adaptive:
            state = advance(state, config, prev.violations)
        for _ in range(nxt.attempts):
            state = contract(state, config)
        if (state.delta, state.mu, state.gammas) != (nxt.delta, nxt.mu, nxt.gammas):
            return False
    return True


def hold_trajectory(x_init: np.ndarray, horizon: int, plant: PlantParams) -> Trajectory:
    """Measured state held over the horizon with the torques that keep velocities still."""
    x_init = np.asarray(x_init, dtype=float)
    u_eq = equilibrium_torques(x_init, plant)
    return Trajectory(np.tile(x_init, (horizon, 1)), np.tile(u_eq, (horizon, 1)))


def _iteration_seed(base: np.random.SeedSequence, iteration: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + (iteration, attempt))


def tbm_solve(
    funcs: ProblemFunctions,
    x_init: Optional[np.ndarray],
    z_init: Trajectory,
    config: AdaptConfig,
    budget: int = DEFAULT_BUDGET,
    seed: SeedLike = 0,
    adaptive: bool = True,
    solver: Optional[SolverSettings] = None,
    estimates: Optional[LipschitzEstimates] = None,
    dump_dir: Optional[Path] = None,
    workers: int = 1,
) -> SolveTrace:
    """Run the bundle-method outer loop from ``z_init``.

    Each iteration samples bundles around the current iterate, solves the
    convex subproblem, adopts the recovered trajectory unconditionally and
    then adapts the radius and penalties (unless ``adaptive`` is False).
    A failed subproblem contracts the radius and is retried; a failure at
    the minimum radius ends the solve with status ``solver_failure``.

    Args:
        funcs: Problem functions over the horizon
        x_init: Measured first state, pinned in every subproblem (None for free)
        z_init: Starting trajectory
        config: Adaptation tuning
        budget: Maximum outer iterations
        seed: Base seed; each (iteration, attempt) derives its own stream
        adaptive: False freezes radius and penalties at their initial values
        solver: Backend and tolerances for the subproblem
        estimates: Lipschitz estimates; when given, every iteration is monitored
        dump_dir: Directory receiving one JSON file per assembled subproblem
        workers: Threads for bundle evaluation

    Returns:
        SolveTrace whose status is ``converged``, ``iteration_cap`` or ``solver_failure``
    """
    if budget < 1:
        raise ContractViolation(f"iteration budget must be at least 1, got {budget}")
    solver = solver or SolverSettings()
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    state = AdaptState.initial(config)
    z = z_init
    trace = SolveTrace(iterates=[z_init], adaptive=adaptive)

    for ell in range(budget):
        lagged = funcs.lagged_on(z)
        attempt = 0
        while True:
            bundles = build_bundles(z, state.delta, lagged, _iteration_seed(base, ell, attempt), x_init, workers=workers)
            p = assemble(bundles, state.mu, state.gammas, x_init)
            if dump_dir is not None:
                dump_subproblem(p, Path(dump_dir) / f"subproblem_{ell:03d}_{attempt}.json")
            try:
                sol = solve(p, **solver.kwargs())
                break
            except SubproblemFailure as exc:
                if state.delta <= config.delta_min:
                    logger.error("iteration %d: subproblem failed at the minimum radius: %s", ell, exc)
                    trace.status = SOLVER_FAILURE
                    trace.final_state = state
                    return trace
                state = contract(state, config)
                attempt += 1
                logger.warning("iteration %d: %s; contracting radius to %.4g", ell, exc, state.delta)

        z_next = recover(bundles, sol)
        v = violations(sol)
        step_norm = z_next.distance(z)
        record = IterationRecord(
            iteration=ell,
            delta=state.delta,
            mu=state.mu,
            gammas=state.gammas,
            j_sub=sol.objective,
            violations=v,
            step_norm=step_norm,
            solve_time=sol.solve_time,
            attempts=attempt,
        )
        if estimates is not None:
            monitor = monitor_iteration(
                z, z_next, sol.objective, state.delta, state.mu, state.gammas, estimates, lagged,
                config.tau_viol,
                violation_exceeded=v.dyn >= config.tau_viol or v.hard >= config.tau_viol,
                x_init=x_init,
                iteration=ell,
            )
            trace.monitors.append(monitor)
            record.phi_prev = monitor.phi_prev
            record.phi_next = monitor.phi_next
        trace.records.append(record)
        logger.debug(
            "iteration %d: J=%.6g nu_dyn=%.3g nu_hard=%.3g delta=%.4g mu=%.4g gammas=%s step=%.3g",
            ell, sol.objective, v.dyn, v.hard, state.delta, state.mu, state.gammas, step_norm,
        )

        if adaptive:
            state = advance(state, config, v)
        trace.iterates.append(z_next)
        z = z_next
        if converged(v.dyn, v.hard, step_norm, config):
            trace.status = CONVERGED
            break
    trace.final_state = state

    last = trace.records[-1].violations
    logger.info(
        "bundle solve %s after %d iterations (nu_dyn=%.3g, nu_hard=%.3g)",
        trace.status, len(trace.records), last.dyn, last.hard,
    )
    return trace


class BundleController:
    """Receding-horizon controller solving one bundle problem per step.

    The first step starts from ``hold_trajectory``; later steps warm-start
    from the previous solution shifted by one step. Radius and penalties
    restart from their initial values at every step.
    """

    def __init__(
        self,
        problem: R2RProblem,
        config: AdaptConfig,
        horizon: int,
        adaptive: bool = True,
        budget: int = DEFAULT_BUDGET,
        solver: Optional[SolverSettings] = None,
        seed: int = 0,
        record_timing: bool = False,
        monitors: bool = False,
        dump_dir: Optional[Path] = None,
        workers: int = 1,
    ):
        self.problem = problem
        self.config = config
        self.horizon = horizon
        self.adaptive = adaptive
        self.budget = budget
        self.solver = solver or SolverSettings()
        self.seed = seed
        self.record_timing = record_timing
        self.monitors = monitors
        self.dump_dir = dump_dir
        self.workers = workers
        self.name = "atbm" if adaptive else "tbm-fixed"
        self.estimates: Optional[LipschitzEstimates] = None
        self.solves: List[SolveTrace] = []
        self._warm: Optional[Trajectory] = None

    def reset(self) -> None:
        self._warm = None
        self.solves = []

    def lipschitz_estimates(self, funcs: ProblemFunctions) -> LipschitzEstimates:
        if self.estimates is None:
            s = self.problem.settings
            n = self.problem.n_rollers
            lower = np.concatenate(
                [np.full(n, s.tension_bounds[0]), np.full(n, s.velocity_bounds[0]), np.full(n, -s.torque_limit)]
            )
            upper = np.concatenate(
                [np.full(n, s.tension_bounds[1]), np.full(n, s.velocity_bounds[1]), np.full(n, s.torque_limit)]
            )
            rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2,)))
            self.estimates = estimate_lipschitz(funcs, (lower, upper), MONITOR_PAIRS, rng)
        return self.estimates

    def act(self, x, step, tensions, upstream, last_control) -> ControlDecision:
        """Solve the horizon problem at measured state ``x`` and return its first torque."""
        plant = self.problem.plant
        funcs = self.problem.functions(self.problem.reference(tensions, upstream), initial_control=last_control)
        if self._warm is None:
            z_init = hold_trajectory(x, self.horizon, plant)
        else:
            z_init = self._warm.shifted(first_state=x)
        trace = tbm_solve(
            funcs,
            x,
            z_init,
            self.config,
            budget=self.budget,
            seed=np.random.SeedSequence(self.seed, spawn_key=(0, step)),
            adaptive=self.adaptive,
            solver=self.solver,
            estimates=self.lipschitz_estimates(funcs) if self.monitors else None,
            dump_dir=None if self.dump_dir is None else Path(self.dump_dir) / f"step_{step:04d}",
            workers=self.workers,
        )
        self.solves.append(trace)
        if trace.status == SOLVER_FAILURE:
            self._warm = None
            raise SubproblemFailure(f"step {step}: subproblem failed at the minimum trust radius", status=SOLVER_FAILURE)
        self._warm = trace.final
        last = trace.records[-1]
        return ControlDecision(
            control=trace.final.controls[0].copy(),
            nu_dyn=last.violations.dyn,
            nu_hard=last.violations.hard,
            delta=last.delta,
            mu=last.mu,
            j_sub=last.j_sub,
            gammas=last.gammas,
            iterations=len(trace.records),
            solve_ms=1e3 * trace.total_solve_time if self.record_timing else 0.0,
            status=trace.status,
        )

    def bound_report(self) -> Optional[BoundReport]:
        """A posteriori bounds over every monitored solve of the run.

        The stabilized penalties are the largest final penalties seen, the
        objective at stabilization is the largest one seen at the iteration
        where a solve's penalties stopped changing, and phi_min is the
        smallest objective observed.
        """
        monitored = [t for t in self.solves if t.monitors and t.records]
        if self.estimates is None or not monitored:
            return None
        mu_bar = max(t.final_state.mu for t in monitored)
        gammas_bar = tuple(np.max([t.final_state.gammas for t in monitored], axis=0))
        phi_kstar, delta_kstar, phi_min = -math.inf, 0.0, math.inf
        for t in monitored:
            final = (t.final_state.mu, t.final_state.gammas)
            index = next(
                (i for i, r in enumerate(t.records) if (r.mu, r.gammas) == final),
                len(t.records) - 1,
            )
            phi_kstar = max(phi_kstar, t.records[index].phi_prev)
            delta_kstar = max(delta_kstar, t.records[index].delta)
            phi_min = min(phi_min, min(min(r.phi_prev, r.phi_next) for r in t.records))
        report = complexity_bounds(
            self.config,
            self.estimates,
            self.horizon,
            phi_at_kstar=phi_kstar,
            phi_min=phi_min,
            delta_at_kstar=delta_kstar,
            mu_bar=mu_bar,
            gammas_bar=gammas_bar,
            n_vars=self.problem.plant.n_x + self.problem.plant.n_u,
        )
        report.monitors = [m for t in monitored for m in t.monitors]
        return report

    def a_priori_report(self, x: np.ndarray, tensions: np.ndarray, upstream: np.ndarray) -> BoundReport:
        """Bounds before any solve, from the hold trajectory at ``x``.

        The penalty caps stand in for the stabilized penalties and the
        objective is taken at the hold trajectory under those caps.
        """
        plant = self.problem.plant
        funcs = self.problem.functions(
            self.problem.reference(tensions, upstream), initial_control=equilibrium_torques(x, plant)
        )
        z0 = hold_trajectory(x, self.horizon, plant)
        estimates = self.lipschitz_estimates(funcs)
        phi = penalized_objective(z0, self.config.mu_max, self.config.gamma_max, funcs.lagged_on(z0), x)
        return complexity_bounds(
            self.config,
            estimates,
            self.horizon,
            phi_at_kstar=phi,
            phi_min=None,
            delta_at_kstar=self.config.delta_init,
            n_vars=plant.n_x + plant.n_u,
        )


Controller = Union[BundleController, LQRController]


def make_controller(
    kind: str,
    problem: R2RProblem,
    scenario: ScenarioConfig,
    seed: Optional[int] = None,
    monitors: bool = False,
    dump_dir: Optional[Path] = None,
) -> Controller:
    """Controller named ``kind`` (``atbm``, ``tbm-fixed`` or ``lqr``) configured from ``scenario``."""
    seed = scenario.seed if seed is None else seed
    if kind in ("atbm", "tbm-fixed"):
        return BundleController(
            problem,
            scenario.adapt,
            horizon=scenario.horizon,
            adaptive=kind == "atbm",
            budget=scenario.iteration_budget,
            solver=scenario.solver,
            seed=seed,
            record_timing=scenario.record_timing,
            monitors=monitors,
            dump_dir=dump_dir,
        )
    if kind == "lqr":
        return LQRController.from_settings(problem, scenario.lqr.weighting, scenario.lqr)
    raise ContractViolation(f"unknown controller {kind!r}; expected atbm, tbm-fixed or lqr")


def closed_loop(
    controller: Union[str, Controller],
    problem: R2RProblem,
    scenario: ScenarioConfig,
    seed: Optional[int] = None,
) -> ClosedLoopTrace:
    """Simulate the plant under ``controller`` for the scenario's duration.

    A controller failure is bridged once by holding the previous torques for
    one step; a second consecutive failure truncates the trace.
    """
    seed = scenario.seed if seed is None else seed
    if isinstance(controller, str):
        controller = make_controller(controller, problem, scenario, seed)
    plant = problem.plant
    n = plant.n_rollers
    noise_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))

    x = scenario.initial_state()
    last_u = equilibrium_torques(x, plant)
    trace = ClosedLoopTrace(n_rollers=n, n_soft=len(problem.soft_dims), controller=controller.name)
    failed_last_step = False

    for step in range(scenario.n_steps):
        tensions, upstream = scenario.horizon_schedule(step)
        try:
            decision = controller.act(x, step, tensions, upstream, last_u)
            failed_last_step = False
        except (SubproblemFailure, EvaluationError, BaselineUnavailableError) as exc:
            if failed_last_step:
                trace.status = "truncated"
                trace.failure = f"step {step}: {exc}"
                logger.error("controller %s failed twice in a row; truncating at step %d", controller.name, step)
                break
            failed_last_step = True
            logger.warning("step %d: %s; holding previous torques", step, exc)
            decision = ControlDecision(control=last_u.copy(), status="hold")

        x_ref = reference_state(tensions[0], upstream[0], plant)
        trace.steps.append(
            StepRecord(
                time=step * plant.dt,
                state=x.copy(),
                control=np.asarray(decision.control, dtype=float),
                tension_ref=tensions[0].copy(),
                velocity_ref=x_ref[n:],
                nu_dyn=decision.nu_dyn,
                nu_hard=decision.nu_hard,
                delta=decision.delta,
                mu=decision.mu,
                j_sub=decision.j_sub,
                gammas=tuple(decision.gammas),
                iterations=decision.iterations,
                solve_ms=decision.solve_ms,
                status=decision.status,
            )
        )
        if scenario.noise_enabled:
            x = step_stochastic(x, decision.control, plant, upstream[0], noise_rng)
        else:
            x = propagate(x, decision.control, plant, upstream[0])
        last_u = np.asarray(decision.control, dtype=float)

    logger.info(
        "closed loop %s on %s: %d/%d steps (%s)",
        controller.name, scenario.name, len(trace), scenario.n_steps, trace.status,
    )
    return trace
