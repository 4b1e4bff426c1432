"""Convex bundle subproblem: assembly, solution and trajectory recovery.

The subproblem chooses simplex weights alpha^(k) per timestep and minimizes

    sum_k ||W_r alpha_k||^2 + mu * sum_k (||s_k||_1 + ||w_k||_1)
                            + sum_j gamma_j * sum_k ||d_kj||_1

subject to ``W_f^(k) alpha_k = W_x^(k+1) alpha_(k+1) + s_k``,
``W_hard^(k) alpha_k + w_k >= 0`` and ``W_j^(k) alpha_k + d_kj >= 0`` for
k = 1..H-1, plus ``W_x^(1) alpha_1 = x_init`` when an anchor is given.
The l1 terms are split into non-negative parts so the problem is a QP.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np
from scipy import sparse

from rollbundle.bundle import BundleSet, Trajectory
from rollbundle.exceptions import ContractViolation, SubproblemFailure

logger = logging.getLogger(__name__)

DEFAULT_TOL_FEAS = 1e-8
DEFAULT_TOL_OPT = 1e-8
DEFAULT_MAX_ITER = 200
SUPPORTED_SOLVERS = ("CLARABEL", "OSQP")
DEFAULT_FALLBACK = "OSQP"
OSQP_MIN_ITER = 20000
SIMPLEX_TOLERANCE = 1e-6


@dataclass(frozen=True)
class SolverSettings:
    """Backend name, fallback backend and stopping knobs passed through to ``solve``.

    ``fallback`` is tried when the primary backend errors out or returns
    anything but an optimal status; ``None`` disables it.
    """

    name: str = "CLARABEL"
    tol_feas: float = DEFAULT_TOL_FEAS
    tol_opt: float = DEFAULT_TOL_OPT
    max_iter: int = DEFAULT_MAX_ITER
    fallback: Optional[str] = DEFAULT_FALLBACK

    def __post_init__(self):
        object.__setattr__(self, "name", self.name.upper())
        if self.name not in SUPPORTED_SOLVERS:
            raise ContractViolation(f"solver must be one of {SUPPORTED_SOLVERS}, got {self.name!r}")
        if self.fallback is not None:
            fallback = self.fallback.upper()
            if fallback not in SUPPORTED_SOLVERS:
                raise ContractViolation(f"fallback must be one of {SUPPORTED_SOLVERS}, got {self.fallback!r}")
            object.__setattr__(self, "fallback", None if fallback == self.name else fallback)
        if not (self.tol_feas > 0 and self.tol_opt > 0):
            raise ContractViolation("solver tolerances must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ContractViolation(f"max_iter must be a positive integer, got {self.max_iter}")

    def kwargs(self) -> Dict[str, Any]:
        return {
            "solver": self.name,
            "tol_feas": self.tol_feas,
            "tol_opt": self.tol_opt,
            "max_iter": int(self.max_iter),
            "fallback": self.fallback,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "tol_feas": self.tol_feas,
            "tol_opt": self.tol_opt,
            "max_iter": int(self.max_iter),
            "fallback": self.fallback,
        }


@dataclass(eq=False)
class ConvexSubproblem:
    """Bundle blocks plus the penalties and anchor of one outer iteration."""

    bundles: BundleSet
    mu: float
    gammas: Tuple[float, ...]
    x_init: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.bundles.horizon

    @property
    def m(self) -> int:
        return self.bundles.m

    @property
    def dims(self):
        return self.bundles.dims

    @property
    def anchor_implied(self) -> bool:
        """True when every k=1 state column already equals x_init."""
        if self.x_init is None:
            return False
        first = self.bundles.steps[0].x
        return bool(np.array_equal(first, np.repeat(self.x_init[:, None], first.shape[1], axis=1)))

    def block_counts(self) -> Dict[str, int]:
        """Number of constraint blocks of each kind."""
        coupled = self.horizon - 1
        return {
            "simplex": self.horizon,
            "dynamics": coupled,
            "hard": coupled if self.dims[4] else 0,
            "soft": coupled * sum(1 for dim in self.dims[5] if dim),
            "anchor": 0 if self.x_init is None else 1,
        }

    def to_dict(self) -> Dict[str, Any]:
        """Self-describing representation used for debug dumps."""
        H, m, n_x, n_r, n_hard, soft_dims = self.dims
        return {
            "kind": "rollbundle.subproblem",
            "dims": {"H": H, "m": m, "n_x": n_x, "n_r": n_r, "n_hard": n_hard, "soft": list(soft_dims)},
            "mu": self.mu,
            "gammas": list(self.gammas),
            "x_init": None if self.x_init is None else self.x_init.tolist(),
            "delta": self.bundles.delta,
            "center_index": self.bundles.center_index,
            "steps": [
                {
                    "W_x": step.x.tolist(),
                    "W_u": step.u.tolist(),
                    "W_f": step.f.tolist(),
                    "W_r": step.r.tolist(),
                    "W_hard": step.hard.tolist(),
                    "W_soft": [block.tolist() for block in step.soft],
                }
                for step in self.bundles.steps
            ],
        }


@dataclass(eq=False)
class SubproblemSolution:
    """Simplex weights and the slacks they induce.

    Attributes:
        alphas: Weights, shape (H, m); each row lies on the simplex
        dynamics_slacks: Signed s_k, shape (H-1, n_x)
        hard_slacks: w_k >= 0, shape (H-1, n_hard)
        soft_slacks: One (H-1, n_j) array of d_kj >= 0 per soft class
        objective: Subproblem objective J_sub at ``alphas``
        status: Solver status, or ``"evaluated"`` for hand-built points
        iterations: Solver iteration count (0 when not solved)
        solve_time: Wall time of the solver call in seconds
        simplex_error: Largest simplex deviation reported by the solver
        anchor_residual: ``||W_x^(1) alpha_1 - x_init||_inf`` (0 without anchor)
        backend: Solver that produced the weights (empty when not solved)
    """

    alphas: np.ndarray
    dynamics_slacks: np.ndarray
    hard_slacks: np.ndarray
    soft_slacks: List[np.ndarray]
    objective: float
    status: str = "evaluated"
    iterations: int = 0
    solve_time: float = 0.0
    simplex_error: float = 0.0
    anchor_residual: float = 0.0
    cost: float = field(default=0.0)
    backend: str = ""

    @property
    def penalty_violation(self) -> float:
        """sum_k (||s_k||_1 + ||w_k||_1)."""
        return float(np.sum(np.abs(self.dynamics_slacks)) + np.sum(self.hard_slacks))


def assemble(
    bundles: BundleSet,
    mu: float,
    gammas: Sequence[float],
    x_init: Optional[np.ndarray] = None,
) -> ConvexSubproblem:
    """Collect bundle blocks, penalties and anchor into one subproblem.

    Raises:
        ContractViolation: On non-positive penalties or inconsistent dimensions
    """
    mu = float(mu)
    gammas = tuple(float(g) for g in gammas)
    if not (mu > 0 and np.isfinite(mu)):
        raise ContractViolation(f"mu must be positive and finite, got {mu}")
    if any(not (g > 0 and np.isfinite(g)) for g in gammas):
        raise ContractViolation(f"every gamma must be positive and finite, got {gammas}")
    _, _, n_x, _, _, soft_dims = bundles.dims
    if len(gammas) != len(soft_dims):
        raise ContractViolation(f"{len(soft_dims)} soft classes but {len(gammas)} penalties")
    if x_init is not None:
        x_init = np.asarray(x_init, dtype=float)
        if x_init.shape != (n_x,):
            raise ContractViolation(f"x_init must have shape ({n_x},), got {x_init.shape}")
    for k, step in enumerate(bundles.steps):
        if step.x.shape[0] != n_x or step.f.shape[0] != n_x:
            raise ContractViolation(f"timestep {k}: state blocks must have {n_x} rows")
        if tuple(block.shape[0] for block in step.soft) != soft_dims:
            raise ContractViolation(f"timestep {k}: soft blocks disagree with timestep 0")
    return ConvexSubproblem(bundles=bundles, mu=mu, gammas=gammas, x_init=x_init)


def induced_slacks(
    p: ConvexSubproblem, alphas: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
    """Smallest slacks compatible with ``alphas`` (closed form).

    ``s_k`` is the exact coupling defect; hard and soft slacks are the
    negative parts of the interpolated constraint values.
    """
    steps = p.bundles.steps
    H = len(steps)
    n_x = steps[0].x.shape[0]
    s = np.zeros((H - 1, n_x))
    w = np.zeros((H - 1, steps[0].hard.shape[0]))
    d = [np.zeros((H - 1, block.shape[0])) for block in steps[0].soft]
    for k in range(H - 1):
        s[k] = steps[k].f @ alphas[k] - steps[k + 1].x @ alphas[k + 1]
        w[k] = np.maximum(0.0, -(steps[k].hard @ alphas[k]))
        for j, block in enumerate(steps[k].soft):
            d[j][k] = np.maximum(0.0, -(block @ alphas[k]))
    return s, w, d


def _cost(p: ConvexSubproblem, alphas: np.ndarray) -> float:
    return float(sum(np.sum((step.r @ alphas[k]) ** 2) for k, step in enumerate(p.bundles.steps)))


def evaluate(p: ConvexSubproblem, alphas: np.ndarray) -> SubproblemSolution:
    """Objective and induced slacks at given simplex weights.

    Example:
        >>> e = np.zeros((p.horizon, p.m)); e[:, p.bundles.center_index] = 1.0
        >>> evaluate(p, e).objective  # equals the penalized objective of the iterate
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (p.horizon, p.m):
        raise ContractViolation(f"alphas must have shape {(p.horizon, p.m)}, got {alphas.shape}")
    s, w, d = induced_slacks(p, alphas)
    cost = _cost(p, alphas)
    objective = (
        cost
        + p.mu * (float(np.sum(np.abs(s))) + float(np.sum(w)))
        + sum(g * float(np.sum(block)) for g, block in zip(p.gammas, d))
    )
    anchor = 0.0
    if p.x_init is not None:
        anchor = float(np.max(np.abs(p.bundles.steps[0].x @ alphas[0] - p.x_init)))
    return SubproblemSolution(
        alphas=alphas,
        dynamics_slacks=s,
        hard_slacks=w,
        soft_slacks=d,
        objective=float(objective),
        anchor_residual=anchor,
        cost=cost,
    )


def objective_value(p: ConvexSubproblem, alphas: np.ndarray) -> float:
    return evaluate(p, alphas).objective


def _centered(block: np.ndarray, c: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split ``block @ alpha`` into the center column and offsets from it."""
    return block[:, c], block - block[:, [c]]


def _stack(blocks: Sequence[np.ndarray], m: int, pad: int) -> sparse.csr_matrix:
    """Block-diagonal matrix acting on the flat weights, with ``pad`` trailing empty blocks."""
    diag = sparse.block_diag(blocks, format="csr")
    if not pad:
        return diag
    return sparse.hstack([diag, sparse.csr_matrix((diag.shape[0], pad * m))], format="csr")


def _build(p: ConvexSubproblem, scale: float) -> Tuple[cp.Problem, cp.Variable]:
    """Flat QP over a = (alpha_1, ..., alpha_H) written relative to the center column.

    Since every alpha_k sums to one, ``W alpha = w_c + (W - w_c 1^T) alpha``.
    The offsets are O(delta); the centers carry the operating point. The
    objective is divided by ``scale``, its value at the center vertex.
    """
    H, m, n_x, _, n_hard, soft_dims = p.dims
    steps = p.bundles.steps
    c = p.bundles.center_index
    a = cp.Variable(H * m, nonneg=True, name="alpha")
    constraints = [sparse.kron(sparse.eye(H), np.ones((1, m)), format="csr") @ a == 1]

    root = np.sqrt(scale)
    r_parts = [_centered(step.r, c) for step in steps]
    r0 = np.concatenate([center for center, _ in r_parts]) / root
    objective = cp.sum_squares(_stack([offset for _, offset in r_parts], m, 0) @ a / root + r0)

    if H > 1:
        f_parts = [_centered(step.f, c) for step in steps[:-1]]
        x_parts = [_centered(step.x, c) for step in steps]
        rows = []
        for k in range(H - 1):
            row: List[Any] = [None] * H
            row[k] = sparse.csr_matrix(f_parts[k][1])
            row[k + 1] = sparse.csr_matrix(-x_parts[k + 1][1])
            rows.append(row)
        coupling = sparse.bmat(rows, format="csr")
        defect = np.concatenate([f_parts[k][0] - x_parts[k + 1][0] for k in range(H - 1)])
        s_pos = cp.Variable((H - 1) * n_x, nonneg=True)
        s_neg = cp.Variable((H - 1) * n_x, nonneg=True)
        constraints.append(coupling @ a + defect == s_pos - s_neg)
        penalty = cp.sum(s_pos) + cp.sum(s_neg)

        if n_hard:
            hard = [_centered(step.hard, c) for step in steps[:-1]]
            w = cp.Variable((H - 1) * n_hard, nonneg=True)
            constraints.append(
                _stack([offset for _, offset in hard], m, 1) @ a + np.concatenate([h for h, _ in hard]) + w >= 0
            )
            penalty = penalty + cp.sum(w)
        objective = objective + (p.mu / scale) * penalty

        for j, dim in enumerate(soft_dims):
            if not dim:
                continue
            soft = [_centered(step.soft[j], c) for step in steps[:-1]]
            d = cp.Variable((H - 1) * dim, nonneg=True)
            constraints.append(
                _stack([offset for _, offset in soft], m, 1) @ a + np.concatenate([g for g, _ in soft]) + d >= 0
            )
            objective = objective + (p.gammas[j] / scale) * cp.sum(d)

    if p.x_init is not None and not p.anchor_implied:
        center, offset = _centered(steps[0].x, c)
        constraints.append(offset @ a[:m] == p.x_init - center)
    return cp.Problem(cp.Minimize(objective), constraints), a


def _solver_options(solver: str, tol_feas: float, tol_opt: float, max_iter: int) -> Dict[str, Any]:
    if solver == "CLARABEL":
        return {
            "tol_feas": tol_feas,
            "tol_gap_abs": tol_opt,
            "tol_gap_rel": tol_opt,
            "max_iter": max_iter,
        }
    return {"eps_abs": tol_feas, "eps_rel": tol_opt, "max_iter": max(max_iter, OSQP_MIN_ITER), "polish": True}


def _run_backend(problem: cp.Problem, solver: str, options: Dict[str, Any]) -> str:
    problem.solve(solver=solver, **options)
    return problem.status


def _solve_with(
    p: ConvexSubproblem, solver: str, scale: float, tol_feas: float, tol_opt: float, max_iter: int
) -> SubproblemSolution:
    problem, a = _build(p, scale)
    start = time.perf_counter()
    try:
        status = _run_backend(problem, solver, _solver_options(solver, tol_feas, tol_opt, max_iter))
    except cp.error.SolverError as exc:
        raise SubproblemFailure(f"{solver} failed: {exc}", status="solver_error") from exc
    elapsed = time.perf_counter() - start

    if status != cp.OPTIMAL or a.value is None:
        raise SubproblemFailure(f"{solver} returned status {status!r}", status=status)
    raw = np.asarray(a.value, dtype=float).reshape(p.horizon, p.m)
    simplex_error = float(max(np.max(-raw.min(axis=1).clip(max=0.0)), np.max(np.abs(raw.sum(axis=1) - 1.0))))
    if simplex_error > SIMPLEX_TOLERANCE:
        raise SubproblemFailure(
            f"{solver} weights leave the simplex by {simplex_error:.3g}", status=cp.OPTIMAL_INACCURATE
        )
    alphas = np.clip(raw, 0.0, None)
    alphas /= alphas.sum(axis=1, keepdims=True)

    solution = evaluate(p, alphas)
    solution.status = status
    solution.backend = solver
    solution.solve_time = elapsed
    solution.simplex_error = simplex_error
    stats = problem.solver_stats
    solution.iterations = int(stats.num_iters) if stats is not None and stats.num_iters is not None else 0
    return solution


def solve(
    p: ConvexSubproblem,
    tol_feas: float = DEFAULT_TOL_FEAS,
    tol_opt: float = DEFAULT_TOL_OPT,
    max_iter: int = DEFAULT_MAX_ITER,
    solver: str = "CLARABEL",
    fallback: Optional[str] = DEFAULT_FALLBACK,
) -> SubproblemSolution:
    """Solve the subproblem to the requested feasibility and duality-gap tolerances.

    Only an ``optimal`` status whose weights sit on the simplex is accepted;
    anything else, inaccurate solutions included, moves on to ``fallback``.
    The weights are projected onto the simplex (clip at zero, renormalize)
    and every slack is recomputed in closed form, so the returned point
    satisfies the coupling constraints exactly.

    Raises:
        SubproblemFailure: If no backend produces an accepted solution
    """
    backends = [_checked_solver(solver)]
    if fallback is not None and _checked_solver(fallback) != backends[0]:
        backends.append(_checked_solver(fallback))
    center = np.zeros((p.horizon, p.m))
    center[:, p.bundles.center_index] = 1.0
    scale = max(1.0, evaluate(p, center).objective)

    failures: List[SubproblemFailure] = []
    for name in backends:
        try:
            solution = _solve_with(p, name, scale, tol_feas, tol_opt, max_iter)
        except SubproblemFailure as exc:
            failures.append(exc)
            logger.warning("%s", exc)
            continue
        if failures:
            logger.info("fallback %s solved the subproblem after %d failure(s)", name, len(failures))
        logger.debug(
            "subproblem solved: backend=%s J=%.6g iters=%d time=%.1fms",
            name, solution.objective, solution.iterations, 1e3 * solution.solve_time,
        )
        return solution
    raise SubproblemFailure("; ".join(str(exc) for exc in failures), status=failures[-1].status)


def _checked_solver(name: str) -> str:
    name = name.upper()
    if name not in SUPPORTED_SOLVERS:
        raise ContractViolation(f"solver must be one of {SUPPORTED_SOLVERS}, got {name!r}")
    return name



def recover(bundles: BundleSet, sol: SubproblemSolution) -> Trajectory:
    """Trajectory ``x_k = W_x^(k) alpha_k``, ``u_k = W_u^(k) alpha_k``."""
    if sol.alphas.shape != (bundles.horizon, bundles.m):
        raise ContractViolation("solution weights do not match the bundle set")
    states = np.array([step.x @ sol.alphas[k] for k, step in enumerate(bundles.steps)])
    controls = np.array([step.u @ sol.alphas[k] for k, step in enumerate(bundles.steps)])
    return Trajectory(states, controls)


def vertex_weights(p: ConvexSubproblem, columns: Sequence[int]) -> np.ndarray:
    """Unit-vector weights selecting ``columns[k]`` at each timestep."""
    alphas = np.zeros((p.horizon, p.m))
    alphas[np.arange(p.horizon), list(columns)] = 1.0
    return alphas


def dump_subproblem(p: ConvexSubproblem, path: Path) -> Path:
    """Write ``p`` as JSON for offline inspection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(p.to_dict(), handle)
    return path
