"""Trajectory bundles: per-timestep samples and their function values.

A bundle at timestep k stores sampled state/control columns together with the
dynamics, residual and constraint values at those columns. Convex combinations
of the columns stand in for a Taylor model of every function.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from rollbundle.exceptions import ContractViolation, EvaluationError

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int], np.random.SeedSequence]
Sampler = Callable[[np.ndarray, np.ndarray, float, np.random.Generator, bool], Tuple[np.ndarray, np.ndarray]]

DEFAULT_RANDOM_SAMPLES = 20


@dataclass(eq=False)
class Trajectory:
    """State/control pairs ``(x_k, u_k)`` for k = 1..H, stored row-wise."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.states.shape[0] != self.controls.shape[0]:
            raise ContractViolation(
                f"states ({self.states.shape[0]}) and controls ({self.controls.shape[0]}) "
                "must cover the same horizon"
            )
        if self.states.shape[0] < 1:
            raise ContractViolation("trajectory horizon must be at least 1")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def n_x(self) -> int:
        return self.states.shape[1]

    @property
    def n_u(self) -> int:
        return self.controls.shape[1]

    def norm(self) -> float:
        """Euclidean norm over every state and control entry."""
        return math.sqrt(float(np.sum(self.states**2) + np.sum(self.controls**2)))

    def distance(self, other: "Trajectory") -> float:
        return (self - other).norm()

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        if self.states.shape != other.states.shape or self.controls.shape != other.controls.shape:
            raise ContractViolation("trajectories have different shapes")
        return Trajectory(self.states - other.states, self.controls - other.controls)

    def shifted(self, first_state: Optional[np.ndarray] = None) -> "Trajectory":
        """Drop the first pair, repeat the last one, optionally pin the new first state."""
        states = np.vstack([self.states[1:], self.states[-1:]])
        controls = np.vstack([self.controls[1:], self.controls[-1:]])
        if first_state is not None:
            states[0] = first_state
        return Trajectory(states, controls)

    def copy(self) -> "Trajectory":
        return Trajectory(self.states.copy(), self.controls.copy())


@dataclass(eq=False)
class ProblemFunctions:
    """Functions of a multiple-shooting problem, all vectorized over columns.

    Each callable receives the zero-based timestep ``k`` and column matrices
    ``X`` (n_x, m) and ``U`` (n_u, m). ``residual`` additionally receives the
    control of the previous timestep, which is frozen per outer iteration
    (see ``lagged_on``) so that r_k depends on (x_k, u_k) alone.

    Constraint functions follow the convention ``c(x, u) >= 0`` when satisfied.
    """

    horizon: int
    n_x: int
    n_u: int
    n_r: int
    n_hard: int
    soft_dims: Tuple[int, ...]
    dynamics: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    residual: Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    hard: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    soft: Callable[[int, np.ndarray, np.ndarray], Sequence[np.ndarray]]
    initial_control: Optional[np.ndarray] = None
    previous_controls: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.soft_dims = tuple(int(d) for d in self.soft_dims)
        if self.initial_control is None:
            self.initial_control = np.zeros(self.n_u)
        self.initial_control = np.asarray(self.initial_control, dtype=float).reshape(self.n_u)
        if self.previous_controls is None:
            self.previous_controls = np.tile(self.initial_control, (self.horizon, 1))
        self.previous_controls = np.asarray(self.previous_controls, dtype=float)
        if self.previous_controls.shape != (self.horizon, self.n_u):
            raise ContractViolation(
                f"previous_controls must have shape {(self.horizon, self.n_u)}, "
                f"got {self.previous_controls.shape}"
            )

    @property
    def n_soft(self) -> int:
        return len(self.soft_dims)

    def lagged_on(self, z: Trajectory) -> "ProblemFunctions":
        """Freeze the rate-term controls to ``z``'s controls, shifted by one step."""
        previous = np.vstack([self.initial_control[None, :], z.controls[:-1]])
        return replace(self, previous_controls=previous)

    def residual_at(self, k: int, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        u_prev = self.previous_controls[k]
        return self.residual(k, X, U, u_prev)


@dataclass(eq=False)
class TimestepBundle:
    """Sample matrices for one timestep; every matrix has ``m`` columns."""

    x: np.ndarray
    u: np.ndarray
    f: np.ndarray
    r: np.ndarray
    hard: np.ndarray
    soft: List[np.ndarray]

    @property
    def m(self) -> int:
        return self.x.shape[1]


@dataclass(eq=False)
class BundleSet:
    """Bundles for k = 1..H around one iterate.

    Attributes:
        steps: Per-timestep sample matrices
        delta: Per-timestep trust radius used for sampling
        center_index: Column i* holding the current iterate at every k
        anchored: Whether the k=1 state coordinates collapse onto x_init
    """

    steps: List[TimestepBundle]
    delta: float
    center_index: int = 0
    anchored: bool = False

    def __post_init__(self):
        if not self.steps:
            raise ContractViolation("a bundle set needs at least one timestep")
        m = self.steps[0].m
        for k, step in enumerate(self.steps):
            matrices = [step.x, step.u, step.f, step.r, step.hard, *step.soft]
            if any(mat.ndim != 2 or mat.shape[1] != m for mat in matrices):
                raise ContractViolation(f"timestep {k}: column counts disagree (expected {m})")

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def m(self) -> int:
        return self.steps[0].m

    @property
    def dims(self) -> Tuple[int, int, int, int, int, Tuple[int, ...]]:
        """(H, m, n_x, n_r, n_hard, soft dims) of the bundle blocks."""
        first = self.steps[0]
        return (
            self.horizon,
            self.m,
            first.x.shape[0],
            first.r.shape[0],
            first.hard.shape[0],
            tuple(block.shape[0] for block in first.soft),
        )

    def center(self) -> Trajectory:
        i = self.center_index
        return Trajectory(
            np.array([step.x[:, i] for step in self.steps]),
            np.array([step.u[:, i] for step in self.steps]),
        )


def _clip_to_ball(offsets: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(offsets, axis=0)
    scale = np.where(norms > radius, radius / np.maximum(norms, np.finfo(float).tiny), 1.0)
    return offsets * scale


def sample_stencil(
    center_x: np.ndarray,
    center_u: np.ndarray,
    delta: float,
    rng: np.random.Generator,
    anchored: bool = False,
    n_random: int = DEFAULT_RANDOM_SAMPLES,
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic +/- delta axis stencil plus clipped Gaussian draws.

    Column 0 is the center. Columns 1..2n hold ``center +/- delta e_j`` for the
    n = n_x + n_u coordinates, and the last ``n_random`` columns are draws from
    N(center, (delta/3)^2 I) rescaled radially onto the delta-ball when they
    land outside it. With ``anchored`` the state part of every column equals
    the center state, so only controls vary.

    Returns:
        Tuple ``(X, U)`` of shapes (n_x, m) and (n_u, m), m = 2n + n_random + 1

    Raises:
        ContractViolation: If ``delta`` is not positive or the center is not finite
    """
    if not (delta > 0 and math.isfinite(delta)):
        raise ContractViolation(f"sampling radius must be positive, got {delta}")
    center = np.concatenate([np.asarray(center_x, dtype=float), np.asarray(center_u, dtype=float)])
    if not np.all(np.isfinite(center)):
        raise ContractViolation("sampling center must be finite")
    n_x = len(center_x)
    n = center.size

    axes = delta * np.eye(n)
    gaussian = _clip_to_ball(rng.normal(scale=delta / 3.0, size=(n, n_random)), delta)
    offsets = np.hstack([np.zeros((n, 1)), axes, -axes, gaussian])
    if anchored:
        # zeroing coordinates never moves a column out of the ball
        offsets[:n_x] = 0.0
    samples = center[:, None] + offsets
    return samples[:n_x], samples[n_x:]


def _evaluate(
    funcs: ProblemFunctions, k: int, X: np.ndarray, U: np.ndarray
) -> TimestepBundle:
    f = np.asarray(funcs.dynamics(k, X, U), dtype=float)
    r = np.asarray(funcs.residual_at(k, X, U), dtype=float)
    hard = np.asarray(funcs.hard(k, X, U), dtype=float).reshape(funcs.n_hard, -1)
    soft = [
        np.asarray(block, dtype=float).reshape(dim, -1)
        for block, dim in zip(funcs.soft(k, X, U), funcs.soft_dims)
    ]
    for name, values in (("dynamics", f), ("residual", r), ("hard constraint", hard)) + tuple(
        (f"soft constraint {j + 1}", block) for j, block in enumerate(soft)
    ):
        bad = ~np.all(np.isfinite(values), axis=0)
        if np.any(bad):
            raise EvaluationError(f"non-finite {name} value", k, int(np.argmax(bad)))
    return TimestepBundle(x=X, u=U, f=f, r=r, hard=hard, soft=soft)


def build_bundles(
    z: Trajectory,
    delta: float,
    funcs: ProblemFunctions,
    seed: SeedLike,
    x_init: Optional[np.ndarray] = None,
    sampler: Optional[Sampler] = None,
    workers: int = 1,
) -> BundleSet:
    """Sample around every (x_k, u_k) of ``z`` and evaluate all problem functions.

    Every timestep draws from its own generator spawned from ``seed``, so a
    parallel build (``workers > 1``) returns exactly the serial result.

    Args:
        z: Current iterate
        delta: Per-timestep trust radius
        funcs: Problem functions (rate term already lagged on ``z``)
        seed: Seed or SeedSequence for this iteration
        x_init: Measured initial state; when given, the first bundle samples
            controls only and its state coordinates equal ``x_init``
        sampler: Replacement for ``sample_stencil`` with the same signature
        workers: Thread count for per-timestep evaluation

    Raises:
        ContractViolation: If ``z`` does not match the function dimensions
        EvaluationError: If any function value is non-finite
    """
    if z.horizon != funcs.horizon or z.n_x != funcs.n_x or z.n_u != funcs.n_u:
        raise ContractViolation(
            f"trajectory shape (H={z.horizon}, n_x={z.n_x}, n_u={z.n_u}) does not match "
            f"problem (H={funcs.horizon}, n_x={funcs.n_x}, n_u={funcs.n_u})"
        )
    sampler = sampler or sample_stencil
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = sequence.spawn(z.horizon)

    centers_x = z.states.copy()
    if x_init is not None:
        centers_x[0] = np.asarray(x_init, dtype=float)

    def build_step(k: int) -> TimestepBundle:
        rng = np.random.default_rng(children[k])
        anchored = x_init is not None and k == 0
        X, U = sampler(centers_x[k], z.controls[k], delta, rng, anchored)
        return _evaluate(funcs, k, X, U)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            steps = list(pool.map(build_step, range(z.horizon)))
    else:
        steps = [build_step(k) for k in range(z.horizon)]

    logger.debug("built %d bundles with m=%d at delta=%.4g", len(steps), steps[0].m, delta)
    return BundleSet(steps=steps, delta=float(delta), center_index=0, anchored=x_init is not None)
