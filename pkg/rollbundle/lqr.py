"""LQR baseline: finite-difference linearization and discrete Riccati iteration."""

import logging
from typing import Dict, Tuple

import numpy as np
import scipy.linalg

from rollbundle.exceptions import BaselineUnavailableError, ContractViolation
from rollbundle.plant import PlantParams, equilibrium_torques, propagate, reference_state
from rollbundle.problem import R2RProblem
from rollbundle.traces import ControlDecision

logger = logging.getLogger(__name__)

RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 200_000


def linearize(
    plant: PlantParams,
    x_op: np.ndarray,
    u_op: np.ndarray,
    upstream_velocity: float,
    eps: float = 1e-6,
) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians ``(A, B)`` of ``propagate`` at an operating point."""
    x_op = np.asarray(x_op, dtype=float)
    u_op = np.asarray(u_op, dtype=float)
    n_x, n_u = x_op.size, u_op.size
    # perturb all coordinates at once, one column each
    dx = eps * np.eye(n_x)
    du = eps * np.eye(n_u)
    X = x_op[:, None]
    U = u_op[:, None]
    A = (
        propagate(X + dx, np.repeat(U, n_x, axis=1), plant, upstream_velocity)
        - propagate(X - dx, np.repeat(U, n_x, axis=1), plant, upstream_velocity)
    ) / (2 * eps)
    B = (
        propagate(np.repeat(X, n_u, axis=1), U + du, plant, upstream_velocity)
        - propagate(np.repeat(X, n_u, axis=1), U - du, plant, upstream_velocity)
    ) / (2 * eps)
    return A, B


def discrete_lqr(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    tol: float = RICCATI_TOL,
    max_iter: int = RICCATI_MAX_ITER,
) -> Tuple[np.ndarray, np.ndarray]:
    """Infinite-horizon gain by iterating the Riccati recursion to a fixed point.

    Returns:
        Tuple ``(K, P)`` with ``u = -K x`` and cost-to-go matrix ``P``

    Raises:
        BaselineUnavailableError: If the recursion diverges or does not settle
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    n_x, n_u = B.shape
    if A.shape != (n_x, n_x) or Q.shape != (n_x, n_x) or R.shape != (n_u, n_u):
        raise ContractViolation("A, B, Q, R have inconsistent shapes")

    P = Q.copy()
    for iteration in range(max_iter):
        BtP = B.T @ P
        K = scipy.linalg.solve(R + BtP @ B, BtP @ A, assume_a="pos")
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise BaselineUnavailableError(f"Riccati recursion diverged after {iteration} iterations")
        change = float(np.max(np.abs(P_next - P)))
        P = P_next
        if change <= tol * max(1.0, float(np.max(np.abs(P)))):
            BtP = B.T @ P
            K = scipy.linalg.solve(R + BtP @ B, BtP @ A, assume_a="pos")
            logger.debug("Riccati recursion settled after %d iterations", iteration + 1)
            return K, P
    raise BaselineUnavailableError(f"Riccati recursion did not settle within {max_iter} iterations")


def lqr_gain(
    plant: PlantParams,
    operating_point: Tuple[np.ndarray, np.ndarray, float],
    Q_lqr: np.ndarray,
    R_lqr: np.ndarray,
) -> np.ndarray:
    """Gain of the discrete LQR for the plant linearized at ``(x_op, u_op, upstream)``."""
    x_op, u_op, upstream = operating_point
    n = plant.n_rollers
    if np.any(np.asarray(x_op)[:n] >= plant.ea):
        raise ContractViolation("operating point tensions must stay below EA")
    A, B = linearize(plant, x_op, u_op, upstream)
    K, _ = discrete_lqr(A, B, Q_lqr, R_lqr)
    return K


def closed_loop_spectral_radius(A: np.ndarray, B: np.ndarray, K: np.ndarray) -> float:
    return float(np.max(np.abs(scipy.linalg.eigvals(A - B @ K))))


def bryson_weights(max_state_dev: np.ndarray, max_control: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bryson's rule: ``Q_ii = 1 / dev_i^2`` and ``R_ii = 1 / u_max_i^2``."""
    max_state_dev = np.asarray(max_state_dev, dtype=float)
    max_control = np.asarray(max_control, dtype=float)
    if np.any(max_state_dev <= 0) or np.any(max_control <= 0):
        raise ContractViolation("Bryson limits must be positive")
    return np.diag(1.0 / max_state_dev**2), np.diag(1.0 / max_control**2)


class LQRController:
    """Saturated LQR tracking ``u = u_eq - K (x - x_ref)``.

    Gains are cached per (reference tensions, unwind velocity) pair, so a
    scenario with two setpoints synthesizes two gains.
    """

    name = "lqr"

    def __init__(self, problem: R2RProblem, Q_lqr: np.ndarray, R_lqr: np.ndarray):
        self.problem = problem
        self.Q = np.asarray(Q_lqr, dtype=float)
        self.R = np.asarray(R_lqr, dtype=float)
        self._gains: Dict[Tuple[float, ...], np.ndarray] = {}

    @classmethod
    def from_settings(cls, problem: R2RProblem, weighting: str = "problem", lqr=None) -> "LQRController":
        """Weights from the tracking cost, or from Bryson limits in ``lqr``."""
        if weighting == "bryson":
            n = problem.n_rollers
            state_dev = np.concatenate([np.full(n, lqr.max_tension_dev), np.full(n, lqr.max_velocity_dev)])
            Q, R = bryson_weights(state_dev, np.full(n, lqr.max_torque))
        else:
            w = problem.weights()
            Q, R = np.diag(w.q), np.diag(w.r)
        return cls(problem, Q, R)

    def gain(self, tensions_ref: np.ndarray, upstream: float) -> np.ndarray:
        key = tuple(np.round(np.append(tensions_ref, upstream), 12))
        if key not in self._gains:
            plant = self.problem.plant
            x_ref = reference_state(tensions_ref, upstream, plant)
            u_ref = equilibrium_torques(x_ref, plant)
            self._gains[key] = lqr_gain(plant, (x_ref, u_ref, upstream), self.Q, self.R)
            logger.info("synthesized LQR gain for references %s", np.round(tensions_ref, 3).tolist())
        return self._gains[key]

    def control(self, x: np.ndarray, tensions_ref: np.ndarray, upstream: float) -> np.ndarray:
        plant = self.problem.plant
        x_ref = reference_state(tensions_ref, upstream, plant)
        u_ref = equilibrium_torques(x_ref, plant)
        u = u_ref - self.gain(tensions_ref, upstream) @ (np.asarray(x, dtype=float) - x_ref)
        limit = self.problem.settings.torque_limit
        return np.clip(u, -limit, limit)

    def act(self, x, step, tensions, upstream, last_control) -> ControlDecision:
        return ControlDecision(control=self.control(x, tensions[0], upstream[0]))


def default_operating_point(problem: R2RProblem, tensions_ref: np.ndarray, upstream: float):
    x_ref = reference_state(tensions_ref, upstream, problem.plant)
    return x_ref, equilibrium_torques(x_ref, problem.plant), upstream


def riccati_reference(A, B, Q, R) -> np.ndarray:
    """Gain from ``scipy.linalg.solve_discrete_are``, for cross-checking."""
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
