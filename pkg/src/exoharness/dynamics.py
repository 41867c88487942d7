"""Joint-space dynamics ``B(q) qdd + C(q, qd) qd + g(q) = tau + sum J^T w - M_lock``.

The heavy lifting happens in the compiled kernels: Newton-Euler for the
bias and inverse dynamics, the composite-rigid-body method for ``B``. The
wrappers here validate shapes and convert between the value types and
flat arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from . import _kernels as K
from .model import ACTUATED_JOINTS, KinematicTree, SystemState, point_jacobian
from .spatial_algebra import SpatialForce

GRAVITY = np.array([0.0, 0.0, -9.81])

# |lambda h| bound of the classic RK4 stability region on the imaginary axis
RK4_IMAG_LIMIT = 2.0 * math.sqrt(2.0)


class DimensionError(ValueError):
    pass


class SingularMassMatrix(np.linalg.LinAlgError):
    def __init__(self, dof: int, name: str):
        super().__init__(f"mass matrix not positive definite at DoF {dof} ({name})")
        self.dof = dof
        self.name = name


class SimulationDiverged(RuntimeError):
    def __init__(self, state: SystemState):
        super().__init__(f"non-finite state after t = {state.time:.6g} s")
        self.state = state


@dataclass(frozen=True)
class DynamicsTerms:
    B: np.ndarray
    bias: np.ndarray
    g: np.ndarray


class ExternalWrench(NamedTuple):
    """Wrench applied at ``point`` of ``body``.

    ``frame="local"`` means components are in the body axes at the point;
    ``frame="world"`` uses world axes at the point.
    """

    body: str
    point: object
    wrench: SpatialForce
    frame: str = "local"


def _vec(x, n, what):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape[0] != n:
        raise DimensionError(f"{what} has length {arr.shape[0]}, expected {n}")
    return np.ascontiguousarray(arr)


def _prepare(tree: KinematicTree, q, qd):
    arr = tree.arrays
    n = tree.dof_count
    q = _vec(q, n, "q")
    qd = _vec(qd, n, "qdot")
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    S = np.empty((n, 6))
    V = np.empty((n, 6))
    K.forward_kinematics(*arr.kin, q, qd, R, p, S, V)
    I6 = np.empty((n, 6, 6))
    K.world_inertias(arr.mass, arr.com, arr.icom, R, p, I6)
    return R, p, S, V, I6


def mass_matrix(tree: KinematicTree, q) -> np.ndarray:
    n = tree.dof_count
    _, _, S, _, I6 = _prepare(tree, q, np.zeros(n))
    H = np.zeros((n, n))
    K.crba(tree.arrays.parent, S, I6, H)
    return H


def external_generalized_forces(tree: KinematicTree, q, external_wrenches=()) -> np.ndarray:
    """``sum J^T w`` over the given wrenches."""
    Q = np.zeros(tree.dof_count)
    for ew in external_wrenches:
        J = point_jacobian(tree, q, ew.body, ew.point, frame=ew.frame)
        Q += J.T @ ew.wrench.vector
    return Q


def inverse_dynamics(tree, q, qdot, qddot, gravity=GRAVITY, external_wrenches=()) -> np.ndarray:
    """``B qdd + C qd + g - sum J^T w``."""
    n = tree.dof_count
    qdd = _vec(qddot, n, "qddot")
    _, _, S, V, I6 = _prepare(tree, q, qdot)
    tau = np.empty(n)
    K.rnea(tree.arrays.parent, S, V, I6, _vec(qdot, n, "qdot"), qdd, _vec(gravity, 3, "gravity"), tau)
    if external_wrenches:
        tau -= external_generalized_forces(tree, q, external_wrenches)
    return tau


def bias_forces(tree, q, qdot, gravity=GRAVITY) -> np.ndarray:
    return inverse_dynamics(tree, q, qdot, np.zeros(tree.dof_count), gravity)


def gravity_vector(tree, q, gravity=GRAVITY) -> np.ndarray:
    n = tree.dof_count
    return inverse_dynamics(tree, q, np.zeros(n), np.zeros(n), gravity)


def dynamics_terms(tree, q, qdot, gravity=GRAVITY) -> DynamicsTerms:
    return DynamicsTerms(mass_matrix(tree, q), bias_forces(tree, q, qdot, gravity), gravity_vector(tree, q, gravity))


def kinetic_energy(tree, q, qdot) -> float:
    _, _, _, V, I6 = _prepare(tree, q, qdot)
    return float(K.kinetic_energy(V, I6))


def potential_energy(tree, q, gravity=GRAVITY) -> float:
    n = tree.dof_count
    R, p, _, _, _ = _prepare(tree, q, np.zeros(n))
    arr = tree.arrays
    com = np.einsum("nij,nj->ni", R, arr.com) + p
    return float(-np.sum(arr.mass * (com @ np.asarray(gravity, float))))


def spd_solve(tree: KinematicTree, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.empty_like(b)
    fail = K.cholesky_solve(np.ascontiguousarray(A), np.ascontiguousarray(b), x)
    if fail >= 0:
        raise SingularMassMatrix(fail, tree.joints[fail].name)
    return x


def forward_dynamics(
    tree: KinematicTree,
    state: SystemState,
    tau=None,
    external_wrenches=(),
    lock_torques=None,
    gravity=GRAVITY,
) -> np.ndarray:
    """Solve for ``qdd`` with a Cholesky factorization of ``B``."""
    state.check(tree)
    n = tree.dof_count
    rhs = np.zeros(n) if tau is None else _vec(tau, n, "tau").copy()
    if external_wrenches:
        rhs += external_generalized_forces(tree, state.q, external_wrenches)
    if lock_torques is not None:
        rhs -= _vec(lock_torques, n, "lock_torques")
    rhs -= bias_forces(tree, state.q, state.qdot, gravity)
    return spd_solve(tree, mass_matrix(tree, state.q), rhs)


# -- integration -------------------------------------------------------------

ForcesCallback = Callable[[float, np.ndarray, np.ndarray], object]


def _split_forces(out, n):
    if isinstance(out, tuple):
        f, stiff, damp = out
        return _vec(f, n, "applied forces"), stiff, damp
    return _vec(out, n, "applied forces"), None, None


def integrate_step(
    tree: KinematicTree,
    state: SystemState,
    forces_callback: ForcesCallback,
    dt: float,
    scheme: str = "rk4",
    gravity=GRAVITY,
) -> SystemState:
    """Advance one step.

    ``forces_callback(t, q, qdot)`` returns the applied generalized force
    (actuation plus projected wrenches minus lock torques). For the
    ``semi_implicit`` scheme it may instead return ``(force, K, D)`` with
    the force's stiffness and damping matrices, which are then treated
    implicitly; without them the scheme is plain symplectic Euler.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    state.check(tree)
    n = tree.dof_count
    t, q, v = state.time, state.q, state.qdot

    if scheme == "rk4":
        def acc(tt, qq, vv):
            f, _, _ = _split_forces(forces_callback(tt, qq, vv), n)
            rhs = f - bias_forces(tree, qq, vv, gravity)
            if not np.all(np.isfinite(rhs)):
                raise SimulationDiverged(state)
            return spd_solve(tree, mass_matrix(tree, qq), rhs)

        k1q, k1v = v, acc(t, q, v)
        k2q, k2v = v + 0.5 * dt * k1v, acc(t + 0.5 * dt, q + 0.5 * dt * k1q, v + 0.5 * dt * k1v)
        k3q, k3v = v + 0.5 * dt * k2v, acc(t + 0.5 * dt, q + 0.5 * dt * k2q, v + 0.5 * dt * k2v)
        k4q, k4v = v + dt * k3v, acc(t + dt, q + dt * k3q, v + dt * k3v)
        q_new = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
        v_new = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    elif scheme == "semi_implicit":
        f, stiff, damp = _split_forces(forces_callback(t, q, v), n)
        B = mass_matrix(tree, q)
        rhs = dt * (f - bias_forces(tree, q, v, gravity))
        A = B.copy()
        if damp is not None:
            A += dt * np.asarray(damp, float)
        if stiff is not None:
            stiff = np.asarray(stiff, float)
            A += dt * dt * stiff
            rhs -= dt * dt * (stiff @ v)
        if not np.all(np.isfinite(rhs)):
            raise SimulationDiverged(state)
        v_new = v + spd_solve(tree, A, rhs)
        q_new = q + dt * v_new
    else:
        raise ValueError(f"unknown integration scheme {scheme!r}")

    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(v_new))):
        raise SimulationDiverged(state)
    return SystemState(q_new, v_new, t + dt)


def max_natural_frequency(tree: KinematicTree, q, stiffness) -> float:
    """Largest undamped natural frequency [rad/s] of ``B qdd + K q = 0``."""
    B = mass_matrix(tree, q)
    Kmat = np.asarray(stiffness, float)
    Kmat = 0.5 * (Kmat + Kmat.T)
    lam = scipy.linalg.eigh(Kmat, B, eigvals_only=True)
    return float(math.sqrt(max(lam.max(), 0.0)))


def rk4_stable(tree: KinematicTree, q, stiffness, dt: float) -> tuple[bool, float]:
    """Whether explicit RK4 is stable at ``dt`` for the undamped system; also returns ``omega_max * dt``."""
    ratio = max_natural_frequency(tree, q, stiffness) * dt
    return ratio < RK4_IMAG_LIMIT, ratio


def rk4_amplification(tree: KinematicTree, q, stiffness, damping, dt: float) -> float:
    """Largest RK4 growth factor over the modes of ``B qdd + D qd + K q = 0``.

    Damping matters here: a small inertia behind a modest damper is a fast
    real mode that RK4 cannot step even when every stiffness is soft.
    """
    n = tree.dof_count
    Binv = np.linalg.inv(mass_matrix(tree, q))
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -Binv @ np.asarray(stiffness, float)
    A[n:, n:] = -Binv @ np.asarray(damping, float)
    z = np.linalg.eigvals(A) * dt
    growth = np.abs(1.0 + z + z**2 / 2.0 + z**3 / 6.0 + z**4 / 24.0)
    return float(growth.max())


# -- actuation policies --------------------------------------------------------


class ActuationPolicy:
    name = "abstract"
    code = -1

    def __init__(self, tree: KinematicTree, actuated=ACTUATED_JOINTS, gravity=GRAVITY):
        self.mask = np.zeros(tree.dof_count, dtype=bool)
        for j in actuated:
            if j in tree.dof_index:
                self.mask[tree.dof_index[j]] = True
        self.tree = tree
        self.gravity = np.asarray(gravity, float)

    def __call__(self, q, qdot) -> np.ndarray:
        raise NotImplementedError


class ZeroTorque(ActuationPolicy):
    name = "zero"
    code = K.POLICY_ZERO

    def __call__(self, q, qdot):
        return np.zeros(self.tree.dof_count)


class GravityCompensation(ActuationPolicy):
    """``g(q)`` restricted to the actuated joints (hips and knees)."""

    name = "gravity"
    code = K.POLICY_GRAVITY

    def __call__(self, q, qdot):
        return np.where(self.mask, gravity_vector(self.tree, q, self.gravity), 0.0)


POLICIES = {"zero": ZeroTorque, "gravity": GravityCompensation}


def make_policy(name: str, tree: KinematicTree, **kw) -> ActuationPolicy:
    try:
        return POLICIES[name](tree, **kw)
    except KeyError:
        raise ValueError(f"unknown actuation policy {name!r}; choose from {sorted(POLICIES)}") from None
