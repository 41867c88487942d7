"""Rotations, rigid transforms and 6D spatial vectors.

Conventions (every other module relies on these):

* Spatial motion vectors are stacked ``[angular; linear]``, i.e.
  ``[omega; v]`` where ``v`` is the velocity of the body-fixed point that
  coincides with the origin of the frame the vector is expressed in.
* Spatial force vectors are stacked ``[torque; force]``; the torque is taken
  about the origin of the expressing frame.
* A :class:`Transform` ``T = (R, p)`` maps coordinates of a child frame B
  into a parent frame A: ``x_A = R @ x_B + p``.
* Cross-product operators::

      crm(v) @ m = [w x m_w ;  v_lin x m_w + w x m_lin]
      crf(v) @ f = [w x f_t + v_lin x f_f ;  w x f_f]      (= -crm(v).T @ f)

Quaternions are stored scalar-first ``[w, x, y, z]`` with ``w >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

__all__ = [
    "Rotation",
    "Transform",
    "SpatialMotion",
    "SpatialForce",
    "SpatialInertia",
    "skew",
    "crm",
    "crf",
    "compose",
    "inverse",
    "transform_motion",
    "transform_force",
    "power",
    "rotvec_from_matrix",
]


def skew(v) -> np.ndarray:
    """Matrix form of ``v x ·``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def crm(v) -> np.ndarray:
    """6x6 motion cross-product operator for the spatial motion ``v``."""
    v = np.asarray(v, dtype=float)
    wx = skew(v[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = wx
    out[3:, :3] = skew(v[3:])
    out[3:, 3:] = wx
    return out


def crf(v) -> np.ndarray:
    """6x6 force cross-product operator, the dual of :func:`crm`."""
    return -crm(v).T


def _canonical(quat: np.ndarray) -> np.ndarray:
    quat = np.asarray(quat, dtype=float)
    n = np.linalg.norm(quat)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalise quaternion {quat!r}")
    quat = quat / n
    if quat[0] == 0.0:
        # half-turn: q and -q both have w = 0, so pin the sign on the vector part
        lead = quat[1:][np.flatnonzero(quat[1:])[0]]
        return -quat if lead < 0.0 else quat
    return -quat if quat[0] < 0.0 else quat


# |w| below this counts as a half-turn (angle within ~2e-12 rad of pi)
PI_TOLERANCE = 1e-12


def rotvec_from_matrix(R) -> tuple[np.ndarray, bool]:
    """Rotation vector (axis * angle) of ``R`` and a flag set at exactly pi.

    At an angle of pi the axis sign is ambiguous; the returned axis is then
    chosen with its largest-magnitude component positive and the flag is
    True so that callers can record the event.
    """
    R = np.asarray(R, dtype=float)
    quat = _canonical(_ScipyRotation.from_matrix(R).as_quat(scalar_first=True))
    w = quat[0]
    vec = quat[1:]
    s = np.linalg.norm(vec)
    if s < 1e-300:
        return np.zeros(3), False
    at_pi = abs(w) < PI_TOLERANCE
    angle = np.pi if at_pi else 2.0 * np.arctan2(s, w)
    axis = vec / s
    if at_pi:
        k = int(np.argmax(np.abs(axis)))
        if axis[k] < 0.0:
            axis = -axis
    return axis * angle, bool(at_pi)


@dataclass(frozen=True)
class Rotation:
    """Immutable 3D rotation stored as a unit quaternion ``[w, x, y, z]``."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "quat", _canonical(self.quat))
        self.quat.setflags(write=False)

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        R = np.asarray(R, dtype=float)
        if R.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("matrix is not a proper rotation")
        return cls(_ScipyRotation.from_matrix(R).as_quat(scalar_first=True))

    @classmethod
    def from_rotvec(cls, rotvec) -> Rotation:
        return cls(_ScipyRotation.from_rotvec(np.asarray(rotvec, float)).as_quat(scalar_first=True))

    @classmethod
    def about_axis(cls, axis, angle: float) -> Rotation:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls.from_rotvec(axis * angle)

    @classmethod
    def rot_x(cls, angle: float) -> Rotation:
        return cls.about_axis([1.0, 0.0, 0.0], angle)

    @classmethod
    def rot_y(cls, angle: float) -> Rotation:
        return cls.about_axis([0.0, 1.0, 0.0], angle)

    @classmethod
    def rot_z(cls, angle: float) -> Rotation:
        return cls.about_axis([0.0, 0.0, 1.0], angle)

    @property
    def matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def as_rotvec(self) -> np.ndarray:
        return rotvec_from_matrix(self.matrix)[0]

    def inverse(self) -> Rotation:
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            w1, x1, y1, z1 = self.quat
            w2, x2, y2, z2 = other.quat
            return Rotation(
                np.array(
                    [
                        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                    ]
                )
            )
        return self.matrix @ np.asarray(other, dtype=float)

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def angle_to(self, other: Rotation) -> float:
        return float(np.linalg.norm((self.inverse() @ other).as_rotvec()))


@dataclass(frozen=True)
class Transform:
    """Rigid transform mapping child-frame coordinates into the parent frame."""

    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Transform:
        return cls()

    @classmethod
    def from_translation(cls, p) -> Transform:
        return cls(Rotation(), np.asarray(p, dtype=float))

    @classmethod
    def from_matrix(cls, H) -> Transform:
        H = np.asarray(H, dtype=float)
        return cls(Rotation.from_matrix(H[:3, :3]), H[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def p(self) -> np.ndarray:
        return self.translation

    def as_matrix(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.R
        H[:3, 3] = self.translation
        return H

    def apply(self, x) -> np.ndarray:
        """Map a point given in child coordinates into the parent frame."""
        return self.R @ np.asarray(x, dtype=float) + self.translation

    def __matmul__(self, other: Transform) -> Transform:
        return compose(self, other)

    def inverse(self) -> Transform:
        return inverse(self)

    def is_close(self, other: Transform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )


def compose(a: Transform, b: Transform) -> Transform:
    """Transform applying ``b`` first, then ``a``."""
    return Transform(a.rotation @ b.rotation, a.R @ b.translation + a.translation)


def inverse(T: Transform) -> Transform:
    Rinv = T.rotation.inverse()
    return Transform(Rinv, -(Rinv.matrix @ T.translation))


@dataclass(frozen=True)
class SpatialMotion:
    angular: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        for name in ("angular", "linear"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zero(cls) -> SpatialMotion:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> SpatialMotion:
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.angular, self.linear])

    def point_velocity(self, r) -> np.ndarray:
        """Velocity of the body point at ``r`` (same frame as the motion)."""
        return self.linear + np.cross(self.angular, np.asarray(r, dtype=float))

    def __add__(self, other: SpatialMotion) -> SpatialMotion:
        return SpatialMotion(self.angular + other.angular, self.linear + other.linear)

    def __sub__(self, other: SpatialMotion) -> SpatialMotion:
        return SpatialMotion(self.angular - other.angular, self.linear - other.linear)

    def __neg__(self) -> SpatialMotion:
        return SpatialMotion(-self.angular, -self.linear)


@dataclass(frozen=True)
class SpatialForce:
    torque: np.ndarray
    force: np.ndarray

    def __post_init__(self):
        for name in ("torque", "force"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zero(cls) -> SpatialForce:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, f) -> SpatialForce:
        f = np.asarray(f, dtype=float)
        return cls(f[:3], f[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.torque, self.force])

    def __add__(self, other: SpatialForce) -> SpatialForce:
        return SpatialForce(self.torque + other.torque, self.force + other.force)

    def __neg__(self) -> SpatialForce:
        return SpatialForce(-self.torque, -self.force)


def transform_motion(T: Transform, v: SpatialMotion) -> SpatialMotion:
    """Express a motion given in frame B in frame A, where ``T`` maps B to A."""
    w = T.R @ v.angular
    return SpatialMotion(w, T.R @ v.linear + np.cross(T.translation, w))


def transform_force(T: Transform, f: SpatialForce) -> SpatialForce:
    """Express a force given in frame B in frame A (dual of :func:`transform_motion`)."""
    F = T.R @ f.force
    return SpatialForce(T.R @ f.torque + np.cross(T.translation, F), F)


def power(f: SpatialForce, v: SpatialMotion) -> float:
    """Scalar pairing ``<f, v>``; invariant under change of frame."""
    return float(f.torque @ v.angular + f.force @ v.linear)


@dataclass(frozen=True)
class SpatialInertia:
    """Rigid-body inertia: mass, centre of mass and rotational inertia about it."""

    mass: float
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inertia: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        com = np.array(self.com, dtype=float).reshape(3)
        inertia = np.array(self.inertia, dtype=float).reshape(3, 3)
        if not self.mass > 0.0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ValueError("rotational inertia must be symmetric")
        inertia = 0.5 * (inertia + inertia.T)
        moments = np.linalg.eigvalsh(inertia)
        scale = max(float(np.max(np.abs(moments))), 1e-300)
        if moments[0] < -1e-12 * scale:
            raise ValueError("rotational inertia must be positive semi-definite")
        a, b, c = np.sort(moments)
        if a + b < c - 1e-9 * scale:
            raise ValueError("principal moments violate the triangle inequality")
        com.setflags(write=False)
        inertia.setflags(write=False)
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "com", com)
        object.__setattr__(self, "inertia", inertia)

    @classmethod
    def point_mass(cls, mass: float, com=(0.0, 0.0, 0.0)) -> SpatialInertia:
        return cls(mass, np.asarray(com, float), np.zeros((3, 3)))

    @classmethod
    def box(cls, mass: float, size, com=(0.0, 0.0, 0.0)) -> SpatialInertia:
        """Uniform box with edge lengths ``size`` aligned with the body axes."""
        a, b, c = size
        I = mass / 12.0 * np.diag([b * b + c * c, a * a + c * c, a * a + b * b])
        return cls(mass, np.asarray(com, float), I)

    @property
    def matrix(self) -> np.ndarray:
        """6x6 inertia about the frame origin in ``[angular; linear]`` order."""
        cx = skew(self.com)
        out = np.zeros((6, 6))
        out[:3, :3] = self.inertia + self.mass * cx @ cx.T
        out[:3, 3:] = self.mass * cx
        out[3:, :3] = self.mass * cx.T
        out[3:, 3:] = self.mass * np.eye(3)
        return out

    def transformed(self, T: Transform) -> SpatialInertia:
        """The same body inertia expressed in the parent frame of ``T``."""
        R = T.R
        return SpatialInertia(self.mass, T.apply(self.com), R @ self.inertia @ R.T)

    def kinetic_energy(self, v: SpatialMotion) -> float:
        vec = v.vector
        return 0.5 * float(vec @ self.matrix @ vec)
