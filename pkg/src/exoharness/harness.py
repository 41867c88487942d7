"""Interface impedance, harness joint locking, and harness layout codes."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import HARNESS_DOFS, INTERFACES, PELVIS, KinematicTree, harness_dof_indices
from .spatial_algebra import SpatialForce, SpatialMotion, Transform, rotvec_from_matrix

SEGMENTS = ("thigh", "shank", "foot")
DEFAULT_K_LOCK = 1e5
HARNESS_EPSILON = 1e-4
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ImpedanceParams:
    """Diagonal stiffness ``K`` and damping ``D``, ordered [rx ry rz tx ty tz]."""

    K: np.ndarray = field(default_factory=lambda: np.zeros(6))
    D: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        for name in ("K", "D"):
            arr = np.array(getattr(self, name), dtype=float).reshape(6)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
                raise ValueError(f"impedance {name} entries must be finite and >= 0, got {arr}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_parts(cls, k_rot, k_trans, d_rot, d_trans) -> ImpedanceParams:
        b = lambda v: np.broadcast_to(np.asarray(v, float), (3,))
        return cls(np.concatenate([b(k_rot), b(k_trans)]), np.concatenate([b(d_rot), b(d_trans)]))

    @classmethod
    def zero(cls) -> ImpedanceParams:
        return cls()

    def scaled(self, alpha: float) -> ImpedanceParams:
        return ImpedanceParams(alpha * self.K, alpha * self.D)

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "D": self.D.tolist()}


def pelvis_impedance(k_trans=1e4, k_rot=500.0, ref_mass=19.0, ref_inertia=1.0) -> ImpedanceParams:
    """Fixed pelvis coupling, critically damped against reference mass and inertia."""
    return ImpedanceParams.from_parts(
        k_rot, k_trans, 2.0 * math.sqrt(k_rot * ref_inertia), 2.0 * math.sqrt(k_trans * ref_mass)
    )


@dataclass(frozen=True)
class InteractionWrench:
    interface: str
    wrench: SpatialForce
    at_pi: bool = False


def interaction_wrench(
    params: ImpedanceParams,
    pose_h: Transform,
    pose_e: Transform,
    twist_h: SpatialMotion,
    twist_e: SpatialMotion,
    interface: str = "",
) -> InteractionWrench:
    """Spring-damper wrench on the exoskeleton, in its attachment frame.

    Poses locate the attachment points; twists hold world angular velocity
    and world velocity of the attachment point. The rotational mismatch is
    the rotation vector of ``R_e^T R_h``.
    """
    Re = pose_e.R
    theta, at_pi = rotvec_from_matrix(Re.T @ pose_h.R)
    dp = Re.T @ (pose_h.translation - pose_e.translation)
    dw = Re.T @ (twist_h.angular - twist_e.angular)
    dv = Re.T @ (twist_h.linear - twist_e.linear)
    torque = params.K[:3] * theta + params.D[:3] * dw
    force = params.K[3:] * dp + params.D[3:] * dv
    return InteractionWrench(interface, SpatialForce(torque, force), at_pi)


def reaction_on_human(w: InteractionWrench) -> InteractionWrench:
    """Equal and opposite wrench, same point and axes."""
    return InteractionWrench(w.interface, -w.wrench, w.at_pi)


def translational_distance(pose_h: Transform, pose_e: Transform) -> np.ndarray:
    """Component-wise |position mismatch| in the exoskeleton attachment frame."""
    return np.abs(pose_e.R.T @ (pose_h.translation - pose_e.translation))


# -- locking ---------------------------------------------------------------


@dataclass(frozen=True)
class LockParams:
    """Per-coordinate lock gains over the whole tree; zero gains mean free."""

    k: np.ndarray
    d: np.ndarray
    q0: np.ndarray

    def __post_init__(self):
        arrs = []
        for name in ("k", "d", "q0"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            arrs.append(arr)
        if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ValueError("lock arrays must share one length")
        if np.any(self.k < 0) or np.any(self.d < 0):
            raise ValueError("lock gains must be >= 0")
        if np.any((self.k == 0) != (self.d == 0)):
            raise ValueError("a free DoF needs both lock gains zero, a locked DoF both nonzero")

    @property
    def locked(self) -> np.ndarray:
        return self.k > 0

    @classmethod
    def free(cls, n: int) -> LockParams:
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))


def lock_torque(lock: LockParams, q, q0=None, qdot=None) -> np.ndarray:
    """``K_lock (q - q0) + D_lock qdot``; enters the dynamics with a minus sign."""
    q = np.asarray(q, float)
    q0 = lock.q0 if q0 is None else np.asarray(q0, float)
    qdot = np.zeros_like(q) if qdot is None else np.asarray(qdot, float)
    return lock.k * (q - q0) + lock.d * qdot


def default_lock_damping(k_lock: float, epsilon: float = HARNESS_EPSILON) -> float:
    return 2.0 * math.sqrt(k_lock * epsilon)


# -- layout codes -----------------------------------------------------------

_MASK_BITS = {name: i for i, name in enumerate(HARNESS_DOFS)}


def _mask(*free) -> tuple:
    m = [False] * 6
    for name in free:
        m[_MASK_BITS[name]] = True
    return tuple(m)


PRESETS = {
    (0, 1, 0): {"thigh": _mask(), "shank": _mask("rz"), "foot": _mask()},
    (2, 6, 1): {"thigh": _mask("pz", "ry"), "shank": _mask(*HARNESS_DOFS), "foot": _mask("rx")},
    (3, 3, 2): {"thigh": _mask("pz", "rx", "rz"), "shank": _mask("pz", "rx", "rz"), "foot": _mask("rx", "rz")},
}


def parse_code(code) -> tuple:
    if isinstance(code, (tuple, list)):
        digits = [int(c) for c in code]
    else:
        text = str(code).strip()
        parts = re.findall(r"\d+", text)
        if len(parts) == 1 and len(parts[0]) == 3:
            parts = list(parts[0])
        if not re.fullmatch(r"\[?\s*\d+([\s,]+\d+)*\s*\]?|\d{3}", text):
            raise ValueError(f"malformed harness code {code!r}")
        digits = [int(p) for p in parts]
    if len(digits) != 3 or any(not 0 <= d <= 6 for d in digits):
        raise ValueError(f"harness code must be three integers in [0, 6], got {code!r}")
    return tuple(digits)


def format_code(code: tuple) -> str:
    return "[" + " ".join(str(c) for c in code) + "]"


@dataclass(frozen=True)
class HarnessConfig:
    """Free-DoF layout shared by both legs.

    ``masks[segment][k]`` is True when canonical harness DoF ``k`` (order
    px py pz rx ry rz) is free. A segment listed in ``disconnected`` has no
    cuff at all: its interface impedance is forced to zero.
    """

    code: tuple
    masks: dict
    disconnected: frozenset = frozenset()
    k_lock: float = DEFAULT_K_LOCK
    d_lock: float | None = None
    q0: dict = field(default_factory=dict)

    def __post_init__(self):
        code = parse_code(self.code)
        object.__setattr__(self, "code", code)
        masks = {}
        for seg, digit in zip(SEGMENTS, code):
            if seg not in self.masks:
                raise ValueError(f"missing mask for {seg}")
            m = tuple(bool(b) for b in self.masks[seg])
            if len(m) != 6:
                raise ValueError(f"{seg} mask must have 6 entries")
            if sum(m) != digit:
                raise ValueError(f"{seg} mask frees {sum(m)} DoFs but code digit is {digit}")
            masks[seg] = m
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "disconnected", frozenset(self.disconnected))
        for seg in self.disconnected:
            if seg not in SEGMENTS:
                raise ValueError(f"unknown segment {seg!r}")
        if not self.k_lock > 0:
            raise ValueError("k_lock must be positive")
        if self.d_lock is not None and not self.d_lock > 0:
            raise ValueError("d_lock must be positive")
        q0 = {}
        for seg in SEGMENTS:
            arr = np.array(self.q0.get(seg, np.zeros(6)), dtype=float).reshape(6)
            arr.setflags(write=False)
            q0[seg] = arr
        object.__setattr__(self, "q0", q0)

    @property
    def label(self) -> str:
        return format_code(self.code)

    def lock_damping(self, epsilon: float = HARNESS_EPSILON) -> float:
        return self.d_lock if self.d_lock is not None else default_lock_damping(self.k_lock, epsilon)

    def is_connected(self, interface: str) -> bool:
        return interface == PELVIS or interface.split("_")[0] not in self.disconnected

    def lock_params(self, tree: KinematicTree) -> LockParams:
        n = tree.dof_count
        k, d, q0 = np.zeros(n), np.zeros(n), np.zeros(n)
        eps = tree.metadata.get("layout", {}).get("harness_epsilon", HARNESS_EPSILON)
        dl = self.lock_damping(eps)
        for iface in INTERFACES:
            seg = iface.split("_")[0]
            for k_, (bit, idx) in enumerate(zip(self.masks[seg], harness_dof_indices(tree, iface))):
                q0[idx] = self.q0[seg][k_]
                if not bit:
                    k[idx] = self.k_lock
                    d[idx] = dl
        return LockParams(k, d, q0)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "code": self.label,
            "masks": {s: [int(b) for b in self.masks[s]] for s in SEGMENTS},
            "disconnected": sorted(self.disconnected),
            "k_lock": self.k_lock,
            "d_lock": self.d_lock,
            "q0": {s: self.q0[s].tolist() for s in SEGMENTS},
        }

    @classmethod
    def from_dict(cls, data: dict) -> HarnessConfig:
        version = data.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported harness layout format_version {version!r}")
        code = parse_code(data["code"])
        if "masks" in data:
            masks = {s: tuple(bool(b) for b in data["masks"][s]) for s in SEGMENTS}
            disconnected = data.get("disconnected", [s for s, d in zip(SEGMENTS, code) if d == 6])
        else:
            base = config_from_code(code)
            masks, disconnected = base.masks, data.get("disconnected", sorted(base.disconnected))
        return cls(
            code,
            masks,
            frozenset(disconnected),
            data.get("k_lock", DEFAULT_K_LOCK),
            data.get("d_lock"),
            data.get("q0", {}),
        )


def config_from_code(code, masks: dict | None = None, **kw) -> HarnessConfig:
    """Resolve a layout code; the three named layouts need no mask.

    A segment whose digit is 6 is treated as disconnected (no cuff).
    """
    digits = parse_code(code)
    if masks is None:
        if digits not in PRESETS:
            raise ValueError(f"harness code {format_code(digits)} is not a named layout; pass masks explicitly")
        masks = PRESETS[digits]
    kw.setdefault("disconnected", frozenset(s for s, d in zip(SEGMENTS, digits) if d == 6))
    return HarnessConfig(digits, masks, **kw)


def load_layout(path) -> HarnessConfig:
    return HarnessConfig.from_dict(json.loads(Path(path).read_text()))


def save_layout(cfg: HarnessConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def preset_layouts() -> dict:
    return {format_code(c): config_from_code(c) for c in PRESETS}
