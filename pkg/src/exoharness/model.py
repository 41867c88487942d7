"""Kinematic trees for the exoskeleton and its harness chains.

The exoskeleton is grounded by its right foot. Its sagittal chain runs
right ankle -> right knee -> right hip -> left hip -> left knee -> left
ankle, and every thigh, shank and foot link carries a six-joint harness
chain (prismatic x, y, z, then revolute x, y, z) ending at the cuff that
couples to the wearer. The builder places every frame from the home
(standing) positions of the joint centres, so all link frames share the
world orientation at ``q = 0``: x anterior, y to the left, z up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .spatial_algebra import Rotation, SpatialInertia, SpatialMotion, Transform

FORMAT_VERSION = 1

HARNESS_DOFS = ("px", "py", "pz", "rx", "ry", "rz")
INTERFACES = ("thigh_r", "shank_r", "foot_r", "thigh_l", "shank_l", "foot_l")
PELVIS = "pelvis"
ALL_INTERFACES = INTERFACES + (PELVIS,)
LEG_JOINTS = ("ankle_r", "knee_r", "hip_r", "hip_l", "knee_l", "ankle_l")
ACTUATED_JOINTS = ("knee_r", "hip_r", "hip_l", "knee_l")

# exoskeleton joint coordinate = sign * anatomical angle (flexion / dorsiflexion)
ANATOMICAL_SIGNS = {
    "ankle_r": 1.0,
    "knee_r": -1.0,
    "hip_r": 1.0,
    "hip_l": -1.0,
    "knee_l": 1.0,
    "ankle_l": -1.0,
}

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str
    axis: np.ndarray
    parent_attachment: Transform = field(default_factory=Transform)
    lower: float = -np.inf
    upper: float = np.inf

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ModelError(f"joint {self.name}: unknown kind {self.kind!r}")
        axis = np.array(self.axis, dtype=float).reshape(3)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > 1e-9:
            raise ModelError(f"joint {self.name}: axis must be a unit vector (|axis|={norm})")
        if not self.lower <= self.upper:
            raise ModelError(f"joint {self.name}: lower limit exceeds upper limit")
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)


@dataclass(frozen=True)
class BodySpec:
    name: str
    inertia: SpatialInertia
    points: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = {}
        for key, val in self.points.items():
            arr = np.array(val, dtype=float).reshape(3)
            arr.setflags(write=False)
            pts[key] = arr
        object.__setattr__(self, "points", pts)


class TreeArrays(NamedTuple):
    parent: np.ndarray
    jtype: np.ndarray
    axis: np.ndarray
    xrot: np.ndarray
    xpos: np.ndarray
    mass: np.ndarray
    com: np.ndarray
    icom: np.ndarray
    base_R: np.ndarray
    base_p: np.ndarray

    @property
    def kin(self):
        """Arguments of the kinematic kernels."""
        return (self.parent, self.jtype, self.axis, self.xrot, self.xpos, self.base_R, self.base_p)


@dataclass(frozen=True)
class KinematicTree:
    """Articulated tree; joint ``i`` connects ``parent[i]`` (or the base) to body ``i``."""

    name: str
    base: BodySpec
    bodies: tuple
    joints: tuple
    parent: tuple
    base_pose: Transform = field(default_factory=Transform)
    interfaces: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        n = len(self.bodies)
        if len(self.joints) != n or len(self.parent) != n:
            raise ModelError("bodies, joints and parent must have equal length")
        for i, pa in enumerate(self.parent):
            if not -1 <= pa < i:
                raise ModelError(f"parent[{i}] = {pa} breaks topological order")
        names = [b.name for b in self.bodies] + [self.base.name]
        if len(set(names)) != len(names):
            raise ModelError("body names must be unique")
        for iface, (body, point) in self.interfaces.items():
            self.body_point(body, point)

    @property
    def dof_count(self) -> int:
        return len(self.joints)

    @cached_property
    def dof_index(self) -> dict:
        return {j.name: i for i, j in enumerate(self.joints)}

    @cached_property
    def body_index(self) -> dict:
        out = {b.name: i for i, b in enumerate(self.bodies)}
        out[self.base.name] = -1
        return out

    @property
    def total_mass(self) -> float:
        return self.base.inertia.mass + sum(b.inertia.mass for b in self.bodies)

    def body(self, name: str) -> BodySpec:
        idx = self.body_index.get(name)
        if idx is None:
            raise KeyError(f"unknown body {name!r}")
        return self.base if idx < 0 else self.bodies[idx]

    def body_point(self, body: str, point) -> np.ndarray:
        """Resolve a named (or literal) point on ``body`` in body coordinates."""
        spec = self.body(body)
        if isinstance(point, str):
            if point not in spec.points:
                raise KeyError(f"body {body!r} has no point {point!r}")
            return spec.points[point]
        return np.asarray(point, dtype=float).reshape(3)

    def ancestors(self, body: str) -> list:
        out = []
        j = self.body_index[body]
        while j >= 0:
            out.append(j)
            j = self.parent[j]
        return out

    @cached_property
    def arrays(self) -> TreeArrays:
        n = self.dof_count
        xrot = np.empty((n, 3, 3))
        xpos = np.empty((n, 3))
        for i, j in enumerate(self.joints):
            xrot[i] = j.parent_attachment.R
            xpos[i] = j.parent_attachment.translation
        return TreeArrays(
            parent=np.array(self.parent, dtype=np.int64),
            jtype=np.array([K.REVOLUTE if j.kind == "revolute" else K.PRISMATIC for j in self.joints], dtype=np.int64),
            axis=np.array([j.axis for j in self.joints], dtype=float).reshape(n, 3),
            xrot=xrot,
            xpos=xpos,
            mass=np.array([b.inertia.mass for b in self.bodies], dtype=float),
            com=np.array([b.inertia.com for b in self.bodies], dtype=float).reshape(n, 3),
            icom=np.array([b.inertia.inertia for b in self.bodies], dtype=float).reshape(n, 3, 3),
            base_R=np.ascontiguousarray(self.base_pose.R),
            base_p=np.array(self.base_pose.translation, dtype=float),
        )

    def topology(self) -> tuple:
        return tuple(self.parent), tuple((j.name, j.kind, tuple(j.axis)) for j in self.joints)


@dataclass(frozen=True)
class SystemState:
    q: np.ndarray
    qdot: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        qd = np.array(self.qdot, dtype=float).reshape(-1)
        if q.shape != qd.shape:
            raise ModelError("q and qdot must have equal length")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    @classmethod
    def zeros(cls, tree: KinematicTree) -> SystemState:
        n = tree.dof_count
        return cls(np.zeros(n), np.zeros(n))

    def check(self, tree: KinematicTree) -> None:
        if self.q.shape[0] != tree.dof_count:
            raise ModelError(f"state has {self.q.shape[0]} coordinates, tree has {tree.dof_count}")


@dataclass(frozen=True)
class Anthropometrics:
    """Segment dimensions [m] and masses [kg] of a wearer."""

    label: str = "p50"
    thigh_length: float = 0.43
    shank_length: float = 0.4317
    foot_length: float = 0.2668
    pelvis_width: float = 0.1755
    ankle_height: float = 0.0684
    thigh_mass: float = 7.8
    shank_mass: float = 3.627
    foot_mass: float = 1.131
    pelvis_mass: float = 11.076
    stature: float | None = None
    body_mass: float | None = None

    def __post_init__(self):
        for name in (
            "thigh_length", "shank_length", "foot_length", "pelvis_width", "ankle_height",
            "thigh_mass", "shank_mass", "foot_mass", "pelvis_mass",
        ):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0.0):
                raise ModelError(f"anthropometrics {self.label}: {name} must be positive, got {val}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ExoLayout:
    """Builder knobs the device datasheet does not pin down.

    Attachment points are given relative to the wearer's joint centres in
    the home pose; ``misalignment`` offsets each exoskeleton joint axis from
    the matching anatomical joint centre (x anterior, z up; mirrored in y
    for the left leg).
    """

    mass_fractions: dict | None = None
    link_section: float = 0.06
    harness_epsilon: float = 1e-4
    thigh_cuff_fraction: float = 0.5
    shank_cuff_fraction: float = 0.5
    thigh_cuff_lateral: float = 0.08
    shank_cuff_lateral: float = 0.05
    foot_cuff: tuple = (0.3, 0.0, -0.3)  # (x / foot length, y [m], z / ankle height)
    sacrum_offset: tuple = (-0.10, 0.0, 0.05)
    misalignment: dict = field(
        default_factory=lambda: {"ankle": (0.0, 0.0, 0.0), "knee": (0.02, 0.0, 0.01), "hip": (0.0, 0.0, 0.02)}
    )
    harness_travel: float = 0.25

    @classmethod
    def from_dict(cls, data: dict | None) -> ExoLayout:
        data = dict(data or {})
        for key in ("foot_cuff", "sacrum_offset"):
            if key in data:
                data[key] = tuple(data[key])
        if "misalignment" in data:
            data["misalignment"] = {k: tuple(v) for k, v in data["misalignment"].items()}
        return cls(**data)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["misalignment"] = {k: list(v) for k, v in self.misalignment.items()}
        out["foot_cuff"] = list(self.foot_cuff)
        out["sacrum_offset"] = list(self.sacrum_offset)
        return out


def _side_sign(side: str) -> float:
    return -1.0 if side == "r" else 1.0


def anatomical_landmarks(anthro: Anthropometrics, layout: ExoLayout | None = None) -> dict:
    """Home-pose world positions of the wearer's joint centres and cuff points."""
    layout = layout or ExoLayout()
    a = anthro
    pts = {}
    for side in "rl":
        y = _side_sign(side) * a.pelvis_width / 2.0
        pts[f"ankle_{side}"] = np.array([0.0, y, a.ankle_height])
        pts[f"knee_{side}"] = np.array([0.0, y, a.ankle_height + a.shank_length])
        pts[f"hip_{side}"] = np.array([0.0, y, a.ankle_height + a.shank_length + a.thigh_length])
        lat = _side_sign(side)
        pts[f"cuff_thigh_{side}"] = pts[f"hip_{side}"] + np.array(
            [0.0, lat * layout.thigh_cuff_lateral, -layout.thigh_cuff_fraction * a.thigh_length]
        )
        pts[f"cuff_shank_{side}"] = pts[f"knee_{side}"] + np.array(
            [0.0, lat * layout.shank_cuff_lateral, -layout.shank_cuff_fraction * a.shank_length]
        )
        fx, fy, fz = layout.foot_cuff
        pts[f"cuff_foot_{side}"] = pts[f"ankle_{side}"] + np.array(
            [fx * a.foot_length, lat * fy, fz * a.ankle_height]
        )
    mid = 0.5 * (pts["hip_r"] + pts["hip_l"])
    pts["cuff_pelvis"] = mid + np.asarray(layout.sacrum_offset, dtype=float)
    return pts


def _rod(mass: float, length: float, section: float, along: str, com) -> SpatialInertia:
    size = [section, section, section]
    size["xyz".index(along)] = length
    return SpatialInertia.box(mass, size, com)


def default_mass_fractions(anthro: Anthropometrics) -> dict:
    lengths = {
        "foot_r": anthro.foot_length,
        "shank_r": anthro.shank_length,
        "thigh_r": anthro.thigh_length,
        "pelvis": anthro.pelvis_width,
        "thigh_l": anthro.thigh_length,
        "shank_l": anthro.shank_length,
        "foot_l": anthro.foot_length,
    }
    total = sum(lengths.values())
    return {k: v / total for k, v in lengths.items()}


def build_exoskeleton(
    anthro: Anthropometrics | None = None,
    total_mass: float = 19.0,
    layout: ExoLayout | dict | None = None,
) -> KinematicTree:
    """42-DoF exoskeleton tree (6 sagittal leg joints plus six 6-DoF harnesses)."""
    anthro = anthro or Anthropometrics()
    if not isinstance(anthro, Anthropometrics):
        raise ModelError("anthropometrics required")
    if not total_mass > 0.0:
        raise ModelError("total mass must be positive")
    if not isinstance(layout, ExoLayout):
        layout = ExoLayout.from_dict(layout)
    eps = layout.harness_epsilon
    if not eps > 0.0:
        raise ModelError("harness regularization inertia must be positive")

    human = anatomical_landmarks(anthro, layout)
    mis = layout.misalignment
    joints_home = {}
    for side in "rl":
        for jn in ("ankle", "knee", "hip"):
            off = np.array(mis.get(jn, (0.0, 0.0, 0.0)), dtype=float)
            off[1] *= -_side_sign(side)  # positive y offset means lateral
            joints_home[f"{jn}_{side}"] = human[f"{jn}_{side}"] + off

    fractions = layout.mass_fractions or default_mass_fractions(anthro)
    fsum = sum(fractions.values())
    masses = {k: total_mass * v / fsum for k, v in fractions.items()}
    harness_parent = {
        "foot_r": "foot_r", "shank_r": "shank_r", "thigh_r": "thigh_r",
        "thigh_l": "thigh_l", "shank_l": "shank_l", "foot_l": "foot_l",
    }
    # harness regularization bodies are folded out of their parent link
    for link in harness_parent.values():
        masses[link] -= 6 * eps
        if masses[link] <= 0.0:
            raise ModelError(f"link {link} mass exhausted by harness regularization")

    sec = layout.link_section
    origin = {
        "foot_r": joints_home["ankle_r"],
        "shank_r": joints_home["ankle_r"],
        "thigh_r": joints_home["knee_r"],
        "pelvis": joints_home["hip_r"],
        "thigh_l": joints_home["hip_l"],
        "shank_l": joints_home["knee_l"],
        "foot_l": joints_home["ankle_l"],
    }
    L_shank_r = joints_home["knee_r"][2] - joints_home["ankle_r"][2]
    L_thigh_r = joints_home["hip_r"][2] - joints_home["knee_r"][2]
    L_thigh_l = joints_home["hip_l"][2] - joints_home["knee_l"][2]
    L_shank_l = joints_home["knee_l"][2] - joints_home["ankle_l"][2]
    width = joints_home["hip_l"][1] - joints_home["hip_r"][1]
    foot_com = np.array([0.5 * anthro.foot_length - 0.25 * anthro.foot_length, 0.0, -0.5 * anthro.ankle_height])
    inertias = {
        "foot_r": _rod(masses["foot_r"], anthro.foot_length, sec, "x", foot_com),
        "shank_r": _rod(masses["shank_r"], L_shank_r, sec, "z", [0.0, 0.0, 0.5 * L_shank_r]),
        "thigh_r": _rod(masses["thigh_r"], L_thigh_r, sec, "z", [0.0, 0.0, 0.5 * L_thigh_r]),
        "pelvis": _rod(masses["pelvis"], width, sec, "y", [0.0, 0.5 * width, 0.0]),
        "thigh_l": _rod(masses["thigh_l"], L_thigh_l, sec, "z", [0.0, 0.0, -0.5 * L_thigh_l]),
        "shank_l": _rod(masses["shank_l"], L_shank_l, sec, "z", [0.0, 0.0, -0.5 * L_shank_l]),
        "foot_l": _rod(masses["foot_l"], anthro.foot_length, sec, "x", foot_com),
    }

    def local(link, world_pt):
        return np.asarray(world_pt, dtype=float) - origin[link]

    base = BodySpec("foot_r", inertias["foot_r"], {"harness_base": local("foot_r", human["cuff_foot_r"])})
    bodies, joints, parent = [], [], []
    index = {"foot_r": -1}
    y = np.array(_AXES["y"])
    leg_limits = {"ankle": (-0.8, 0.8), "knee": (-2.4, 2.4), "hip": (-1.6, 1.6)}
    chain = [
        ("ankle_r", "shank_r", "foot_r"),
        ("knee_r", "thigh_r", "shank_r"),
        ("hip_r", "pelvis", "thigh_r"),
        ("hip_l", "thigh_l", "pelvis"),
        ("knee_l", "shank_l", "thigh_l"),
        ("ankle_l", "foot_l", "shank_l"),
    ]
    for jname, child, par in chain:
        lo, hi = leg_limits[jname.split("_")[0]]
        attach = Transform.from_translation(joints_home[jname] - origin[par])
        joints.append(JointSpec(jname, "revolute", y, attach, lo, hi))
        pts = {}
        if child in harness_parent:
            pts["harness_base"] = local(child, human[f"cuff_{child}"])
        if child == "pelvis":
            pts["cuff"] = local("pelvis", human["cuff_pelvis"])
        bodies.append(BodySpec(child, inertias[child], pts))
        parent.append(index[par])
        index[child] = len(bodies) - 1

    harness_inertia = SpatialInertia(eps, np.zeros(3), eps * np.eye(3))
    travel = layout.harness_travel
    for iface in ("foot_r", "shank_r", "thigh_r", "thigh_l", "shank_l", "foot_l"):
        link = harness_parent[iface]
        par = index[link]
        for k, dof in enumerate(HARNESS_DOFS):
            kind = "prismatic" if dof[0] == "p" else "revolute"
            if k == 0:
                attach = Transform.from_translation(local(link, human[f"cuff_{iface}"]))
            else:
                attach = Transform()
            lim = travel if kind == "prismatic" else np.pi
            joints.append(JointSpec(f"harness_{iface}_{dof}", kind, _AXES[dof[1]], attach, -lim, lim))
            pts = {"cuff": np.zeros(3)} if k == 5 else {}
            bodies.append(BodySpec(f"harness_{iface}_{dof}", harness_inertia, pts))
            parent.append(par)
            par = len(bodies) - 1
    interfaces = {iface: (f"harness_{iface}_rz", "cuff") for iface in INTERFACES}
    interfaces[PELVIS] = ("pelvis", "cuff")
    tree = KinematicTree(
        name="exoskeleton",
        base=base,
        bodies=tuple(bodies),
        joints=tuple(joints),
        parent=tuple(parent),
        base_pose=Transform.from_translation(origin["foot_r"]),
        interfaces=interfaces,
        metadata={
            "anthropometrics": anthro.to_dict(),
            "total_mass": float(total_mass),
            "layout": layout.to_dict(),
        },
    )
    return tree


def harness_dof_indices(tree: KinematicTree, iface: str) -> list:
    return [tree.dof_index[f"harness_{iface}_{dof}"] for dof in HARNESS_DOFS]


def leg_dof_indices(tree: KinematicTree) -> list:
    return [tree.dof_index[j] for j in LEG_JOINTS]


# -- kinematics -----------------------------------------------------------


@dataclass(frozen=True)
class Kinematics:
    """World poses and twists of bodies and named points.

    A twist here is ``(omega, v)`` in world coordinates, where ``v`` is the
    velocity of the frame origin (or of the point) itself.
    """

    poses: dict
    twists: dict
    point_poses: dict
    point_twists: dict


def _kernel_fk(tree: KinematicTree, q, qd):
    arr = tree.arrays
    n = tree.dof_count
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    S = np.empty((n, 6))
    V = np.empty((n, 6))
    K.forward_kinematics(*arr.kin, np.asarray(q, float), np.asarray(qd, float), R, p, S, V)
    return R, p, S, V


def _body_frame(tree, R, p, V, idx):
    if idx < 0:
        return tree.arrays.base_R, tree.arrays.base_p, np.zeros(6)
    return R[idx], p[idx], V[idx]


def forward_kinematics(tree: KinematicTree, state: SystemState) -> Kinematics:
    state.check(tree)
    R, p, S, V = _kernel_fk(tree, state.q, state.qdot)
    poses, twists, ppose, ptwist = {}, {}, {}, {}
    for body in (tree.base, *tree.bodies):
        idx = tree.body_index[body.name]
        Rb, pb, Vb = _body_frame(tree, R, p, V, idx)
        w = Vb[:3]
        poses[body.name] = Transform(Rotation.from_matrix(Rb), pb)
        twists[body.name] = SpatialMotion(w, Vb[3:] + np.cross(w, pb))
        for pname, pt in body.points.items():
            pw = Rb @ pt + pb
            ppose[(body.name, pname)] = Transform(Rotation.from_matrix(Rb), pw)
            ptwist[(body.name, pname)] = SpatialMotion(w, Vb[3:] + np.cross(w, pw))
    return Kinematics(poses, twists, ppose, ptwist)


def point_pose(tree: KinematicTree, q, body: str, point) -> Transform:
    pt = tree.body_point(body, point)
    R, p, _, _ = _kernel_fk(tree, q, np.zeros(tree.dof_count))
    Rb, pb, _ = _body_frame(tree, R, p, np.zeros((tree.dof_count, 6)), tree.body_index[body])
    return Transform(Rotation.from_matrix(Rb), Rb @ pt + pb)


def point_twist(tree: KinematicTree, q, qd, body: str, point) -> SpatialMotion:
    pt = tree.body_point(body, point)
    R, p, _, V = _kernel_fk(tree, q, qd)
    Rb, pb, Vb = _body_frame(tree, R, p, V, tree.body_index[body])
    pw = Rb @ pt + pb
    return SpatialMotion(Vb[:3], Vb[3:] + np.cross(Vb[:3], pw))


def point_jacobian(tree: KinematicTree, q, body: str, point, frame: str = "world") -> np.ndarray:
    """6xn Jacobian mapping qdot to ``[omega; v_point]``.

    ``frame="world"`` expresses both rows in world axes; ``frame="local"``
    rotates them into the body frame at the point.
    """
    if body not in tree.body_index:
        raise KeyError(f"unknown body {body!r}")
    pt = tree.body_point(body, point)
    R, p, S, _ = _kernel_fk(tree, q, np.zeros(tree.dof_count))
    idx = tree.body_index[body]
    Rb, pb, _ = _body_frame(tree, R, p, np.zeros((tree.dof_count, 6)), idx)
    J = np.zeros((6, tree.dof_count))
    if idx >= 0:
        K.point_jacobian(tree.arrays.parent, S, idx, Rb @ pt + pb, J)
    if frame == "local":
        J[:3] = Rb.T @ J[:3]
        J[3:] = Rb.T @ J[3:]
    elif frame != "world":
        raise ValueError(f"unknown frame {frame!r}")
    return J


# -- model description file --------------------------------------------------


def _transform_to_json(T: Transform) -> dict:
    return {"quaternion": [float(x) for x in T.rotation.quat], "translation": [float(x) for x in T.translation]}


def _transform_from_json(d: dict) -> Transform:
    return Transform(Rotation(np.array(d["quaternion"], float)), np.array(d["translation"], float))


def _body_to_json(b: BodySpec) -> dict:
    return {
        "name": b.name,
        "mass": b.inertia.mass,
        "com": b.inertia.com.tolist(),
        "inertia": b.inertia.inertia.tolist(),
        "points": {k: v.tolist() for k, v in b.points.items()},
    }


def _body_from_json(d: dict) -> BodySpec:
    return BodySpec(d["name"], SpatialInertia(d["mass"], d["com"], d["inertia"]), d.get("points", {}))


def tree_to_dict(tree: KinematicTree) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "name": tree.name,
        "base": _body_to_json(tree.base),
        "base_pose": _transform_to_json(tree.base_pose),
        "bodies": [_body_to_json(b) for b in tree.bodies],
        "joints": [
            {
                "name": j.name,
                "kind": j.kind,
                "axis": j.axis.tolist(),
                "parent_attachment": _transform_to_json(j.parent_attachment),
                "lower": float(j.lower),
                "upper": float(j.upper),
            }
            for j in tree.joints
        ],
        "parent": list(tree.parent),
        "interfaces": {k: list(v) for k, v in tree.interfaces.items()},
        "metadata": tree.metadata,
    }


def tree_from_dict(data: dict) -> KinematicTree:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format_version {version!r}")
    return KinematicTree(
        name=data["name"],
        base=_body_from_json(data["base"]),
        bodies=tuple(_body_from_json(b) for b in data["bodies"]),
        joints=tuple(
            JointSpec(j["name"], j["kind"], j["axis"], _transform_from_json(j["parent_attachment"]), j["lower"], j["upper"])
            for j in data["joints"]
        ),
        parent=tuple(data["parent"]),
        base_pose=_transform_from_json(data["base_pose"]),
        interfaces={k: tuple(v) for k, v in data.get("interfaces", {}).items()},
        metadata=data.get("metadata", {}),
    )


def save_model(tree: KinematicTree, path) -> None:
    Path(path).write_text(json.dumps(tree_to_dict(tree), indent=2, sort_keys=True))


def load_model(path) -> KinematicTree:
    """Load a model file: either a full tree or builder parameters.

    Builder files carry ``anthropometrics``, ``total_mass`` and an optional
    ``layout`` instead of explicit bodies and joints.
    """
    data = json.loads(Path(path).read_text())
    if "bodies" in data:
        return tree_from_dict(data)
    if data.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported model format_version {data.get('format_version')!r}")
    anthro = Anthropometrics(**data.get("anthropometrics", {}))
    return build_exoskeleton(anthro, data.get("total_mass", 19.0), data.get("layout"))
