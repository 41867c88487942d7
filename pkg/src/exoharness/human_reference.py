"""The virtual wearer: an 18-DoF kinematic leg model driven by gait data.

Gait CSV schema
---------------
One header row, then one row per sample::

    time,hip_flex_r,hip_add_r,hip_rot_r,knee_flex_r,...,ankle_rot_l

``time`` is in seconds, every angle in radians. Each leg's channels are
normalized to that leg's own gait cycle (0 % at its own heel strike), the
usual convention for averaged gait curves. Positive directions: hip and
knee flexion, ankle dorsiflexion, adduction, internal rotation, and foot
inversion.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import _kernels as K
from .model import (
    ALL_INTERFACES,
    Anthropometrics,
    BodySpec,
    ExoLayout,
    JointSpec,
    KinematicTree,
    anatomical_landmarks,
)
from .spatial_algebra import SpatialInertia, SpatialMotion, Transform, Rotation

JOINTS = ("hip", "knee", "ankle")
AXES = {"hip": ("flex", "add", "rot"), "knee": ("flex", "add", "rot"), "ankle": ("dorsi", "inv", "rot")}
CHANNELS = tuple(f"{j}_{a}_{s}" for s in "rl" for j in JOINTS for a in AXES[j])
SAGITTAL = {f"{j}_{s}": f"{j}_{AXES[j][0]}_{s}" for s in "rl" for j in JOINTS}


class GaitError(ValueError):
    pass


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# -- trajectories ---------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeWindow:
    """Gait-cycle percentages kept for the stance (right) and swing (left) legs."""

    stance: tuple = (12.0, 50.0)
    swing: tuple = (62.0, 100.0)

    def __post_init__(self):
        for name in ("stance", "swing"):
            a, b = (float(x) for x in getattr(self, name))
            if not (0.0 <= a < b <= 100.0):
                raise GaitError(f"{name} window must satisfy 0 <= start < end <= 100, got [{a}, {b}]")
            object.__setattr__(self, name, (a, b))

    @classmethod
    def full(cls) -> EpisodeWindow:
        return cls((0.0, 100.0), (0.0, 100.0))

    @property
    def is_full(self) -> bool:
        return self.stance == (0.0, 100.0) and self.swing == (0.0, 100.0)

    def to_dict(self) -> dict:
        return {"stance": list(self.stance), "swing": list(self.swing)}


@dataclass(frozen=True)
class GaitTrajectory:
    times: np.ndarray
    angles: np.ndarray
    sample_rate: float
    channels: tuple = CHANNELS
    window: EpisodeWindow | None = None

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        a = np.array(self.angles, dtype=float)
        if a.ndim != 2 or a.shape != (t.shape[0], len(self.channels)):
            raise GaitError(f"angles must be ({t.shape[0]}, {len(self.channels)}), got {a.shape}")
        if tuple(self.channels) != CHANNELS:
            raise GaitError("channels must follow the canonical 18-channel order")
        if t.shape[0] < 2:
            raise GaitError("trajectory needs at least two samples")
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise GaitError(f"time must be strictly increasing (row {int(np.argmax(dt <= 0)) + 1})")
        if np.ptp(dt) > 1e-6 * dt.mean() + 1e-12:
            raise GaitError("time grid must be uniform")
        if not np.all(np.isfinite(a)):
            r, c = np.argwhere(~np.isfinite(a))[0]
            raise GaitError(f"non-finite angle at row {r}, channel {self.channels[c]}")
        if not self.sample_rate > 0:
            raise GaitError("sample rate must be positive")
        t.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def n_samples(self) -> int:
        return self.times.shape[0]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def period(self) -> float:
        """Cycle length for a full (half-open) cycle."""
        return self.n_samples / self.sample_rate

    def channel(self, name: str) -> np.ndarray:
        return self.angles[:, self.channels.index(name)]

    def velocities(self) -> np.ndarray:
        return np.gradient(self.angles, 1.0 / self.sample_rate, axis=0)

    def spline(self) -> CubicSpline:
        return CubicSpline(self.times, self.angles, axis=0)


def load_gait(path) -> GaitTrajectory:
    """Read the gait CSV; non-uniform sampling is linearly resampled."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"gait file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise GaitError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if "time" not in header:
        raise GaitError(f"{path}: missing 'time' column")
    missing = [c for c in CHANNELS if c not in header]
    if missing:
        raise GaitError(f"{path}: missing channels {missing}")
    cols = [header.index("time")] + [header.index(c) for c in CHANNELS]
    names = ["time", *CHANNELS]
    data = np.empty((len(rows) - 1, len(cols)))
    for r, row in enumerate(rows[1:]):
        for k, c in enumerate(cols):
            try:
                val = float(row[c])
            except (ValueError, IndexError):
                raise GaitError(f"{path}: unreadable value at data row {r + 1}, column {names[k]}") from None
            if not math.isfinite(val):
                raise GaitError(f"{path}: non-finite value at data row {r + 1}, column {names[k]}")
            data[r, k] = val
    if data.shape[0] < 2:
        raise GaitError(f"{path}: needs at least two samples")
    t = data[:, 0]
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise GaitError(f"{path}: time not strictly increasing at data row {int(np.argmax(dt <= 0)) + 2}")
    step = float(np.median(dt))
    angles = data[:, 1:]
    if np.ptp(dt) > 1e-6 * step:
        n = int(round((t[-1] - t[0]) / step)) + 1
        tu = t[0] + step * np.arange(n)
        angles = np.column_stack([np.interp(tu, t, angles[:, k]) for k in range(angles.shape[1])])
        t = tu
    return GaitTrajectory(t, angles, 1.0 / step)


def save_gait(traj: GaitTrajectory, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", *traj.channels])
    for t, row in zip(traj.times, traj.angles):
        w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
    Path(path).write_text(buf.getvalue())


# -- synthetic gait -----------------------------------------------------------


def _bump(phi, mu, kappa):
    """Periodic bell (von Mises shape) with unit peak at ``mu``."""
    return np.exp(kappa * (np.cos(2 * np.pi * (phi - mu)) - 1.0))


def _cos(phi, mu):
    return np.cos(2 * np.pi * (phi - mu))


# each entry: phase -> degrees, for one leg at its own cycle phase
GAIT_SHAPES = {
    "hip_flex": lambda f: 10.0 + 20.0 * _cos(f, 0.92),
    "hip_add": lambda f: 3.0 * _cos(f, 0.20),
    "hip_rot": lambda f: 3.0 * _cos(f, 0.05),
    "knee_flex": lambda f: 2.0 + 16.0 * _bump(f, 0.15, 20.0) + 60.0 * _bump(f, 0.72, 12.0),
    "knee_add": lambda f: 3.0 * _bump(f, 0.72, 12.0),
    "knee_rot": lambda f: 4.0 * _bump(f, 0.70, 6.0) - 1.0,
    "ankle_dorsi": lambda f: 10.0 * _bump(f, 0.42, 8.0) - 17.0 * _bump(f, 0.63, 30.0),
    "ankle_inv": lambda f: 4.0 * _cos(f, 0.60),
    "ankle_rot": lambda f: 3.0 * _cos(f, 0.40),
}


def cycle_period(cadence: float) -> float:
    """Stride period [s] for a cadence in steps per minute."""
    return 120.0 / cadence


def synthetic_gait(
    cadence: float = 110.0,
    amplitude_profile=1.0,
    sample_rate: float = 240.0,
    seed=None,
    variability: float = 0.05,
) -> GaitTrajectory:
    """One stride of smooth, sagittal-dominant gait, each leg on its own cycle.

    ``amplitude_profile`` scales all channels (a float) or selected joint
    axes (a dict such as ``{"knee_flex": 0.5}``). With a seed, every channel
    gets a reproducible gain and phase jitter of relative size
    ``variability``; without one the nominal closed-form curves are used.
    """
    if not cadence > 0:
        raise GaitError("cadence must be positive")
    T = cycle_period(cadence)
    n = int(round(sample_rate * T))
    times = np.arange(n) / sample_rate
    phi = times / T
    rng = None if seed is None else _as_rng(seed)
    cols = []
    for ch in CHANNELS:
        key = ch.rsplit("_", 1)[0]
        if isinstance(amplitude_profile, dict):
            amp = float(amplitude_profile.get(key, 1.0))
        else:
            amp = float(amplitude_profile)
        gain, shift = 1.0, 0.0
        if rng is not None:
            gain = 1.0 + variability * rng.uniform(-1, 1)
            shift = 0.1 * variability * rng.uniform(-1, 1)
        cols.append(amp * gain * np.radians(GAIT_SHAPES[key]((phi - shift) % 1.0)))
    return GaitTrajectory(times, np.column_stack(cols), sample_rate)


# -- windowing ------------------------------------------------------------------


def _periodic_sample(x: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Linear interpolation at fractional sample positions of a periodic signal."""
    n = x.shape[0]
    i0 = np.floor(pos).astype(int)
    frac = (pos - i0)[:, None]
    a = x[i0 % n]
    b = x[(i0 + 1) % n]
    out = a + frac * (b - a)
    exact = frac[:, 0] < 1e-9
    out[exact] = a[exact]
    return out


def slice_episode(traj: GaitTrajectory, window: EpisodeWindow | None = None) -> GaitTrajectory:
    """Cut the stance (right) and swing (left) channels and put them on one clock.

    The input is one full cycle, sampled half-open. Window ends are
    inclusive, except that a full [0, 100] window keeps the cycle as is.
    Re-slicing an episode with the window it was cut with returns it
    unchanged.
    """
    window = window or EpisodeWindow()
    if traj.window is not None:
        if traj.window == window:
            return traj
        raise GaitError(f"trajectory was already sliced with {traj.window}")
    if window.is_full:
        return replace(traj, window=window)
    n = traj.n_samples
    a, b = window.stance
    m = int(round((b - a) / 100.0 * n)) + 1
    if m < 2:
        raise GaitError("window shorter than two samples")
    right = [i for i, c in enumerate(CHANNELS) if c.endswith("_r")]
    left = [i for i, c in enumerate(CHANNELS) if c.endswith("_l")]
    out = np.empty((m, len(CHANNELS)))
    pos_st = np.linspace(a / 100.0 * n, b / 100.0 * n, m)
    sa, sb = window.swing
    pos_sw = np.linspace(sa / 100.0 * n, sb / 100.0 * n, m)
    out[:, right] = _periodic_sample(traj.angles[:, right], pos_st)
    out[:, left] = _periodic_sample(traj.angles[:, left], pos_sw)
    duration = (b - a) / 100.0 * traj.period
    rate = (m - 1) / duration
    return GaitTrajectory(np.arange(m) / rate, out, rate, window=window)


# -- noise and perturbation ---------------------------------------------------


def add_awgn(traj: GaitTrajectory, snr_db: float, seed=None) -> GaitTrajectory:
    """White Gaussian noise per channel at the channel's measured power / SNR."""
    if snr_db is None or snr_db == math.inf:
        return traj
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    rng = _as_rng(seed)
    power = np.mean(traj.angles**2, axis=0)
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = rng.standard_normal(traj.angles.shape) * sigma
    return replace(traj, angles=traj.angles + noise)


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    noise = noisy - clean
    return 10.0 * np.log10(np.mean(clean**2, axis=0) / np.mean(noise**2, axis=0))


def perturb_initial(q0, gamma: float, seed=None, indices=None) -> np.ndarray:
    """Offset coordinates by uniform draws in [-gamma, gamma]."""
    if not gamma >= 0:
        raise ValueError("gamma must be >= 0")
    q = np.array(q0, dtype=float)
    idx = np.arange(q.shape[0]) if indices is None else np.asarray(indices, dtype=int)
    if gamma == 0:
        return q
    rng = _as_rng(seed)
    q[idx] += rng.uniform(-gamma, gamma, size=idx.shape[0])
    return q


# -- anthropometric tables -----------------------------------------------------


def percentile_table() -> dict:
    data = json.loads(resources.files("exoharness").joinpath("data/anthropometrics.json").read_text())
    return data["percentiles"]


def anthropometrics_for(percentile: str) -> Anthropometrics:
    key = percentile if percentile.startswith("p") else f"p{percentile}"
    table = percentile_table()
    if key not in table:
        raise KeyError(f"unknown percentile {percentile!r}; available {sorted(table)}")
    return Anthropometrics(**table[key])


def load_anthropometrics(path) -> Anthropometrics:
    data = json.loads(Path(path).read_text())
    return Anthropometrics(**data)


# -- human kinematic model ------------------------------------------------------

_FLEX_SIGN = {"hip": -1.0, "knee": 1.0, "ankle": -1.0}
_SEGMENT_FRAME = {
    "foot_r": "ankle_r",
    "shank_r": "ankle_r",
    "thigh_r": "knee_r",
    "pelvis": "hip_r",
    "thigh_l": "hip_l",
    "shank_l": "knee_l",
    "foot_l": "ankle_l",
}
# (joint, child segment, parent segment, inverted)
_CHAIN = (
    ("ankle_r", "shank_r", "foot_r", True),
    ("knee_r", "thigh_r", "shank_r", True),
    ("hip_r", "pelvis", "thigh_r", True),
    ("hip_l", "thigh_l", "pelvis", False),
    ("knee_l", "shank_l", "thigh_l", False),
    ("ankle_l", "foot_l", "shank_l", False),
)


@dataclass(frozen=True)
class HumanModel:
    anthro: Anthropometrics = field(default_factory=Anthropometrics)
    layout: ExoLayout = field(default_factory=ExoLayout)

    @cached_property
    def landmarks(self) -> dict:
        return anatomical_landmarks(self.anthro, self.layout)

    @property
    def attachment_points(self) -> dict:
        """Cuff points in each segment's body frame."""
        lm = self.landmarks
        out = {}
        for iface in ALL_INTERFACES:
            seg = iface
            out[iface] = lm[f"cuff_{iface}"] - lm[_SEGMENT_FRAME[seg]]
        return out

    @cached_property
    def tree(self) -> KinematicTree:
        a = self.anthro
        lm = self.landmarks
        pts = self.attachment_points
        seg_mass = {"foot": a.foot_mass, "shank": a.shank_mass, "thigh": a.thigh_mass, "pelvis": a.pelvis_mass}
        tiny = SpatialInertia.point_mass(1e-6)
        base = BodySpec("foot_r", SpatialInertia.point_mass(a.foot_mass), {"cuff": pts["foot_r"]})
        bodies, joints, parent, coef, chan = [], [], [], [], []
        index = {"foot_r": -1}
        for jname, child, par, inverted in _CHAIN:
            jtype, side = jname.split("_")
            axes = ("z", "x", "y") if inverted else ("y", "x", "z")
            sign_s = 1.0 if side == "r" else -1.0
            gains = {"y": _FLEX_SIGN[jtype], "x": sign_s, "z": sign_s}
            names = {"y": AXES[jtype][0], "x": AXES[jtype][1], "z": AXES[jtype][2]}
            pa = index[par]
            offset = lm[jname] - lm[_SEGMENT_FRAME[par]]
            for k, ax in enumerate(axes):
                attach = Transform.from_translation(offset if k == 0 else np.zeros(3))
                axis = {"x": (1.0, 0, 0), "y": (0, 1.0, 0), "z": (0, 0, 1.0)}[ax]
                joints.append(JointSpec(f"{jname}_{ax}", "revolute", axis, attach, -math.pi, math.pi))
                last = k == 2
                if last:
                    inertia = SpatialInertia.point_mass(seg_mass[child.split("_")[0]])
                    bodies.append(BodySpec(child, inertia, {"cuff": pts[child]}))
                else:
                    bodies.append(BodySpec(f"{child}@{ax}", tiny))
                parent.append(pa)
                pa = len(bodies) - 1
                coef.append(-gains[ax] if inverted else gains[ax])
                chan.append(CHANNELS.index(f"{jtype}_{names[ax]}_{side}"))
            index[child] = len(bodies) - 1
        tree = KinematicTree(
            name="human",
            base=base,
            bodies=tuple(bodies),
            joints=tuple(joints),
            parent=tuple(parent),
            base_pose=Transform.from_translation(lm["ankle_r"]),
            interfaces={iface: (iface, "cuff") for iface in ALL_INTERFACES},
            metadata={"anthropometrics": self.anthro.to_dict(), "coef": coef, "channel": chan},
        )
        return tree

    def tree_coordinates(self, angles) -> np.ndarray:
        """Map anatomical channels (..., 18) to tree coordinates (..., 18)."""
        md = self.tree.metadata
        angles = np.asarray(angles, dtype=float)
        return angles[..., md["channel"]] * np.asarray(md["coef"])


@dataclass(frozen=True)
class InterfaceStates:
    """Human cuff states sampled on a time grid, interfaces in canonical order."""

    times: np.ndarray
    R: np.ndarray  # (T, 7, 3, 3)
    p: np.ndarray  # (T, 7, 3)
    omega: np.ndarray  # (T, 7, 3)
    v: np.ndarray  # (T, 7, 3)
    angles: np.ndarray  # (T, 18)
    rates: np.ndarray  # (T, 18)


def interface_states(model: HumanModel, traj: GaitTrajectory, times) -> InterfaceStates:
    """Vectorized cuff poses and twists at ``times`` from the spline of ``traj``."""
    times = np.asarray(times, dtype=float).reshape(-1)
    lo, hi = traj.times[0], traj.times[-1]
    tol = 1e-9 * max(1.0, abs(hi))
    if np.any(times < lo - tol) or np.any(times > hi + tol):
        raise ValueError(f"time outside trajectory span [{lo}, {hi}]")
    times = np.clip(times, lo, hi)
    sp = traj.spline()
    ang = sp(times)
    rate = sp(times, 1)
    tree = model.tree
    q = np.ascontiguousarray(model.tree_coordinates(ang))
    qd = np.ascontiguousarray(model.tree_coordinates(rate))
    T, n = q.shape
    R = np.empty((T, n, 3, 3))
    p = np.empty((T, n, 3))
    V = np.empty((T, n, 6))
    K.batch_fk(*tree.arrays.kin, q, qd, R, p, V)
    m = len(ALL_INTERFACES)
    hR = np.empty((T, m, 3, 3))
    hp = np.empty((T, m, 3))
    hw = np.empty((T, m, 3))
    hv = np.empty((T, m, 3))
    arr = tree.arrays
    for f, iface in enumerate(ALL_INTERFACES):
        body, point = tree.interfaces[iface]
        idx = tree.body_index[body]
        pt = tree.body_point(body, point)
        if idx < 0:
            hR[:, f] = arr.base_R
            hp[:, f] = arr.base_R @ pt + arr.base_p
            hw[:, f] = 0.0
            hv[:, f] = 0.0
        else:
            hR[:, f] = R[:, idx]
            hp[:, f] = np.einsum("tij,j->ti", R[:, idx], pt) + p[:, idx]
            hw[:, f] = V[:, idx, :3]
            hv[:, f] = V[:, idx, 3:] + np.cross(V[:, idx, :3], hp[:, f])
    return InterfaceStates(times, hR, hp, hw, hv, ang, rate)


def human_attachment_states(model: HumanModel, traj: GaitTrajectory, t: float) -> dict:
    """Pose and twist (world angular velocity, point velocity) of every cuff at ``t``."""
    st = interface_states(model, traj, [t])
    out = {}
    for f, iface in enumerate(ALL_INTERFACES):
        pose = Transform(Rotation.from_matrix(st.R[0, f]), st.p[0, f])
        out[iface] = (pose, SpatialMotion(st.omega[0, f], st.v[0, f]))
    return out
