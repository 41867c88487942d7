"""One coupled human-exoskeleton episode and the metrics derived from it."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .dynamics import GRAVITY, make_policy, rk4_amplification
from .harness import HarnessConfig, ImpedanceParams, config_from_code, pelvis_impedance
from .human_reference import (
    CHANNELS,
    SAGITTAL,
    EpisodeWindow,
    GaitTrajectory,
    HumanModel,
    add_awgn,
    interface_states,
    perturb_initial,
    slice_episode,
)
from .model import (
    ALL_INTERFACES,
    ANATOMICAL_SIGNS,
    INTERFACES,
    LEG_JOINTS,
    KinematicTree,
    build_exoskeleton,
    harness_dof_indices,
)

SCHEMES = {"semi_implicit": K.SEMI_IMPLICIT, "rk4": K.RK4}
DEFAULT_DISTANCE_THRESHOLD = 0.10
WRENCH_COMPONENTS = ("tx", "ty", "tz", "fx", "fy", "fz")


class DivergentTrace(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    tree: KinematicTree
    human: HumanModel
    harness: HarnessConfig
    impedances: dict
    gait: GaitTrajectory
    pelvis: ImpedanceParams = field(default_factory=pelvis_impedance)
    policy: str = "gravity"
    dt: float = 1e-3
    window: EpisodeWindow = field(default_factory=EpisodeWindow)
    scheme: str = "semi_implicit"
    snr_db: float = math.inf
    gamma: float = 0.0
    noise_seed: int | None = 0
    perturb_seed: int | None = 0
    discard: float = 0.05
    gravity: tuple = tuple(GRAVITY)
    clamp: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if set(self.impedances) != set(INTERFACES):
            raise ValueError(f"impedances must cover exactly {INTERFACES}")
        if self.scheme not in (*SCHEMES, "auto"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0.0 <= self.discard < 1.0:
            raise ValueError("discard fraction must be in [0, 1)")

    def with_impedances(self, impedances: dict) -> EpisodeSpec:
        from dataclasses import replace

        return replace(self, impedances=impedances)

    def fingerprint(self) -> str:
        """Stable hash of everything that determines the trace."""
        h = hashlib.sha256()
        desc = {
            "tree": self.tree.metadata,
            "human": self.human.anthro.to_dict(),
            "layout": self.human.layout.to_dict(),
            "harness": self.harness.to_dict(),
            "impedances": {k: self.impedances[k].to_dict() for k in INTERFACES},
            "pelvis": self.pelvis.to_dict(),
            "policy": self.policy,
            "dt": self.dt,
            "window": self.window.to_dict(),
            "scheme": self.scheme,
            "snr_db": repr(self.snr_db),
            "gamma": self.gamma,
            "seeds": [self.noise_seed, self.perturb_seed],
            "discard": self.discard,
            "gravity": list(self.gravity),
            "clamp": self.clamp,
        }
        h.update(json.dumps(desc, sort_keys=True, default=repr).encode())
        h.update(self.gait.times.tobytes())
        h.update(self.gait.angles.tobytes())
        return h.hexdigest()


def default_spec(
    code="[0 1 0]",
    impedances: dict | None = None,
    anthro=None,
    layout=None,
    gait: GaitTrajectory | None = None,
    **kw,
) -> EpisodeSpec:
    from .human_reference import synthetic_gait
    from .model import Anthropometrics, ExoLayout

    anthro = anthro or Anthropometrics()
    layout = layout if isinstance(layout, ExoLayout) else ExoLayout.from_dict(layout)
    tree = build_exoskeleton(anthro, 19.0, layout)
    harness = code if isinstance(code, HarnessConfig) else config_from_code(code)
    if impedances is None:
        impedances = {f: ImpedanceParams() for f in INTERFACES}
    elif isinstance(impedances, ImpedanceParams):
        impedances = {f: impedances for f in INTERFACES}
    return EpisodeSpec(
        tree=tree,
        human=HumanModel(anthro, layout),
        harness=harness,
        impedances=impedances,
        gait=gait if gait is not None else synthetic_gait(),
        **kw,
    )


@dataclass(frozen=True)
class SimulationTrace:
    times: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    wrench: np.ndarray  # (T, 7, 6) on the exoskeleton, attachment frame, [torque; force]
    distance: np.ndarray  # (T, 7, 3)
    tau: np.ndarray  # (T, n) actuation
    human_angles: np.ndarray  # (T, 18) reference seen by the simulation
    at_pi: np.ndarray  # (T, 7)
    leg_dofs: tuple
    interfaces: tuple = ALL_INTERFACES
    divergent: bool = False
    truncation_time: float | None = None
    discard: float = 0.05
    scheme: str = "semi_implicit"
    n_steps: int = 0

    @property
    def retained(self) -> slice:
        """Samples kept for metrics once the startup transient is dropped."""
        start = int(math.ceil(self.discard * self.n_steps - 1e-9))
        return slice(start, self.times.shape[0])

    def exo_anatomical_angles(self) -> np.ndarray:
        signs = np.array([ANATOMICAL_SIGNS[j] for j in LEG_JOINTS])
        return self.q[:, list(self.leg_dofs)] * signs

    def human_sagittal_angles(self) -> np.ndarray:
        return self.human_angles[:, [CHANNELS.index(SAGITTAL[j]) for j in LEG_JOINTS]]

    def to_csv(self, path=None) -> str:
        """One row per step; column order documented by the header."""
        n = self.q.shape[1]
        header = ["time"]
        header += [f"q{i}" for i in range(n)] + [f"qd{i}" for i in range(n)]
        header += [f"w_{f}_{c}" for f in self.interfaces for c in WRENCH_COMPONENTS]
        header += [f"d_{f}_{c}" for f in self.interfaces for c in "xyz"]
        header += [f"human_{c}" for c in CHANNELS]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        T = self.times.shape[0]
        block = np.column_stack(
            [
                self.times,
                self.q,
                self.qdot,
                self.wrench.reshape(T, -1),
                self.distance.reshape(T, -1),
                self.human_angles,
            ]
        )
        for row in block:
            w.writerow([repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            times=self.times, q=self.q, qdot=self.qdot, wrench=self.wrench, distance=self.distance,
            tau=self.tau, human_angles=self.human_angles, at_pi=self.at_pi,
            leg_dofs=np.array(self.leg_dofs),
            meta=np.array(json.dumps({
                "divergent": self.divergent, "truncation_time": self.truncation_time,
                "discard": self.discard, "scheme": self.scheme, "n_steps": self.n_steps,
                "interfaces": list(self.interfaces),
            })),
        )

    @classmethod
    def load(cls, path) -> SimulationTrace:
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls(
                times=z["times"], q=z["q"], qdot=z["qdot"], wrench=z["wrench"], distance=z["distance"],
                tau=z["tau"], human_angles=z["human_angles"], at_pi=z["at_pi"],
                leg_dofs=tuple(int(i) for i in z["leg_dofs"]), interfaces=tuple(meta["interfaces"]),
                divergent=meta["divergent"], truncation_time=meta["truncation_time"],
                discard=meta["discard"], scheme=meta["scheme"], n_steps=meta["n_steps"],
            )


class PreparedEpisode:
    """Everything about an episode that does not depend on interface impedances."""

    def __init__(self, spec: EpisodeSpec):
        self.spec = spec
        tree = spec.tree
        n = tree.dof_count
        self.n = n
        episode = slice_episode(spec.gait, spec.window)
        episode = add_awgn(episode, spec.snr_db, spec.noise_seed)
        self.episode = episode
        dt = spec.dt
        n_steps = int(math.floor(episode.duration / dt + 1e-9))
        if n_steps < 1:
            raise ValueError("episode shorter than one time step")
        self.n_steps = n_steps
        half = np.linspace(0.0, n_steps * dt, 2 * n_steps + 1)
        st = interface_states(spec.human, episode, half)
        self.states = st
        self.times = half[::2]

        self.leg = [tree.dof_index[j] for j in LEG_JOINTS]
        signs = np.array([ANATOMICAL_SIGNS[j] for j in LEG_JOINTS])
        sag = [CHANNELS.index(SAGITTAL[j]) for j in LEG_JOINTS]
        leg_q = st.angles[:, sag] * signs
        leg_qd = st.rates[:, sag] * signs

        lock = spec.harness.lock_params(tree)
        self.klock = np.array(lock.k)
        self.dlock = np.array(lock.d)
        self.q0 = np.array(lock.q0)

        q_init = self.q0.copy()
        qd_init = np.zeros(n)
        q_init[self.leg] = perturb_initial(leg_q[0], spec.gamma, spec.perturb_seed)
        qd_init[self.leg] = leg_qd[0]
        self.q_init = q_init
        self.qd_init = qd_init

        presc = np.zeros(n, dtype=np.bool_)
        pq = np.zeros((2 * n_steps + 1, n))
        pqd = np.zeros((2 * n_steps + 1, n))
        pq[:] = self.q0
        for iface in INTERFACES:
            if not spec.harness.is_connected(iface):
                presc[harness_dof_indices(tree, iface)] = True
        if spec.clamp:
            presc[self.leg] = True
            pq[:, self.leg] = leg_q
            pqd[:, self.leg] = leg_qd
        self.presc = presc
        self.presc_q = pq
        self.presc_qd = pqd

        policy = make_policy(spec.policy, tree, gravity=np.asarray(spec.gravity, float))
        self.policy_code = policy.code
        self.act_mask = policy.mask.astype(np.bool_)

        self.iface_body = np.array([tree.body_index[tree.interfaces[f][0]] for f in ALL_INTERFACES], dtype=np.int64)
        self.iface_point = np.array([tree.body_point(*tree.interfaces[f]) for f in ALL_INTERFACES], dtype=float)
        self.connected = np.array([spec.harness.is_connected(f) for f in ALL_INTERFACES])

    def gains(self, impedances: dict):
        Km = np.zeros((len(ALL_INTERFACES), 6))
        Dm = np.zeros((len(ALL_INTERFACES), 6))
        for f, iface in enumerate(ALL_INTERFACES):
            par = self.spec.pelvis if iface == "pelvis" else impedances[iface]
            if self.connected[f]:
                Km[f] = par.K
                Dm[f] = par.D
        return Km, Dm

    def joint_impedance(self, impedances: dict) -> tuple:
        """Joint-space stiffness and damping at the initial state (interfaces plus locks)."""
        tree = self.spec.tree
        from .model import point_jacobian

        Km, Dm = self.gains(impedances)
        Kq = np.diag(self.klock).astype(float)
        Dq = np.diag(self.dlock).astype(float)
        for f, iface in enumerate(ALL_INTERFACES):
            body, point = tree.interfaces[iface]
            J = point_jacobian(tree, self.q_init, body, point, frame="local")
            Kq += J.T @ (Km[f][:, None] * J)
            Dq += J.T @ (Dm[f][:, None] * J)
        return Kq, Dq

    def stiffness_matrix(self, impedances: dict) -> np.ndarray:
        return self.joint_impedance(impedances)[0]

    def resolve_scheme(self, impedances: dict) -> str:
        if self.spec.scheme != "auto":
            return self.spec.scheme
        Kq, Dq = self.joint_impedance(impedances)
        growth = rk4_amplification(self.spec.tree, self.q_init, Kq, Dq, self.spec.dt)
        return "rk4" if growth <= 1.0 + 1e-9 else "semi_implicit"

    def run(self, impedances: dict | None = None) -> SimulationTrace:
        spec = self.spec
        impedances = spec.impedances if impedances is None else impedances
        arr = spec.tree.arrays
        Km, Dm = self.gains(impedances)
        scheme = self.resolve_scheme(impedances)
        N = self.n_steps
        n = self.n
        m = len(ALL_INTERFACES)
        q_hist = np.zeros((N + 1, n))
        qd_hist = np.zeros((N + 1, n))
        w_hist = np.zeros((N + 1, m, 6))
        d_hist = np.zeros((N + 1, m, 3))
        tau_hist = np.zeros((N + 1, n))
        pi_hist = np.zeros((N + 1, m), dtype=np.bool_)
        st = self.states
        count = K.run_episode(
            arr.parent, arr.jtype, arr.axis, arr.xrot, arr.xpos, arr.mass, arr.com, arr.icom,
            arr.base_R, arr.base_p, np.asarray(spec.gravity, float),
            self.iface_body, self.iface_point, Km, Dm,
            st.R, st.p, st.omega, st.v,
            self.klock, self.dlock, self.q0, self.act_mask, self.policy_code,
            self.presc, self.presc_q, self.presc_qd,
            self.q_init, self.qd_init, spec.dt, N, SCHEMES[scheme],
            q_hist, qd_hist, w_hist, d_hist, tau_hist, pi_hist,
        )
        divergent = count < N + 1
        sl = slice(0, count)
        return SimulationTrace(
            times=self.times[sl].copy(),
            q=q_hist[sl],
            qdot=qd_hist[sl],
            wrench=w_hist[sl],
            distance=d_hist[sl],
            tau=tau_hist[sl],
            human_angles=st.angles[::2][sl].copy(),
            at_pi=pi_hist[sl],
            leg_dofs=tuple(self.leg),
            divergent=bool(divergent),
            truncation_time=float(self.times[count - 1]) if divergent else None,
            discard=spec.discard,
            scheme=scheme,
            n_steps=N,
        )


def prepare(spec: EpisodeSpec) -> PreparedEpisode:
    return PreparedEpisode(spec)


def run_episode(spec: EpisodeSpec) -> SimulationTrace:
    return PreparedEpisode(spec).run()


# -- metrics ----------------------------------------------------------------------


def _require_ok(trace: SimulationTrace):
    if trace.divergent:
        raise DivergentTrace(f"trace diverged at t = {trace.truncation_time}")


def wrench_rms(trace: SimulationTrace, retained_only: bool = True) -> np.ndarray:
    """(7, 6) RMS of every wrench component; rows follow ``trace.interfaces``."""
    _require_ok(trace)
    w = trace.wrench[trace.retained] if retained_only else trace.wrench
    return np.sqrt(np.mean(w**2, axis=0))


@dataclass(frozen=True)
class TrackingStats:
    joint: str
    median: float
    q1: float
    q3: float
    minimum: float
    maximum: float
    mean: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def tracking_series(trace: SimulationTrace) -> np.ndarray:
    """(T, 6) exoskeleton minus human angle for the six sagittal joints [rad]."""
    return trace.exo_anatomical_angles() - trace.human_sagittal_angles()


def tracking_differences(trace: SimulationTrace) -> dict:
    _require_ok(trace)
    diff = tracking_series(trace)[trace.retained]
    out = {}
    for k, j in enumerate(LEG_JOINTS):
        d = diff[:, k]
        q1, med, q3 = np.percentile(d, [25, 50, 75])
        out[j] = TrackingStats(j, float(med), float(q1), float(q3), float(d.min()), float(d.max()), float(d.mean()))
    return out


def distance_matrix(trace: SimulationTrace) -> np.ndarray:
    """(T_retained, 18) translational distances of the six limb interfaces."""
    idx = [trace.interfaces.index(f) for f in INTERFACES]
    return trace.distance[trace.retained][:, idx, :].reshape(-1, 3 * len(INTERFACES))


def constraint_value(trace: SimulationTrace, d_th=DEFAULT_DISTANCE_THRESHOLD) -> int:
    """Number of (instant, component) pairs with ``distance - threshold >= 0``."""
    d = distance_matrix(trace)
    th = np.broadcast_to(np.asarray(d_th, dtype=float), (d.shape[1],))
    if np.any(th < 0):
        raise ValueError("thresholds must be >= 0")
    count = int(np.count_nonzero(d - th >= 0.0))
    if trace.divergent:
        # samples after the truncation are unknown; count them as violated
        count += (trace.n_steps + 1 - trace.times.shape[0]) * d.shape[1]
    return count


@dataclass(frozen=True)
class EpisodeMetrics:
    rms: np.ndarray
    tracking: dict
    constraint: int
    cost: float
    divergent: bool = False

    def to_dict(self) -> dict:
        return {
            "wrench_rms": {f: [float(x) for x in self.rms[i]] for i, f in enumerate(ALL_INTERFACES)},
            "tracking": {j: s.to_dict() for j, s in self.tracking.items()},
            "constraint": int(self.constraint),
            "cost": float(self.cost),
            "divergent": self.divergent,
        }


def episode_metrics(trace: SimulationTrace, weights=None, d_th=DEFAULT_DISTANCE_THRESHOLD) -> EpisodeMetrics:
    from .optimizer import cost

    if trace.divergent:
        nan = np.full((len(ALL_INTERFACES), 6), np.nan)
        return EpisodeMetrics(nan, {}, constraint_value(trace, d_th), math.inf, True)
    return EpisodeMetrics(
        wrench_rms(trace), tracking_differences(trace), constraint_value(trace, d_th), cost(trace, weights)
    )
