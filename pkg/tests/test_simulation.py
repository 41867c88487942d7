import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from exoharness.dynamics import kinetic_energy, potential_energy
from exoharness.harness import ImpedanceParams, config_from_code
from exoharness.model import ALL_INTERFACES, ANATOMICAL_SIGNS, INTERFACES, LEG_JOINTS, point_jacobian
from exoharness.optimizer import OptimizationProblem
from exoharness.simulation import (
    DivergentTrace,
    EpisodeSpec,
    SimulationTrace,
    constraint_value,
    default_spec,
    distance_matrix,
    episode_metrics,
    prepare,
    run_episode,
    tracking_differences,
    wrench_rms,
)

ALL_LOCKED = {"thigh": (0,) * 6, "shank": (0,) * 6, "foot": (0,) * 6}


def fake_trace(n_steps=100, wrench=None, distance=None, divergent_at=None, discard=0.05):
    T = n_steps + 1 if divergent_at is None else divergent_at
    times = np.arange(T) * 1e-3
    return SimulationTrace(
        times=times,
        q=np.zeros((T, 42)),
        qdot=np.zeros((T, 42)),
        wrench=np.zeros((T, 7, 6)) if wrench is None else wrench[:T],
        distance=np.zeros((T, 7, 3)) if distance is None else distance[:T],
        tau=np.zeros((T, 42)),
        human_angles=np.zeros((T, 18)),
        at_pi=np.zeros((T, 7), bool),
        leg_dofs=tuple(range(6)),
        divergent=divergent_at is not None,
        truncation_time=None if divergent_at is None else float(times[-1]),
        discard=discard,
        n_steps=n_steps,
    )


def impedances_at(code, u):
    """Harness and impedances at unit-box coordinate ``u`` on every variable."""
    h = config_from_code(code)
    pr = OptimizationProblem.for_harness(h)
    return h, pr.impedances(pr.to_physical(np.full(pr.dim, u)))


# -- metrics on constructed traces ------------------------------------------------


@pytest.mark.parametrize("n_steps, start", [(100, 5), (101, 6), (20, 1), (19, 1)])
def test_retained_window_drops_the_first_five_percent(n_steps, start):
    assert fake_trace(n_steps).retained.start == start


def test_rms_of_constant_and_sinusoid():
    n = 400
    w = np.zeros((n + 1, 7, 6))
    w[:, 0, 3] = 2.5
    t = np.arange(n + 1)
    w[:, 1, 0] = 3.0 * np.sin(2 * np.pi * t / 19.0)
    tr = fake_trace(n, wrench=w, discard=0.0)
    rms = wrench_rms(tr)
    assert rms[0, 3] == pytest.approx(2.5, rel=1e-15)
    # 401 samples is not a whole number of periods; the sampled mean square is within 0.3 %
    assert rms[1, 0] == pytest.approx(3.0 / math.sqrt(2), rel=3e-3)
    assert np.count_nonzero(rms) == 2


def test_constraint_counts_component_instants():
    d = np.full((101, 7, 3), 0.05)
    d[10, 0, 2] = 0.10  # exactly at threshold counts
    d[50, 4, 0] = 0.20
    d[60, 5, 1] = 0.30
    d[2, 1, 1] = 0.50  # inside the discarded transient
    d[70, 6, 0] = 0.90  # pelvis is not constrained
    assert constraint_value(fake_trace(100, distance=d)) == 3


def test_zero_threshold_counts_everything():
    tr = fake_trace(100)
    retained = 101 - tr.retained.start
    assert constraint_value(tr, 0.0) == 18 * retained
    assert distance_matrix(tr).shape == (retained, 18)
    with pytest.raises(ValueError):
        constraint_value(tr, -0.1)


@given(st.floats(0, 0.3), st.floats(0, 0.3), st.integers(0, 2**32 - 1))
def test_constraint_is_monotone_in_threshold(a, b, seed):
    d = np.random.default_rng(seed).uniform(0, 0.3, (51, 7, 3))
    tr = fake_trace(50, distance=d)
    lo, hi = min(a, b), max(a, b)
    assert constraint_value(tr, lo) >= constraint_value(tr, hi)


def test_divergent_trace_counts_missing_samples():
    tr = fake_trace(100, divergent_at=41)
    assert constraint_value(tr, 0.1) == (101 - 41) * 18
    m = episode_metrics(tr)
    assert m.divergent and m.cost == math.inf and np.all(np.isnan(m.rms))
    with pytest.raises(DivergentTrace):
        wrench_rms(tr)


def test_tracking_reports_a_constant_offset():
    tr = fake_trace(60)
    q = tr.q.copy()
    human = np.zeros((61, 18))
    for k, _ in enumerate(LEG_JOINTS):
        q[:, k] = 0.1 * (k + 1) * np.linspace(0, 1, 61)
    tr = replace(tr, q=q, human_angles=human)
    stats = tracking_differences(tr)
    for k, j in enumerate(LEG_JOINTS):
        expect = ANATOMICAL_SIGNS[j] * 0.1 * (k + 1) * np.median(np.linspace(0, 1, 61)[tr.retained])
        assert stats[j].median == pytest.approx(expect)


# -- full episodes ----------------------------------------------------------------------


def test_episode_is_deterministic():
    h, imp = impedances_at("[3 3 2]", 0.5)
    spec = default_spec(h, imp, gamma=0.1, snr_db=30.0, noise_seed=4, perturb_seed=9)
    a, b = run_episode(spec), run_episode(spec)
    assert np.array_equal(a.q, b.q) and np.array_equal(a.wrench, b.wrench)
    assert spec.fingerprint() == default_spec(h, imp, gamma=0.1, snr_db=30.0, noise_seed=4, perturb_seed=9).fingerprint()
    assert spec.fingerprint() != default_spec(h, imp, gamma=0.1, snr_db=30.0, noise_seed=5, perturb_seed=9).fingerprint()


def test_zero_impedance_gives_zero_interface_wrenches():
    tr = run_episode(default_spec("[0 1 0]"))
    assert not tr.divergent
    rms = wrench_rms(tr)
    assert np.all(rms[: len(INTERFACES)] == 0.0)
    assert ALL_INTERFACES[-1] == "pelvis" and rms[-1].max() > 0.0  # the fixed pelvis coupling stays


def test_disconnected_shank_carries_nothing():
    h, imp = impedances_at("[2 6 1]", 0.5)
    tr = run_episode(default_spec(h, imp))
    rms = wrench_rms(tr)
    for f in ("shank_r", "shank_l"):
        assert np.all(rms[ALL_INTERFACES.index(f)] == 0.0)
    assert rms[ALL_INTERFACES.index("thigh_r")].max() > 0.0


def test_clamped_legs_make_wrenches_linear_in_gains():
    imp = ImpedanceParams.from_parts(100.0, 5e3, 5.0, 200.0)
    errors = []
    for k_lock in (1e7, 1e9):
        h = config_from_code((0, 0, 0), ALL_LOCKED, k_lock=k_lock)
        p = prepare(default_spec(h, imp, clamp=True, gravity=(0, 0, 0)))
        base = wrench_rms(p.run())[: len(INTERFACES)]
        double = wrench_rms(p.run({f: imp.scaled(2.0) for f in INTERFACES}))[: len(INTERFACES)]
        live = base > 0
        errors.append(np.abs(double[live] / base[live] - 2.0).max())
    # exact in the rigid-lock limit: the residual shrinks with the lock compliance
    assert errors[1] < 1e-4
    assert errors[1] < errors[0] / 30.0


def test_trace_files_roundtrip(tmp_path):
    h, imp = impedances_at("[0 1 0]", 0.4)
    tr = run_episode(default_spec(h, imp))
    tr.save(tmp_path / "t.npz")
    back = SimulationTrace.load(tmp_path / "t.npz")
    for name in ("times", "q", "qdot", "wrench", "distance", "tau", "human_angles", "at_pi"):
        assert np.array_equal(getattr(back, name), getattr(tr, name)), name
    assert back.n_steps == tr.n_steps and back.scheme == tr.scheme
    text = tr.to_csv(tmp_path / "t.csv")
    lines = text.splitlines()
    assert len(lines) == tr.times.shape[0] + 1
    assert lines[0].split(",")[0] == "time"
    assert len(lines[0].split(",")) == 1 + 84 + 42 + 21 + 18
    assert (tmp_path / "t.csv").read_text() == text


def test_explicit_integration_of_a_stiff_setting_diverges_cleanly():
    h, imp = impedances_at("[0 1 0]", 1.0)
    tr = run_episode(default_spec(h, imp, scheme="rk4", dt=2e-3))
    assert tr.divergent
    assert tr.times.shape[0] < tr.n_steps + 1
    assert constraint_value(tr) >= (tr.n_steps + 1 - tr.times.shape[0]) * 18
    # the automatic choice refuses RK4 here and stays bounded
    auto = run_episode(default_spec(h, imp, scheme="auto", dt=2e-3))
    assert auto.scheme == "semi_implicit" and not auto.divergent


def test_spec_validation():
    spec = default_spec()
    with pytest.raises(ValueError):
        replace(spec, dt=0.0)
    with pytest.raises(ValueError):
        replace(spec, scheme="euler")
    with pytest.raises(ValueError):
        replace(spec, impedances={"thigh_r": ImpedanceParams()})
    with pytest.raises(ValueError):
        replace(spec, discard=1.0)
    assert isinstance(spec, EpisodeSpec)


# -- energy bookkeeping ----------------------------------------------------------------


def energy_residual(spec: EpisodeSpec) -> tuple:
    """Work done on the exoskeleton against its change in energy.

    Power sources: interface wrenches on the attachment twists, joint
    actuation, and the lock spring-dampers. Gravity sits in the potential.
    """
    tr = run_episode(spec)
    tree = spec.tree
    lock = spec.harness.lock_params(tree)
    k, d, q0 = np.array(lock.k), np.array(lock.d), np.array(lock.q0)
    T = tr.times.shape[0]
    P = np.zeros((3, T))
    E = np.zeros(T)
    for i in range(T):
        q, qd = tr.q[i], tr.qdot[i]
        for f, iface in enumerate(ALL_INTERFACES):
            J = point_jacobian(tree, q, *tree.interfaces[iface], frame="local")
            P[0, i] += tr.wrench[i, f] @ (J @ qd)
        P[1, i] = tr.tau[i] @ qd
        P[2, i] = -(k * (q - q0) + d * qd) @ qd
        E[i] = kinetic_energy(tree, q, qd) + potential_energy(tree, q, np.asarray(spec.gravity))
    work = sum(trapezoid(p, tr.times) for p in P)
    scale = sum(trapezoid(np.abs(p), tr.times) for p in P)
    return abs(work - (E[-1] - E[0])) / scale


def test_energy_balance_closes_and_converges():
    h, imp = impedances_at("[0 1 0]", 0.5)
    coarse = energy_residual(default_spec(h, imp, dt=2e-4))
    fine = energy_residual(default_spec(h, imp, dt=1e-4))
    assert fine < 0.01
    # first-order scheme: halving the step roughly halves the residual
    assert 0.3 < fine / coarse < 0.7
