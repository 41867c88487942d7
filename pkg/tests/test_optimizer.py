import json
import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import QuadraticSurrogate
from test_simulation import fake_trace

from exoharness.harness import config_from_code
from exoharness.model import ALL_INTERFACES, INTERFACES
from exoharness.optimizer import (
    DEFAULT_UPPER,
    Evaluator,
    OptimizationProblem,
    cost,
    fold,
    load_problem_settings,
    problem_from_settings,
    read_eval_log,
    save_result,
    solve,
    variable_names,
)
from exoharness.simulation import wrench_rms

UPPER = np.array([1.0, 2.0, 5.0])
X_STAR = np.array([0.3, 1.2, 0.05])


def surrogate_problem(**kw):
    kw.setdefault("n_starts", 4)
    kw.setdefault("budget", 1200)
    kw.setdefault("scale", "linear")
    return OptimizationProblem(("a", "b", "c"), np.zeros(3), UPPER, **kw)


# -- cost -------------------------------------------------------------------------------


def _wrench_trace(seed=0, n=80):
    w = np.random.default_rng(seed).normal(size=(n + 1, 7, 6))
    return fake_trace(n, wrench=w)


def test_cost_of_a_quiet_trace_is_zero():
    assert cost(fake_trace(50)) == 0.0


def test_cost_is_sum_of_squared_rms():
    tr = _wrench_trace()
    rms = wrench_rms(tr)[[ALL_INTERFACES.index(f) for f in INTERFACES]]
    assert cost(tr) == pytest.approx(float(np.sum(rms**2)), rel=1e-12)


def test_cost_ignores_sample_order_and_the_pelvis():
    tr = _wrench_trace(1)
    kept = tr.wrench[tr.retained]
    perm = np.random.default_rng(2).permutation(kept.shape[0])
    w = tr.wrench.copy()
    w[tr.retained] = kept[perm]
    w[:, ALL_INTERFACES.index("pelvis")] *= 100.0
    assert cost(replace(tr, wrench=w)) == pytest.approx(cost(tr), rel=1e-12)


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_cost_scales_with_weights(beta, seed):
    tr = _wrench_trace(seed, 20)
    W = np.random.default_rng(seed).uniform(0, 2, 36)
    assert cost(tr, beta * W) == pytest.approx(beta * cost(tr, W), rel=1e-12)


def test_divergent_cost_and_bad_weights():
    assert cost(fake_trace(10, divergent_at=4)) == math.inf
    with pytest.raises(ValueError):
        cost(fake_trace(10), -np.ones(36))


# -- problem definition -------------------------------------------------------------------


def test_variable_layout():
    assert len(variable_names()) == 36
    assert len(variable_names(tie_legs=False)) == 72
    names = variable_names(disconnected=("shank",))
    assert len(names) == 24 and not any(n.startswith("shank") for n in names)
    p = OptimizationProblem.for_harness(config_from_code("[2 6 1]"))
    assert p.dim == 24
    assert p.upper[p.names.index("thigh.K_tx")] == DEFAULT_UPPER["K_t"]


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.sampled_from(["log", "linear"]))
def test_unit_box_roundtrip(u, scale):
    p = surrogate_problem(scale=scale)
    x = p.to_physical(u)
    assert np.all(x >= 0) and np.all(x <= UPPER * (1 + 1e-12))
    assert np.allclose(p.to_unit(x), u, atol=1e-12)


def test_log_box_spans_decades():
    p = surrogate_problem(scale="log")
    assert np.all(p.to_physical(np.zeros(3)) == 0)
    assert np.allclose(p.to_physical(np.ones(3)), UPPER)
    # the anchor sits half a decade below the top of a five-decade box
    anchor = p.to_physical(np.full(3, 0.9))
    assert np.allclose(anchor / UPPER, (10**4.5 - 1) / (10**5 - 1))


def test_fold_mirrors_into_the_box():
    v = np.array([0.3, 1.2, -0.2, 2.5, 1.0, 0.0])
    assert np.allclose(fold(v), [0.3, 0.8, 0.2, 0.5, 1.0, 0.0])


def test_tied_impedances_are_shared_by_both_legs():
    p = OptimizationProblem.for_harness(config_from_code("[2 6 1]"))
    x = np.linspace(1, 2, p.dim)
    imp = p.impedances(x)
    assert np.array_equal(imp["thigh_r"].K, imp["thigh_l"].K)
    assert np.all(imp["shank_r"].K == 0) and np.all(imp["shank_l"].D == 0)
    untied = OptimizationProblem.for_harness(config_from_code("[3 3 2]"), tie_legs=False)
    imp = untied.impedances(np.arange(untied.dim, dtype=float))
    assert not np.array_equal(imp["foot_r"].K, imp["foot_l"].K)


def test_problem_validation(tmp_path):
    with pytest.raises(ValueError):
        surrogate_problem(n_starts=0)
    with pytest.raises(ValueError):
        surrogate_problem(budget=2)
    with pytest.raises(ValueError):
        surrogate_problem(scale="cubic")
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"budget": 50, "n_starts": 2, "d_th": 0.2}))
    p = problem_from_settings(config_from_code("[0 1 0]"), load_problem_settings(path))
    assert p.budget == 50 and np.all(p.d_th == 0.2)
    path.write_text(json.dumps({"budgett": 50}))
    with pytest.raises(ValueError, match="budgett"):
        load_problem_settings(path)


# -- evaluation ----------------------------------------------------------------------------


def test_cache_avoids_repeat_evaluations():
    f = QuadraticSurrogate(X_STAR, UPPER)
    ev = Evaluator(surrogate_problem(), objective=f)
    a = ev.evaluate([0.1, 0.2, 0.3])
    b = ev.evaluate(np.array([0.1, 0.2, 0.3]))
    assert a == b and f.calls == 1 and ev.n_simulations == 1
    with pytest.raises(ValueError):
        Evaluator(surrogate_problem())


def test_out_of_bounds_points_are_clamped(caplog):
    f = QuadraticSurrogate(X_STAR, UPPER)
    ev = Evaluator(surrogate_problem(), objective=f)
    with caplog.at_level(logging.WARNING, logger="exoharness.optimizer"):
        lam, _ = ev.evaluate([-1.0, 0.5, 9.0])
    assert "clamped" in caplog.text
    assert lam == f(np.array([0.0, 0.5, 5.0]))[0]


# -- search ------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_start_recovers_the_minimizer(seed):
    p = surrogate_problem(seed=seed)
    res = solve(p, Evaluator(p, objective=QuadraticSurrogate(X_STAR, UPPER)))
    for s in res.starts:
        assert np.abs(np.array(s.best_x) - X_STAR).max() <= 1e-3
    assert res.feasible and res.best_constraint == 0
    assert np.all(np.diff(res.incumbent) <= 0)
    assert res.n_evaluations <= p.budget + 1


def test_log_scale_search_recovers_the_minimizer():
    p = surrogate_problem(scale="log", budget=4000)
    res = solve(p, Evaluator(p, objective=QuadraticSurrogate(X_STAR, UPPER)))
    for s in res.starts:
        assert np.abs(np.array(s.best_x) - X_STAR).max() <= 1e-3


def test_minimizer_on_a_bound_is_reached():
    x_star = np.array([0.0, 1.2, 5.0 * 0.9])
    p = surrogate_problem()
    res = solve(p, Evaluator(p, objective=QuadraticSurrogate(x_star, UPPER)))
    assert np.abs(res.best_x - x_star).max() <= 1e-3


def test_single_start_descends_from_the_anchor():
    p = surrogate_problem(n_starts=1, budget=400)
    res = solve(p, Evaluator(p, objective=QuadraticSurrogate(X_STAR, UPPER)))
    assert len(res.starts) == 1
    assert np.allclose(res.starts[0].start_u, 0.9)
    assert res.best_cost < res.anchor_cost
    # the penalty weight follows the anchor cost
    assert res.penalty == pytest.approx(2.0 * res.anchor_cost + 1.0)


def test_search_is_deterministic(tmp_path):
    def run(seed):
        p = surrogate_problem(seed=seed, budget=300)
        res = solve(p, Evaluator(p, objective=QuadraticSurrogate(X_STAR, UPPER)))
        save_result(res, tmp_path / f"r{seed}.json")
        return (tmp_path / f"r{seed}.json").read_bytes()

    assert run(3) == run(3)
    assert run(3) != run(4)


def test_infeasible_everywhere_is_reported():
    p = surrogate_problem(budget=200)
    f = lambda x: (float(np.sum(x)), 1 + int(x[0] > 0.5))
    res = solve(p, Evaluator(p, objective=f))
    assert not res.feasible
    assert res.best_constraint == 1  # least violating point
    assert all(math.isinf(v) for v in res.incumbent)


def test_divergent_points_are_avoided():
    base = QuadraticSurrogate(X_STAR, UPPER)
    f = lambda x: (math.inf, 0) if x[2] > 3.0 else base(x)
    p = surrogate_problem()
    res = solve(p, Evaluator(p, objective=f))
    assert res.feasible and np.abs(res.best_x - X_STAR).max() <= 1e-3


def test_feasible_result_re_evaluates_feasible():
    f = QuadraticSurrogate(np.array([0.99, 1.2, 0.05]), UPPER)  # optimum inside the infeasible band
    p = surrogate_problem()
    res = solve(p, Evaluator(p, objective=f))
    assert res.feasible
    assert f(res.best_x)[1] == 0
    assert res.best_x[0] <= 0.95


def test_evaluation_log_resumes(tmp_path):
    path = tmp_path / "evals.csv"
    p = surrogate_problem(budget=300)
    f1 = QuadraticSurrogate(X_STAR, UPPER)
    ev1 = Evaluator(p, objective=f1)
    assert ev1.attach_log(path) == 0
    first = solve(p, ev1)
    rows = read_eval_log(path, p)
    assert len(rows) == ev1.n_simulations == f1.calls

    # an interrupted write leaves a torn last line
    with path.open("a") as fh:
        fh.write("999,abc,1.0")
    f2 = QuadraticSurrogate(X_STAR, UPPER)
    ev2 = Evaluator(p, objective=f2)
    assert ev2.attach_log(path, resume=True) == len(rows)
    second = solve(p, ev2)
    assert f2.calls == 0
    assert np.array_equal(first.best_x, second.best_x)
    assert json.dumps(first.to_dict(), sort_keys=True) == json.dumps(second.to_dict(), sort_keys=True)

    other = OptimizationProblem(("a", "b", "z"), np.zeros(3), UPPER)
    with pytest.raises(ValueError, match="do not match"):
        read_eval_log(path, other)
