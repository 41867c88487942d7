"""Impedance search: minimize the weighted wrench cost under a distance bound.

Search runs in a unit box ``u in [0, 1]^d`` mapped onto the physical bounds,
logarithmically by default so that the scatter stage spreads evenly across
decades. The integer constraint count enters the local searches as an
exact penalty; feasibility is always reported from the unpenalized count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .harness import SEGMENTS, ImpedanceParams
from .model import ALL_INTERFACES, INTERFACES
from .simulation import DEFAULT_DISTANCE_THRESHOLD, EpisodeSpec, PreparedEpisode, constraint_value

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DIVERGED_MERIT = 1e30
PARAM_KINDS = ("K_r", "K_t", "D_r", "D_t")
AXES = ("x", "y", "z")
# upper bounds: stiffness from strap/soft-tissue ranges, damping critical for
# the device mass (translation) and a unit reference inertia (rotation)
DEFAULT_UPPER = {"K_r": 5e3, "K_t": 1e5, "D_r": 2.0 * math.sqrt(5e3 * 1.0), "D_t": 2.0 * math.sqrt(1e5 * 19.0)}


def cost(trace, weights=None) -> float:
    """Time average of ``w^T W w`` over the retained samples (six limb interfaces)."""
    if trace.divergent:
        return math.inf
    idx = [trace.interfaces.index(f) for f in INTERFACES]
    w = trace.wrench[trace.retained][:, idx, :].reshape(-1, 6 * len(INTERFACES))
    W = np.ones(w.shape[1]) if weights is None else np.broadcast_to(np.asarray(weights, float), (w.shape[1],))
    if np.any(W < 0):
        raise ValueError("weights must be >= 0")
    return float(np.mean(w**2 @ W))


def variable_names(tie_legs: bool = True, disconnected=()) -> list:
    owners = [s for s in SEGMENTS if s not in disconnected] if tie_legs else [
        f for f in INTERFACES if f.split("_")[0] not in disconnected
    ]
    return [f"{o}.{k}{a}" for o in owners for k in PARAM_KINDS for a in AXES]


@dataclass(frozen=True)
class OptimizationProblem:
    names: tuple
    lower: np.ndarray
    upper: np.ndarray
    weights: np.ndarray = field(default_factory=lambda: np.ones(36))
    d_th: np.ndarray = field(default_factory=lambda: np.full(18, DEFAULT_DISTANCE_THRESHOLD))
    n_starts: int = 4
    budget: int = 2000
    seed: int = 0
    tie_legs: bool = True
    anchor: float = 0.9
    decades: float = 5.0
    scale: str = "log"
    scatter: int | None = None

    def __post_init__(self):
        for name in ("lower", "upper", "weights", "d_th"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "names", tuple(self.names))
        d = len(self.names)
        if self.lower.shape != (d,) or self.upper.shape != (d,):
            raise ValueError("bounds must match the variable count")
        if np.any(self.lower != 0.0):
            raise ValueError("lower bounds are zero by construction")
        if np.any(self.upper <= 0):
            raise ValueError("upper bounds must be positive")
        if np.any(self.weights < 0):
            raise ValueError("weights must be >= 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.budget < self.n_starts:
            raise ValueError("budget must be at least n_starts")
        if self.scale not in ("log", "linear"):
            raise ValueError("scale must be 'log' or 'linear'")
        if not 0.0 <= self.anchor <= 1.0:
            raise ValueError("anchor must lie in the unit box")

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def n_scatter(self) -> int:
        return self.scatter if self.scatter is not None else max(4 * self.n_starts, 10)

    @classmethod
    def for_harness(cls, harness=None, tie_legs: bool = True, upper: dict | None = None, **kw) -> OptimizationProblem:
        disc = tuple(sorted(harness.disconnected)) if harness is not None else ()
        names = variable_names(tie_legs, disc)
        if upper is not None and not isinstance(upper, dict):
            up = np.asarray(upper, dtype=float)
        else:
            ub = dict(DEFAULT_UPPER, **(upper or {}))
            up = np.array([ub[n.split(".")[1][:3]] for n in names])
        return cls(tuple(names), np.zeros(len(names)), up, tie_legs=tie_legs, **kw)

    # unit box <-> physical variables
    def to_physical(self, u) -> np.ndarray:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.scale == "linear":
            return self.upper * u
        s = self.decades
        return self.upper * np.expm1(s * math.log(10.0) * u) / math.expm1(s * math.log(10.0))

    def to_unit(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float) / self.upper
        if self.scale == "linear":
            return x
        s = self.decades
        return np.log1p(x * math.expm1(s * math.log(10.0))) / (s * math.log(10.0))

    def impedances(self, x) -> dict:
        """Per-interface impedances; interfaces with no variables get zero."""
        vals = dict(zip(self.names, np.asarray(x, dtype=float)))
        out = {}
        for iface in INTERFACES:
            owner = iface.split("_")[0] if self.tie_legs else iface
            if f"{owner}.K_rx" not in vals:
                out[iface] = ImpedanceParams()
                continue
            get = lambda kind: [vals[f"{owner}.{kind}{a}"] for a in AXES]
            out[iface] = ImpedanceParams.from_parts(get("K_r"), get("K_t"), get("D_r"), get("D_t"))
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "names": list(self.names),
            "upper": self.upper.tolist(),
            "weights": self.weights.tolist(),
            "d_th": self.d_th.tolist(),
            "n_starts": self.n_starts,
            "budget": self.budget,
            "seed": self.seed,
            "tie_legs": self.tie_legs,
            "anchor": self.anchor,
            "decades": self.decades,
            "scale": self.scale,
            "scatter": self.scatter,
        }


def load_problem_settings(path) -> dict:
    """Read a problem file; keys left out keep their defaults."""
    data = json.loads(Path(path).read_text())
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported problem format_version {version!r}")
    allowed = {"weights", "d_th", "n_starts", "budget", "seed", "tie_legs", "anchor", "decades", "scale", "scatter", "upper"}
    unknown = set(data) - allowed - {"format_version"}
    if unknown:
        raise ValueError(f"unknown problem keys {sorted(unknown)}")
    return {k: v for k, v in data.items() if k in allowed}


def problem_from_settings(harness, settings: dict) -> OptimizationProblem:
    s = dict(settings)
    tie = s.pop("tie_legs", True)
    upper = s.pop("upper", None)
    if "weights" in s and np.ndim(s["weights"]) == 0:
        s["weights"] = np.full(36, float(s["weights"]))
    if "d_th" in s and np.ndim(s["d_th"]) == 0:
        s["d_th"] = np.full(18, float(s["d_th"]))
    return OptimizationProblem.for_harness(harness, tie_legs=tie, upper=upper, **s)


# -- evaluation ------------------------------------------------------------------


def variable_key(x) -> str:
    return hashlib.sha1(np.ascontiguousarray(np.asarray(x, dtype=np.float64)).tobytes()).hexdigest()


@dataclass(frozen=True)
class Evaluation:
    key: str
    x: np.ndarray
    cost: float
    constraint: int
    divergent: bool = False


class Evaluator:
    """Cached ``x -> (cost, constraint)`` over one prepared episode.

    ``objective`` replaces the simulation with any callable returning
    ``(cost, constraint)``, which is how analytic test surrogates plug in.
    """

    def __init__(self, problem: OptimizationProblem, spec: EpisodeSpec | None = None, objective: Callable | None = None):
        if (spec is None) == (objective is None):
            raise ValueError("give exactly one of spec or objective")
        self.problem = problem
        self.spec = spec
        self.objective = objective
        self._prepared = None
        self.cache: dict = {}
        self.log: list = []
        self._lock = threading.Lock()
        self.n_simulations = 0
        self._stream = None

    def attach_log(self, path, resume: bool = False) -> int:
        """Stream new evaluations to a CSV log; with ``resume``, replay it first."""
        path = Path(path)
        replayed = 0
        if resume and path.exists():
            old = read_eval_log(path, self.problem)
            self.preload(old)
            self.log.extend(old)
            replayed = len(old)
            write_eval_log(path, self.problem, old)  # drops a torn trailing row
        else:
            write_eval_log(path, self.problem, [])
        self._stream = path
        return replayed

    @property
    def prepared(self) -> PreparedEpisode:
        if self._prepared is None:
            self._prepared = PreparedEpisode(self.spec)
        return self._prepared

    def _compute(self, x) -> tuple:
        if self.objective is not None:
            lam, c = self.objective(x)
            return float(lam), int(c), not math.isfinite(lam)
        trace = self.prepared.run(self.problem.impedances(x))
        lam = cost(trace, self.problem.weights)
        return lam, constraint_value(trace, self.problem.d_th), trace.divergent

    def evaluate(self, x) -> tuple:
        p = self.problem
        x = np.array(x, dtype=float).reshape(p.dim)
        clipped = np.clip(x, p.lower, p.upper)
        if np.any(clipped != x):
            log.warning("variables outside bounds were clamped: %s", np.flatnonzero(clipped != x).tolist())
            x = clipped
        key = variable_key(x)
        with self._lock:
            hit = self.cache.get(key)
        if hit is not None:
            return hit.cost, hit.constraint
        lam, c, div = self._compute(x)
        ev = Evaluation(key, x, lam, c, div)
        with self._lock:
            if key not in self.cache:
                self.cache[key] = ev
                self.log.append(ev)
                self.n_simulations += 1
                if self._stream is not None:
                    with self._stream.open("a", newline="") as fh:
                        csv.writer(fh, lineterminator="\n").writerow(_log_row(len(self.log) - 1, ev))
        return lam, c

    def preload(self, evaluations) -> None:
        for ev in evaluations:
            self.cache.setdefault(ev.key, ev)

    def write_log(self, path, extra: list | None = None) -> None:
        write_eval_log(path, self.problem, self.log if extra is None else extra)


def write_eval_log(path, problem: OptimizationProblem, evaluations) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "key", "cost", "constraint", "divergent", *problem.names])
    for i, ev in enumerate(evaluations):
        w.writerow(_log_row(i, ev))
    Path(path).write_text(buf.getvalue())


def _log_row(i: int, ev: Evaluation) -> list:
    return [i, ev.key, repr(float(ev.cost)), ev.constraint, int(ev.divergent), *[repr(float(v)) for v in ev.x]]


def read_eval_log(path, problem: OptimizationProblem) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            return out
        if tuple(header[5:]) != problem.names:
            raise ValueError(f"{path}: evaluation log variables do not match the problem")
        for row in rows:
            if len(row) != len(header):
                break  # torn final line from an interrupted write
            x = np.array([float(v) for v in row[5:]])
            out.append(Evaluation(row[1], x, float(row[2]), int(row[3]), bool(int(row[4]))))
    return out


# -- search -------------------------------------------------------------------------


@dataclass
class StartRecord:
    index: int
    start_u: list
    start_x: list
    cost: float
    constraint: int
    merit: float
    evaluations: int
    iterations: int
    best_x: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OptimizationResult:
    names: tuple
    best_x: np.ndarray
    best_cost: float
    best_constraint: int
    feasible: bool
    starts: list
    seed: int
    anchor_cost: float
    anchor_constraint: int
    penalty: float
    n_evaluations: int
    incumbent: list
    problem: dict

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "variables": {n: float(v) for n, v in zip(self.names, self.best_x)},
            "best_cost": float(self.best_cost),
            "best_constraint": int(self.best_constraint),
            "feasible": bool(self.feasible),
            "starts": [s.to_dict() for s in self.starts],
            "seed": self.seed,
            "anchor_cost": float(self.anchor_cost),
            "anchor_constraint": int(self.anchor_constraint),
            "penalty": float(self.penalty),
            "n_evaluations": int(self.n_evaluations),
            "incumbent": [float(v) for v in self.incumbent],
            "problem": self.problem,
        }


class _Tracker:
    """Budgeted merit function recording the search path of one stage."""

    def __init__(self, evaluator: Evaluator, rho: float, limit: int):
        self.ev = evaluator
        self.rho = rho
        self.limit = limit
        self.count = 0
        self.path = []  # (x, cost, constraint)
        self.best = None  # (merit, x, cost, c)

    def merit(self, v) -> float:
        if self.count >= self.limit:
            raise _BudgetExhausted
        x = self.ev.problem.to_physical(fold(v))
        lam, c = self.ev.evaluate(x)
        self.count += 1
        self.path.append((x, lam, c))
        m = DIVERGED_MERIT if not math.isfinite(lam) else lam + self.rho * c
        if self.best is None or m < self.best[0]:
            self.best = (m, x, lam, c)
        return m


class _BudgetExhausted(Exception):
    pass


def _initial_simplex(u0: np.ndarray, step: float = 0.1) -> np.ndarray:
    d = u0.shape[0]
    simplex = np.tile(u0, (d + 1, 1))
    for i in range(d):
        simplex[i + 1, i] += step if u0[i] + step <= 1.0 else -step
    return simplex


def fold(v) -> np.ndarray:
    """Mirror the real line onto [0, 1]; the identity inside the box."""
    return 1.0 - np.abs(np.mod(np.asarray(v, float), 2.0) - 1.0)


def _local_search(evaluator: Evaluator, u0, rho: float, budget: int):
    """Unconstrained Nelder-Mead on the folded box coordinates.

    Folding instead of clipping keeps the simplex from collapsing onto a
    face of the box when the optimum sits close to a bound. The search
    restarts from its own result until a restart stops helping.
    """
    tr = _Tracker(evaluator, rho, budget)
    nit = 0
    v = np.asarray(u0, float)
    best = math.inf
    try:
        while True:
            res = minimize(
                tr.merit,
                v,
                method="Nelder-Mead",
                options={
                    "maxfev": budget - tr.count,
                    "initial_simplex": _initial_simplex(v),
                    "adaptive": True,
                    "xatol": 1e-8,
                    "fatol": 1e-10,
                },
            )
            nit += int(res.nit)
            if not res.fun < best - 1e-12 * max(1.0, abs(best)) or tr.count >= budget:
                break
            best = float(res.fun)
            v = fold(res.x)
    except _BudgetExhausted:
        nit = -1
    return tr, nit


def _run_start(args):
    problem, spec, objective, u0, rho, budget, preload = args
    ev = Evaluator(problem, spec=spec, objective=objective)
    ev.preload(preload)
    tr, nit = _local_search(ev, u0, rho, budget)
    return tr.path, tr.best, tr.count, nit, ev.log


def solve(
    problem: OptimizationProblem,
    evaluator: Evaluator,
    jobs: int = 1,
    progress: Callable | None = None,
) -> OptimizationResult:
    """Scatter sampling, then Nelder-Mead from the anchor and the best scatter points."""
    p = problem
    rng = np.random.default_rng(p.seed)
    path = []

    def record(x, lam, c):
        path.append((np.asarray(x, float), lam, c))

    # anchor: stiff and damped everywhere, expected feasible
    u_anchor = np.full(p.dim, p.anchor)
    x_anchor = p.to_physical(u_anchor)
    lam_a, c_a = evaluator.evaluate(x_anchor)
    record(x_anchor, lam_a, c_a)
    if not math.isfinite(lam_a):
        lam_a_pen = 1.0
    else:
        lam_a_pen = lam_a
    rho = 2.0 * lam_a_pen + 1.0

    def merit(lam, c):
        return DIVERGED_MERIT if not math.isfinite(lam) else lam + rho * c

    n_scatter = min(p.n_scatter, max(p.budget - p.n_starts, 0))
    scatter_u = rng.uniform(0.0, 1.0, size=(n_scatter, p.dim))
    scatter = []
    for u in scatter_u:
        x = p.to_physical(u)
        lam, c = evaluator.evaluate(x)
        record(x, lam, c)
        scatter.append((merit(lam, c), u))
    order = sorted(range(len(scatter)), key=lambda i: (scatter[i][0], i))
    starts_u = [u_anchor] + [scatter[i][1] for i in order[: p.n_starts - 1]]
    while len(starts_u) < p.n_starts:
        starts_u.append(rng.uniform(0.0, 1.0, size=p.dim))
    if progress:
        progress(f"anchor cost {lam_a:.6g} (c = {c_a}); {n_scatter} scatter points evaluated")

    remaining = p.budget - len(path)
    per_start = [remaining // p.n_starts + (1 if i < remaining % p.n_starts else 0) for i in range(p.n_starts)]
    preload = list(evaluator.cache.values())
    args = [(p, evaluator.spec, evaluator.objective, starts_u[i], rho, max(per_start[i], 1), preload) for i in range(p.n_starts)]
    if jobs > 1 and evaluator.spec is not None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_start, args))
        for out in outs:
            for ev in out[4]:
                if ev.key not in evaluator.cache:
                    evaluator.cache[ev.key] = ev
                    evaluator.log.append(ev)
    else:
        outs = []
        for a in args:
            tr, nit = _local_search(evaluator, a[3], rho, a[5])
            outs.append((tr.path, tr.best, tr.count, nit, None))

    starts = []
    for i, (spath, best, count, nit, _) in enumerate(outs):
        path.extend(spath)
        m, bx, blam, bc = best
        starts.append(
            StartRecord(
                index=i,
                start_u=[float(v) for v in starts_u[i]],
                start_x=[float(v) for v in p.to_physical(starts_u[i])],
                cost=float(blam),
                constraint=int(bc),
                merit=float(m),
                evaluations=int(count),
                iterations=int(nit),
                best_x=[float(v) for v in bx],
            )
        )
        if progress:
            progress(f"start {i}: cost {blam:.6g}, c = {bc}, {count} evaluations")

    incumbent = []
    best = None  # (cost, x, c)
    fallback = None  # least-violating point when nothing is feasible
    for x, lam, c in path:
        if c == 0 and math.isfinite(lam) and (best is None or lam < best[0]):
            best = (lam, x, c)
        if math.isfinite(lam) and (fallback is None or (c, lam) < (fallback[2], fallback[0])):
            fallback = (lam, x, c)
        incumbent.append(best[0] if best is not None else math.inf)
    feasible = best is not None
    if not feasible:
        best = fallback if fallback is not None else (math.inf, x_anchor, c_a)
    # re-verify the reported point without penalty
    lam_b, c_b = evaluator.evaluate(best[1])
    return OptimizationResult(
        names=p.names,
        best_x=np.asarray(best[1]),
        best_cost=lam_b,
        best_constraint=c_b,
        feasible=feasible and c_b == 0,
        starts=starts,
        seed=p.seed,
        anchor_cost=lam_a,
        anchor_constraint=c_a,
        penalty=rho,
        n_evaluations=len(path),
        incumbent=incumbent,
        problem=p.to_dict(),
    )


def save_result(result: OptimizationResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
