"""Command-line interface: ``exoharness simulate|optimize|compare|gen-gait|validate-config``."""

from __future__ import annotations

import json
import logging
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .harness import format_code, parse_code
from .human_reference import save_gait, synthetic_gait
from .model import ALL_INTERFACES, INTERFACES
from .optimizer import Evaluator, load_problem_settings, save_result, solve
from .scenario import CONSTRAINT_NOTE, ConfigError, Scenario
from .simulation import episode_metrics, prepare


def _dump(obj) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats, no NaN tokens."""

    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating, float)):
            f = float(o)
            return f if math.isfinite(f) else repr(f)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        return o

    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def _provenance(sc: Scenario, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, **sc.resolved(), **extra}


def _load(config, seed, preset, problem_file=None) -> Scenario:
    overrides = {}
    if preset:
        overrides["harness"] = preset
    if problem_file:
        overrides["problem"] = load_problem_settings(problem_file)
    if config:
        return Scenario.from_file(config, seed, overrides)
    return Scenario.from_dict({}, ".", seed, overrides)


def _fail(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(2)


def _out_dir(out) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_trace_outputs(out: Path, trace, metrics, provenance, prefix=""):
    from .plots import plot_tracking, plot_wrenches

    header = "".join(f"# {line}\n" for line in _dump(provenance).splitlines())
    (out / f"{prefix}trace.csv").write_text(header + trace.to_csv())
    (out / f"{prefix}metrics.json").write_text(_dump({"provenance": provenance, "metrics": metrics.to_dict()}))
    if not trace.divergent:
        plot_wrenches(trace, out / f"{prefix}wrenches.svg")
        plot_tracking(trace, out / f"{prefix}tracking.svg")


def _common(f):
    f = click.option("--config", "config", type=click.Path(), default=None, help="scenario JSON file")(f)
    f = click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="root seed")(f)
    f = click.option("--out", type=click.Path(), default="out", show_default=True, help="output directory")(f)
    return f


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="log progress")
def main(verbose):
    """Human-exoskeleton harness simulation and impedance optimization."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@_common
@click.option("--preset", default=None, help="harness layout code, e.g. '[0 1 0]'")
def simulate(config, seed, out, preset):
    """Run one episode with explicit (or anchor) impedances."""
    try:
        sc = _load(config, seed, preset)
        if sc.config["impedance"]["source"] == "optimize":
            raise ConfigError("simulate needs explicit or anchor impedances; use 'optimize' instead")
        spec = sc.episode()
        trace = prepare(spec).run()
        prob = sc.problem(spec.harness)
        metrics = episode_metrics(trace, prob.weights, prob.d_th)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    outdir = _out_dir(out)
    _write_trace_outputs(outdir, trace, metrics, _provenance(sc, "simulate"))
    click.echo(CONSTRAINT_NOTE)
    click.echo(f"cost {metrics.cost:.6g}  constraint {metrics.constraint}  divergent {trace.divergent}")


def _optimize_one(sc: Scenario, code, outdir: Path, jobs: int, resume: bool, prefix=""):
    spec = sc.episode(code)
    problem = sc.problem(spec.harness)
    ev = Evaluator(problem, spec)
    log_path = outdir / f"{prefix}evaluations.csv"
    if jobs <= 1:
        replayed = ev.attach_log(log_path, resume=resume)
        if replayed:
            click.echo(f"replayed {replayed} cached evaluations from {log_path}")
    elif resume and log_path.exists():
        from .optimizer import read_eval_log

        ev.preload(read_eval_log(log_path, problem))
    result = solve(problem, ev, jobs=jobs, progress=lambda m: logging.getLogger("exoharness").info(m))
    if jobs > 1:
        ev.write_log(log_path)
    best_spec = spec.with_impedances(problem.impedances(result.best_x))
    trace = prepare(best_spec).run()
    metrics = episode_metrics(trace, problem.weights, problem.d_th)
    prov = _provenance(sc, "optimize", harness=format_code(spec.harness.code))
    payload = result.to_dict()
    payload["provenance"] = prov
    payload["n_simulations"] = len(ev.log)
    (outdir / f"{prefix}result.json").write_text(_dump(payload))
    _write_trace_outputs(outdir, trace, metrics, prov, prefix=f"{prefix}best_")
    return result, trace, metrics


@main.command()
@_common
@click.option("--preset", default=None, help="harness layout code, e.g. '[3 3 2]'")
@click.option("--problem", "problem_file", type=click.Path(), default=None, help="problem JSON file")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="parallel episode workers")
@click.option("--resume", is_flag=True, help="replay the evaluation log found in --out")
def optimize(config, seed, out, preset, problem_file, jobs, resume):
    """Optimize interface impedances for one harness layout."""
    try:
        sc = _load(config, seed, preset, problem_file)
        outdir = _out_dir(out)
        result, trace, metrics = _optimize_one(sc, None, outdir, jobs, resume)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    click.echo(CONSTRAINT_NOTE)
    click.echo(
        f"best cost {result.best_cost:.6g}  constraint {result.best_constraint}  "
        f"feasible {str(result.feasible).lower()}  evaluations {result.n_evaluations}"
    )


@main.command()
@_common
@click.option("--preset", "presets", multiple=True, required=True, help="layout code; repeat for each configuration")
@click.option("--problem", "problem_file", type=click.Path(), default=None, help="problem JSON file")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
def compare(config, seed, out, presets, problem_file, jobs):
    """Optimize several layouts on the same gait and seeds and rank them."""
    from .plots import plot_comparison

    if len(presets) < 2:
        _fail("compare needs at least two --preset codes")
    try:
        codes = [format_code(parse_code(p)) for p in presets]
        sc = _load(config, seed, None, problem_file)
        outdir = _out_dir(out)
        rows = []
        for code in codes:
            prefix = code.strip("[]").replace(" ", "") + "_"
            result, trace, metrics = _optimize_one(sc, code, outdir, jobs, False, prefix=prefix)
            md = metrics.to_dict()
            rows.append(
                {
                    "config": code,
                    "cost": result.best_cost,
                    "constraint": result.best_constraint,
                    "feasible": result.feasible,
                    "wrench_rms": {f: md["wrench_rms"][f] for f in INTERFACES},
                    "tracking": md["tracking"],
                }
            )
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    ranked = sorted(range(len(rows)), key=lambda i: (not rows[i]["feasible"], rows[i]["cost"], i))
    for rank, i in enumerate(ranked, 1):
        rows[i]["rank"] = rank
    report = {"provenance": _provenance(sc, "compare", configs=codes), "rows": rows}
    (outdir / "comparison.json").write_text(_dump(report))
    plot_comparison(rows, outdir / "comparison.svg")
    click.echo(CONSTRAINT_NOTE)
    click.echo(f"{'rank':>4}  {'config':<9} {'cost':>12} {'c':>6}  feasible")
    for i in ranked:
        r = rows[i]
        click.echo(f"{r['rank']:>4}  {r['config']:<9} {r['cost']:>12.6g} {r['constraint']:>6}  {str(r['feasible']).lower()}")


@main.command("gen-gait")
@click.option("--out", type=click.Path(), default="gait.csv", show_default=True, help="output CSV path")
@click.option("--cadence", type=float, default=110.0, show_default=True, help="steps per minute")
@click.option("--amplitude", type=float, default=1.0, show_default=True)
@click.option("--sample-rate", type=float, default=240.0, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=None, help="jitter seed (nominal curves if omitted)")
def gen_gait(out, cadence, amplitude, sample_rate, seed):
    """Write one synthetic gait cycle in the gait CSV schema."""
    try:
        traj = synthetic_gait(cadence, amplitude, sample_rate, seed=seed)
    except ValueError as exc:
        _fail(str(exc))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_gait(traj, out)
    click.echo(f"wrote {traj.n_samples} samples ({traj.period:.4f} s cycle) to {out}")


@main.command("validate-config")
@click.option("--config", "config", type=click.Path(), required=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--preset", default=None)
def validate_config(config, seed, preset):
    """Resolve a scenario file and report what it would run."""
    try:
        sc = _load(config, seed, preset)
        spec = sc.episode()
        prep = prepare(spec)
        prob = sc.problem(spec.harness)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"model: {spec.tree.dof_count} DoF, mass {spec.tree.total_mass:.6g} kg")
    click.echo(f"harness: {format_code(spec.harness.code)}")
    click.echo(f"episode: {prep.n_steps} steps of {spec.dt:g} s")
    click.echo(f"variables: {prob.dim} (interfaces {', '.join(ALL_INTERFACES[:-1])}; pelvis fixed)")
    click.echo(CONSTRAINT_NOTE)
    click.echo("ok")


if __name__ == "__main__":  # pragma: no cover
    main()
