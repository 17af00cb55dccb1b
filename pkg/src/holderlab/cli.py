"""Command line runner: build graphs, compute heat tables, run condition checks, summarize."""

from __future__ import annotations

import csv
import glob
import json
import logging
import os
import sys
import time

import click
import jsonschema
import numpy as np

from .dirichlet import EnergyForm, SolverError
from .graphs import BudgetExceeded, GraphError, central_vertices
from .heat import SizeCapExceeded, cached_spectrum, cached_table, log_time_grid
from .report import ConditionReport, ReportError, _clean, rng_for
from .resistance import ball_resistance_check, resistance_scaling_fit
from .scaling import DomainError
from .verify import (DEFAULT_TOLERANCES, ExperimentPlan, check_functional_inequalities,
                     check_harmonic_regularity, check_heat_kernel_bounds, check_volume,
                     equivalence_matrix, heat_window)

log = logging.getLogger("holderlab")

EX_OK, EX_FAIL, EX_INCONCLUSIVE, EX_CONFIG, EX_DATA = 0, 2, 3, 64, 65
CONDITIONS = ("volume", "heat", "harmonic", "functional", "resistance", "ball_resistance")
FAMILIES = ("interval", "gasket", "vicsek", "carpet")

# sample-count keys and the check argument each one feeds
SAMPLE_KEYS = {
    "volume_centers": ("volume", "n_centers"),
    "heat_centers": ("heat", "n_centers"),
    "heat_quads": ("heat", "n_quads"),
    "heat_per_decade": ("heat", "per_decade"),
    "harmonic_trials": ("harmonic", "trials"),
    "functional_balls": ("functional", "n_balls"),
    "resistance_centers": ("resistance", "n_centers"),
    "ball_resistance_centers": ("ball_resistance", "n_centers"),
}

_explicit_exps = {
    "type": "object",
    "additionalProperties": False,
    "required": ["alpha1", "alpha2", "beta1", "beta2"],
    "properties": {k: {"type": "number"} for k in ("alpha1", "alpha2", "beta1", "beta2")}
    | {"strict": {"type": "boolean"}, "name": {"type": "string"}},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["graph", "exponents", "conditions", "seed"],
    "properties": {
        "graph": {
            "type": "object",
            "additionalProperties": False,
            "required": ["level"],
            "oneOf": [{"required": ["family"]}, {"required": ["blowup"]}],
            "properties": {
                "family": {"enum": list(FAMILIES)},
                "level": {"type": "integer", "minimum": 0},
                "prefractal": {"type": "boolean"},
                "cable_k": {"type": "integer", "minimum": 1},
                "metric": {"enum": ["geodesic", "euclidean"]},
                "blowup": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["cell", "model"],
                    "properties": {"cell": {"enum": list(FAMILIES)}, "model": {"enum": list(FAMILIES)},
                                   "cell_level": {"type": "integer", "minimum": 0}},
                },
            },
        },
        "exponents": {
            "oneOf": [
                {"type": "string"},
                {"type": "object", "additionalProperties": False, "required": ["preset"],
                 "properties": {"preset": {"type": "string"}, "rho": {"type": "number"},
                                "strict": {"type": "boolean"}}},
                _explicit_exps,
            ]
        },
        "conditions": {"type": "array", "minItems": 1, "uniqueItems": True,
                       "items": {"enum": list(CONDITIONS)}},
        "samples": {"type": "object", "additionalProperties": False,
                    "properties": {k: {"type": "integer", "minimum": 1} for k in SAMPLE_KEYS}},
        "seed": {"type": "integer", "minimum": 0},
        "tolerances": {"type": "object", "additionalProperties": False,
                       "properties": {k: {"type": "number", "exclusiveMinimum": 0} for k in DEFAULT_TOLERANCES}},
        "output_dir": {"type": "string"},
        "cache": {"type": "boolean"},
        "write_graph": {"type": "boolean"},
    },
}


class ConfigError(Exception):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


def validate_config(doc) -> list[str]:
    """All schema violations as 'path: message' strings, sorted."""
    v = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errs = []
    for e in v.iter_errors(doc):
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        errs.append(f"{path}: {e.message}")
    return sorted(errs)


def load_config(path, seed=None, out=None, cache=None) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError([f"{path}: {e.strerror}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: not valid JSON ({e})"]) from None
    if isinstance(doc, dict):
        if seed is not None:
            doc["seed"] = seed
        if out is not None:
            doc["output_dir"] = out
        if cache is not None:
            doc["cache"] = cache
    errs = validate_config(doc)
    if errs:
        raise ConfigError(errs)
    doc.setdefault("output_dir", "out")
    doc.setdefault("cache", True)
    return doc


def plan_from_config(cfg: dict) -> ExperimentPlan:
    return ExperimentPlan(graph=cfg["graph"], exponents=cfg["exponents"], conditions=list(cfg["conditions"]),
                          seed=int(cfg["seed"]), samples=dict(cfg.get("samples", {})),
                          tolerances=dict(cfg.get("tolerances", {})))


def _materialize(plan: ExperimentPlan):
    try:
        graph = plan.build_graph()
        exps = plan.build_exponents()
    except BudgetExceeded as e:
        raise ConfigError([f"graph: {e}"]) from None
    except (GraphError, DomainError, KeyError, ValueError) as e:
        raise ConfigError([f"graph/exponents: {e}"]) from None
    return graph, exps


def _kwargs(plan, condition):
    kw = {}
    for key, (cond, arg) in SAMPLE_KEYS.items():
        if cond == condition and key in plan.samples:
            kw[arg] = plan.samples[key]
    return kw


def _inconclusive(condition, graph, exps, why) -> ConditionReport:
    from .report import new_report

    rep = new_report(condition, graph, exps)
    rep.notes.append(why)
    return rep


def run_condition(condition, plan, graph, exps, spec_fn, cache_dir):
    kw = _kwargs(plan, condition)
    tol = plan.tolerances
    seed = plan.seed
    try:
        if condition == "volume":
            return check_volume(graph, exps, seed=seed, tolerances=tol, **kw)
        if condition == "heat":
            return check_heat_kernel_bounds(graph, exps, spec=spec_fn(), seed=seed, cache_dir=cache_dir,
                                            tolerances=tol, **kw)
        if condition == "harmonic":
            return check_harmonic_regularity(graph, exps, seed=seed, tolerances=tol, **kw)
        if condition == "functional":
            return check_functional_inequalities(graph, exps, seed=seed, spec=spec_fn(), tolerances=tol, **kw)
        if condition == "resistance":
            t = {**DEFAULT_TOLERANCES, **tol}
            return resistance_scaling_fit(graph, exps, seed=seed, tol=t["resistance_slope"],
                                          bracket_factor=t["bracket_factor"], **kw)
        if condition == "ball_resistance":
            t = {**DEFAULT_TOLERANCES, **tol}
            return ball_resistance_check(graph, exps, seed=seed, bracket_factor=t["bracket_factor"], **kw)
    except (SolverError, SizeCapExceeded) as e:
        log.warning("%s: %s", condition, e)
        return _inconclusive(condition, graph, exps, f"not evaluated: {e}")
    raise ValueError(f"unknown condition {condition!r}")


def exit_status(reports) -> int:
    verdicts = [r.verdict for r in reports]
    if "fail" in verdicts:
        return EX_FAIL
    if "inconclusive" in verdicts:
        return EX_INCONCLUSIVE
    return EX_OK


def run(cfg: dict) -> int:
    """Execute a validated config; returns the process exit status."""
    plan = plan_from_config(cfg)
    graph, exps = _materialize(plan)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    cache_dir = os.path.join(out, "cache") if cfg.get("cache", True) else None
    if cfg.get("write_graph"):
        graph.save(os.path.join(out, "graph.json"))
    log.info("graph %s: %d vertices, %d edges", graph.content_hash(), graph.n, len(graph.edges))

    holder = {}

    def spec_fn():
        if "spec" not in holder:
            t0 = time.perf_counter()
            form = EnergyForm(graph)
            holder["spec"] = cached_spectrum(form, cache_dir)
            log.info("spectrum: %d modes in %.1fs, orthonormality residual %.2e", holder["spec"].n,
                     time.perf_counter() - t0, holder["spec"].orthonormality_residual())
        return holder["spec"]

    reports = []
    for cond in sorted(plan.conditions):
        t0 = time.perf_counter()
        rep = run_condition(cond, plan, graph, exps, spec_fn, cache_dir)
        rep.write(out, cond)
        log.info("%s: %s (%s) in %.1fs", cond, rep.verdict, ", ".join(f"{k}={v}" for k, v in
                                                                      sorted(rep.checks.items())),
                 time.perf_counter() - t0)
        reports.append(rep)
    summary = {
        "schema": 1,
        "config": {k: cfg[k] for k in sorted(cfg) if k not in ("output_dir", "cache")},
        "graph": reports[0].graph,
        "exponents": reports[0].exponents,
        "reports": {r.condition: {"verdict": r.verdict, "checks": r.checks, "file": f"{r.condition}.json"}
                    for r in reports},
        "equivalence": equivalence_matrix(*reports),
        "exit_status": exit_status(reports),
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(_clean(summary), fh, sort_keys=True, indent=1)
    return summary["exit_status"]


# ---------------------------------------------------------------------------
# report


def _fmt(x):
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.4g}"
    return str(x)


def report_rows(reports):
    rows = []
    for r in reports:
        slopes = "; ".join(f"{k}={_fmt(v.get('slope'))}" + (f" (target {_fmt(v['target'])})" if "target" in v else "")
                           for k, v in sorted(r.fits.items()))
        consts = []
        for k, v in sorted(r.constants.items()):
            if isinstance(v, dict) and "factor" in v:
                consts.append(f"{k}: [{_fmt(v['min'])}, {_fmt(v['max'])}] x{_fmt(v['factor'])}")
        rows.append({
            "graph": r.graph_hash, "family": r.graph.get("family"), "level": r.graph.get("level"),
            "condition": r.condition, "verdict": r.verdict,
            "checks": " ".join(f"{k}={v}" for k, v in sorted(r.checks.items())),
            "slopes": slopes, "constants": "; ".join(consts),
        })
    return rows


def load_reports(run_dir):
    paths = sorted(p for p in glob.glob(os.path.join(run_dir, "*.json"))
                   if os.path.basename(p) not in ("summary.json", "graph.json"))
    return [ConditionReport.load(p) for p in paths]


def render_report(run_dir, out=None) -> tuple[int, str]:
    reports = load_reports(run_dir)
    if not reports:
        return 1, f"no reports in {run_dir}"
    rows = report_rows(reports)
    lines = []
    for h in sorted({r["graph"] for r in rows}):
        sect = [r for r in rows if r["graph"] == h]
        lines.append(f"graph {h} ({sect[0]['family']}, level {sect[0]['level']})")
        w = max(len(r["condition"]) for r in sect)
        for r in sect:
            lines.append(f"  {r['condition']:<{w}}  {r['verdict']:<12}  {r['checks']}")
            if r["slopes"]:
                lines.append(f"  {'':<{w}}  slopes: {r['slopes']}")
            if r["constants"]:
                lines.append(f"  {'':<{w}}  constants: {r['constants']}")
        lines.append("")
    path = os.path.join(out or run_dir, "report.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return 0, "\n".join(lines).rstrip() + "\n"


# ---------------------------------------------------------------------------
# click front end


def _config_or_exit(ctx):
    o = ctx.obj
    if not o["config"]:
        _fail_config(["--config is required"])
    try:
        return load_config(o["config"], o["seed"], o["out"], o["cache"])
    except ConfigError as e:
        _fail_config(e.errors)


def _fail_config(errors):
    click.echo(json.dumps({"errors": errors}, indent=1), err=True)
    sys.exit(EX_CONFIG)


@click.group()
@click.option("--config", type=click.Path(), default=None, help="JSON run configuration.")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker count (work runs in sorted order).")
@click.option("--cache/--no-cache", default=None, help="Reuse spectra and heat tables under <out>/cache.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config, seed, out, jobs, cache, verbose):
    """Finite-graph laboratory for heat kernel and harmonic function estimates."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    ctx.obj = {"config": config, "seed": seed, "out": out, "jobs": jobs, "cache": cache}


@main.command()
@click.option("--family", type=click.Choice(FAMILIES), default=None, help="Build without a config file.")
@click.option("--level", type=int, default=None)
@click.option("--prefractal/--compact", default=True, show_default=True)
@click.option("--cable-k", type=int, default=None)
@click.option("--out", "target", type=click.Path(), default=None,
              help="Output file (*.json) or directory.")
@click.pass_context
def build(ctx, family, level, prefractal, cable_k, target):
    """Build the configured graph and write graph.json."""
    if family is not None:
        if ctx.obj["config"]:
            _fail_config(["--family and --config are mutually exclusive"])
        if level is None:
            _fail_config(["--level is required with --family"])
        g = {"family": family, "level": level, "prefractal": prefractal}
        if cable_k is not None:
            g["cable_k"] = cable_k
        errs = validate_config({"graph": g, "exponents": family, "conditions": ["volume"], "seed": 0})
        if errs:
            _fail_config(errs)
        plan = ExperimentPlan(g, family, [], 0)
        out_dir = ctx.obj["out"] or "."
    else:
        cfg = _config_or_exit(ctx)
        plan = plan_from_config(cfg)
        out_dir = cfg["output_dir"]
    try:
        graph = plan.build_graph()
    except BudgetExceeded as e:
        _fail_config([f"graph: {e}"])
    except (GraphError, KeyError, ValueError) as e:
        _fail_config([f"graph: {e}"])
    target = target or out_dir
    path = target if target.endswith(".json") else os.path.join(target, "graph.json")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    graph.save(path)
    click.echo(f"{path}: {graph.n} vertices, {len(graph.edges)} edges, hash {graph.content_hash()}")


@main.command()
@click.pass_context
def heat(ctx):
    """Compute the heat kernel table over the window and export it."""
    cfg = _config_or_exit(ctx)
    plan = plan_from_config(cfg)
    try:
        graph, exps = _materialize(plan)
    except ConfigError as e:
        _fail_config(e.errors)
    out = cfg["output_dir"]
    cache_dir = os.path.join(out, "cache") if cfg["cache"] else None
    try:
        spec = cached_spectrum(EnergyForm(graph), cache_dir)
    except SizeCapExceeded as e:
        click.echo(str(e), err=True)
        sys.exit(EX_INCONCLUSIVE)
    t0, t1 = heat_window(graph, exps, spec)
    if not t1 > t0:
        click.echo(f"empty time window [{t0:.4g}, {t1:.4g}]: graph too small for these exponents", err=True)
        sys.exit(EX_INCONCLUSIVE)
    times = log_time_grid(t0, t1, plan.samples.get("heat_per_decade", 40))
    cen = central_vertices(graph)
    rng = rng_for(plan.seed, "heat")
    rows = np.sort(rng.choice(cen, size=min(plan.samples.get("heat_centers", 30), len(cen)), replace=False))
    table = cached_table(spec, times, rows, rows, cache_dir)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "heat_table.csv")
    table.to_csv(path)
    click.echo(f"{path}: {len(times)} times x {len(rows)}^2 pairs, t in [{t0:.4g}, {t1:.4g}]")


@main.command()
@click.pass_context
def verify(ctx):
    """Run the configured condition checks and write reports plus summary.json."""
    cfg = _config_or_exit(ctx)
    try:
        status = run(cfg)
    except ConfigError as e:
        _fail_config(e.errors)
    summary = os.path.join(cfg["output_dir"], "summary.json")
    with open(summary) as fh:
        doc = json.load(fh)
    for cond, r in sorted(doc["reports"].items()):
        click.echo(f"{cond:<16} {r['verdict']}")
    if doc["equivalence"]["flag"]:
        click.echo(doc["equivalence"]["flag"])
    sys.exit(status)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.pass_context
def report(ctx, run_dir):
    """Tabulate the reports in RUN_DIR (text on stdout, report.csv alongside)."""
    try:
        status, text = render_report(run_dir, ctx.obj["out"])
    except ReportError as e:
        click.echo(str(e), err=True)
        sys.exit(EX_DATA)
    click.echo(text, err=status != 0, nl=False if text.endswith("\n") else True)
    sys.exit(status)


if __name__ == "__main__":
    main()
