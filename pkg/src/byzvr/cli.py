"""Experiment harness: grid files, batch execution, summaries, and plots.

A grid is a YAML file whose axes (datasets, methods, attacks, aggregators,
batch sizes, stepsizes, seeds) expand to a run list in lexicographic order.
Batch sizes may be dataset-relative ("0.01m", ceiling) and stepsizes may be
smoothness-relative ("1/(12L)", "5/(2L)"). Each run writes
<output_dir>/<slug>/trace.csv and meta.json; the harness writes summary.csv
and one suboptimality plot per (dataset, attack) pair.
"""

from __future__ import annotations

import argparse
import functools
import json
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from . import analysis, engine
from .aggregation import AggregatorSpec, monte_carlo_audit, parse_aggregator
from .attacks import AttackSpec, parse_attack
from .data import dataset_fingerprint, load_libsvm, subsample
from .objective import Objective, make_logistic

OUTPUT_DIR_ENV = "BYZVR_OUTPUT_DIR"
_VERSION = "0.1.0"


class GridError(ValueError):
    """A grid file field is missing or malformed; the message names it."""


@dataclass
class DatasetSpec:
    path: str
    dim: int | None = None
    subsample: int | None = None
    subsample_seed: int = 0
    l2: float | None = None  # None means l2 = L0/1000
    name: str = ""

    def key(self) -> str:
        base = self.name or os.path.splitext(os.path.basename(self.path))[0]
        base = re.sub(r"[^A-Za-z0-9._-]", "-", base)
        if self.subsample is not None:
            base += f"-n{self.subsample}s{self.subsample_seed}"
        return base


@dataclass
class ExperimentGrid:
    datasets: list[DatasetSpec]
    K: int
    methods: list[str] = field(default_factory=lambda: ["br_lsvrg"])
    attacks: list[str] = field(default_factory=lambda: ["none"])
    aggregators: list[str] = field(default_factory=lambda: ["mean"])
    batchsizes: list = field(default_factory=lambda: [1])
    stepsizes: list = field(default_factory=lambda: ["1/(12L)"])
    seeds: list[int] = field(default_factory=lambda: [1])
    n: int = 16
    byzantine: object = 0  # count (last ids) or explicit id list
    p: float | None = None
    eval_every: int = 1000
    ref_tol: float = 1e-12
    output_dir: str | None = None


def load_grid(path: str) -> ExperimentGrid:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise GridError("grid file must be a mapping")
    if "K" not in raw:
        raise GridError("missing required field 'K'")
    if "datasets" not in raw or not raw["datasets"]:
        raise GridError("missing required field 'datasets'")
    known = {f for f in ExperimentGrid.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise GridError(f"unknown grid fields: {sorted(unknown)}")
    ds_specs = []
    for i, d in enumerate(raw["datasets"]):
        if not isinstance(d, dict) or "path" not in d:
            raise GridError(f"datasets[{i}] needs a 'path'")
        l2 = d.get("l2", "auto")
        l2 = None if l2 in ("auto", None) else float(l2)
        ds_specs.append(DatasetSpec(
            path=d["path"], dim=d.get("dim"), subsample=d.get("subsample"),
            subsample_seed=d.get("subsample_seed", 0), l2=l2,
            name=d.get("name", "")))
    kwargs = {k: v for k, v in raw.items() if k != "datasets"}
    try:
        return ExperimentGrid(datasets=ds_specs, **kwargs)
    except TypeError as e:
        raise GridError(str(e)) from None


_REL_BATCH = re.compile(r"^(\d*\.?\d+)\s*m$")
_REL_STEP_PAREN = re.compile(r"^(\d+(?:\.\d+)?)\s*/\s*\(\s*(\d+(?:\.\d+)?)\s*\*?\s*L\s*\)$")
_REL_STEP_BARE = re.compile(r"^(\d+(?:\.\d+)?)\s*/\s*L$")


def parse_batchsize(spec, m: int) -> int:
    """int stays; 'Fm' becomes ceil(F * m)."""
    if isinstance(spec, bool):
        raise GridError(f"bad batchsize {spec!r}")
    if isinstance(spec, int):
        b = spec
    elif isinstance(spec, str):
        mt = _REL_BATCH.match(spec.strip())
        if mt:
            b = math.ceil(float(mt.group(1)) * m)
        else:
            try:
                b = int(spec)
            except ValueError:
                raise GridError(f"bad batchsize {spec!r}") from None
    else:
        raise GridError(f"bad batchsize {spec!r}")
    if not 1 <= b <= m:
        raise GridError(f"batchsize {spec!r} resolves to {b}, outside [1, {m}]")
    return b


def parse_stepsize(spec, L: float) -> float:
    """Floats stay; 'a/(bL)' and 'a/L' are evaluated with the dataset's L."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        g = float(spec)
    elif isinstance(spec, str):
        s = spec.strip()
        mt = _REL_STEP_PAREN.match(s)
        if mt:
            g = float(mt.group(1)) / (float(mt.group(2)) * L)
        else:
            mt = _REL_STEP_BARE.match(s)
            if mt:
                g = float(mt.group(1)) / L
            else:
                try:
                    g = float(s)
                except ValueError:
                    raise GridError(f"bad stepsize {spec!r}") from None
    else:
        raise GridError(f"bad stepsize {spec!r}")
    if not g > 0.0:
        raise GridError(f"stepsize {spec!r} resolves to {g}, must be positive")
    return g


def _byzantine_ids(grid: ExperimentGrid) -> tuple[int, ...]:
    if isinstance(grid.byzantine, bool):
        raise GridError("byzantine must be a count or an id list")
    if isinstance(grid.byzantine, int):
        c = grid.byzantine
        if not 0 <= c < grid.n:
            raise GridError(f"byzantine count {c} outside [0, n)")
        return tuple(range(grid.n - c, grid.n))
    if isinstance(grid.byzantine, (list, tuple)):
        return tuple(int(i) for i in grid.byzantine)
    raise GridError("byzantine must be a count or an id list")


@dataclass
class ResolvedRun:
    dataset: str
    slug: str
    config: engine.RunConfig
    attack_label: str
    agg_label: str
    batch_label: str
    step_label: str


def resolve_grid(grid: ExperimentGrid,
                 constants: dict[str, tuple[float, float, int]]) -> list[ResolvedRun]:
    """Expand the grid against per-dataset constants {key: (L, mu, m)}.

    Runs come out in lexicographic order (dataset, method, attack,
    aggregator, batchsize, stepsize, seed). Slug collisions are an error.
    """
    byz = _byzantine_ids(grid)
    runs: list[ResolvedRun] = []
    for ds in grid.datasets:
        key = ds.key()
        if key not in constants:
            raise GridError(f"no constants for dataset {key!r}")
        L, _mu, m = constants[key]
        for method in grid.methods:
            for attack_s in grid.attacks:
                attack = parse_attack(str(attack_s))
                for agg_s in grid.aggregators:
                    agg = parse_aggregator(str(agg_s))
                    for batch_s in grid.batchsizes:
                        b = parse_batchsize(batch_s, m)
                        for step_s in grid.stepsizes:
                            gamma = parse_stepsize(step_s, L)
                            for seed in grid.seeds:
                                cfg = engine.RunConfig(
                                    gamma=gamma, b=b, K=grid.K,
                                    master_seed=int(seed), n=grid.n,
                                    method=method, p=grid.p,
                                    byzantine_ids=byz, aggregator=agg,
                                    attack=attack, eval_every=grid.eval_every)
                                slug = (f"{key}_{method}_{attack.label()}_"
                                        f"{agg.label()}_b{b}_g{gamma:.6g}_s{seed}")
                                runs.append(ResolvedRun(
                                    key, slug, cfg, attack.label(), agg.label(),
                                    str(batch_s), str(step_s)))
    slugs = [r.slug for r in runs]
    if len(set(slugs)) != len(slugs):
        dup = sorted({s for s in slugs if slugs.count(s) > 1})
        raise GridError(f"config slug collision: {dup[:3]}")
    return runs


@functools.lru_cache(maxsize=8)
def _load_objective(path: str, dim: int | None, sub: int | None,
                    sub_seed: int, l2: float | None) -> Objective:
    ds = load_libsvm(path, dim=dim)
    if sub is not None:
        ds = subsample(ds, sub, sub_seed)
    return make_logistic(ds, l2=l2)


def _execute_run(payload: dict) -> dict:
    """Run one resolved config and write its artifacts. Safe to call in a
    worker process: the objective is rebuilt (cached per process) and the
    reference solution read from the shared cache."""
    spec: DatasetSpec = payload["dataset_spec"]
    cfg: engine.RunConfig = payload["config"]
    obj = _load_objective(spec.path, spec.dim, spec.subsample,
                          spec.subsample_seed, spec.l2)
    fp = dataset_fingerprint(obj.dataset)
    ref = analysis.cached_reference(obj, payload["refcache"], fp,
                                    tol=payload["ref_tol"])
    run_dir = os.path.join(payload["output_dir"], payload["slug"])
    os.makedirs(run_dir, exist_ok=True)
    status = "ok"
    try:
        trace = engine.run(obj, cfg, ref)
    except Exception as e:  # config/numeric errors become summary rows
        return {"slug": payload["slug"], "status": f"error: {e}",
                "final_subopt": float("nan"), "final_dist2": float("nan"),
                "oracle_calls": 0, "elapsed_s": 0.0, "curve": []}
    if trace.aborted:
        status = "aborted"
    trace.to_csv(os.path.join(run_dir, "trace.csv"))
    x0_sigma2 = obj.gradient_variance(np.zeros(obj.dim))
    star_sigma2 = obj.gradient_variance(ref.x_star)
    meta = {
        "version": _VERSION,
        "dataset": {"name": obj.dataset.name, "path": spec.path,
                    "fingerprint": fp, "m": obj.m, "dim": obj.dim,
                    "feature_scaling": "none"},
        "constants": {"L": obj.L, "mu": obj.mu, "l2": obj.l2,
                      "gram_lambda_max": obj.gram_lambda_max()},
        "config": {"method": cfg.method, "gamma": cfg.gamma, "b": cfg.b,
                   "p": cfg.resolved_p(obj.m), "n": cfg.n, "K": cfg.K,
                   "byzantine_ids": list(cfg.byzantine_ids),
                   "aggregator": cfg.aggregator.to_dict(),
                   "attack": cfg.attack.to_dict(),
                   "master_seed": cfg.master_seed,
                   "eval_every": cfg.eval_every},
        "notes": {"byzantine_reference_switching":
                  "bf/lf workers switch references with the same p as honest",
                  "gradient_noise_sigma2": {"at_x0": x0_sigma2,
                                            "at_x_star": star_sigma2}},
        "reference": {"f_star": ref.f_star, "grad_norm": ref.grad_norm,
                      "solver_tol": ref.solver_tol},
        "status": status,
        "aborted": trace.aborted,
        "abort_reason": trace.abort_reason,
        "elapsed_s": trace.elapsed_s,
        "diagnostic_oracle_calls": trace.diagnostic_calls,
        "final": {"subopt": trace.final_subopt,
                  "dist2": trace.records[-1].dist2 if trace.records else None,
                  "oracle_calls": trace.records[-1].oracle_calls
                  if trace.records else 0},
    }
    with open(os.path.join(run_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    last = trace.records[-1]
    return {"slug": payload["slug"], "status": status,
            "final_subopt": trace.final_subopt, "final_dist2": last.dist2,
            "oracle_calls": last.oracle_calls, "elapsed_s": trace.elapsed_s,
            "curve": [(r.k, r.subopt) for r in trace.records]}


def _write_plots(output_dir: str, grid_runs: list[ResolvedRun],
                 results: dict[str, dict]) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = os.path.join(output_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    pairs: dict[tuple[str, str], dict[tuple, list]] = {}
    for r in grid_runs:
        series = pairs.setdefault((r.dataset, r.attack_label), {})
        skey = (r.config.method, r.batch_label, r.step_label, r.agg_label)
        series.setdefault(skey, []).append(results[r.slug]["curve"])
    written = []
    for (ds, attack), series in pairs.items():
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        plotted = False
        for (method, blabel, slabel, alabel), curves in sorted(series.items()):
            curves = [c for c in curves if c]
            if not curves:
                continue
            ks = [pt[0] for pt in curves[0]]
            npts = min(len(c) for c in curves)
            med = np.median(
                [[max(pt[1], 1e-16) for pt in c[:npts]] for c in curves], axis=0)
            ax.semilogy(ks[:npts], med,
                        label=f"{method} b={blabel} g={slabel} {alabel}")
            plotted = True
        if not plotted:
            plt.close(fig)
            continue
        ax.set_xlabel("round")
        ax.set_ylabel("f(x) - f*")
        ax.set_title(f"{ds} / {attack}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(plot_dir, f"{ds}_{attack}.svg")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def run_experiment(grid: ExperimentGrid, output_dir: str, jobs: int = 1,
                   seed_override: int | None = None) -> int:
    """Execute a grid. Returns the number of hard-errored runs (aborted
    divergence is a recorded outcome, not an error)."""
    if seed_override is not None:
        grid = replace(grid, seeds=[int(seed_override)])
    os.makedirs(output_dir, exist_ok=True)
    refcache = os.path.join(output_dir, "refcache")

    constants: dict[str, tuple[float, float, int]] = {}
    spec_by_key: dict[str, DatasetSpec] = {}
    for ds in grid.datasets:
        obj = _load_objective(ds.path, ds.dim, ds.subsample,
                              ds.subsample_seed, ds.l2)
        fp = dataset_fingerprint(obj.dataset)
        analysis.cached_reference(obj, refcache, fp, tol=grid.ref_tol)
        constants[ds.key()] = (obj.L, obj.mu, obj.m)
        spec_by_key[ds.key()] = ds

    runs = resolve_grid(grid, constants)
    payloads = [{"dataset_spec": spec_by_key[r.dataset], "config": r.config,
                 "slug": r.slug, "output_dir": output_dir,
                 "refcache": refcache, "ref_tol": grid.ref_tol}
                for r in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_execute_run, payloads))
    else:
        rows = [_execute_run(p) for p in payloads]
    results = {row["slug"]: row for row in rows}

    lines = ["slug,dataset,method,attack,aggregator,b,gamma,seed,status,"
             "final_subopt,final_dist2,oracle_calls,elapsed_s"]
    for r in runs:
        row = results[r.slug]
        lines.append(",".join([
            r.slug, r.dataset, r.config.method, r.attack_label, r.agg_label,
            str(r.config.b), repr(r.config.gamma), str(r.config.master_seed),
            row["status"].replace(",", ";"), repr(row["final_subopt"]),
            repr(row["final_dist2"]), str(row["oracle_calls"]),
            f"{row['elapsed_s']:.3f}"]))
    with open(os.path.join(output_dir, "summary.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    _write_plots(output_dir, runs, results)
    return sum(1 for row in rows if row["status"].startswith("error"))


# -- command line ---------------------------------------------------------------


def _default_output_dir(flag: str | None) -> str:
    return flag or os.environ.get(OUTPUT_DIR_ENV) or "runs"


def _cmd_run(args) -> int:
    grid = load_grid(args.grid)
    out = _default_output_dir(args.output_dir or grid.output_dir)
    failed = run_experiment(grid, out, jobs=args.jobs,
                            seed_override=args.seed_override)
    if failed:
        print(f"{failed} run(s) errored", file=sys.stderr)
        return 1
    return 0


def _cmd_solve_ref(args) -> int:
    l2 = None if args.l2 == "auto" else float(args.l2)
    obj = _load_objective(args.data, args.dim, args.subsample,
                          args.subsample_seed, l2)
    ref = analysis.solve_reference(obj, tol=args.tol)
    out = {"dataset": obj.dataset.name, "m": obj.m, "dim": obj.dim,
           "l2": obj.l2, "L": obj.L, "mu": obj.mu, "f_star": ref.f_star,
           "grad_norm": ref.grad_norm, "iterations": ref.iterations}
    print(json.dumps(out, indent=1))
    return 0


def _cmd_audit_agg(args) -> int:
    spec = parse_aggregator(args.aggregator)
    if spec.base == "krum" and spec.krum_byzantine_count is None:
        spec = replace(spec, krum_byzantine_count=args.byz)
    summary = monte_carlo_audit(spec, n_honest=args.honest, n_byz=args.byz,
                                dim=args.dim, scale=args.scale,
                                delta=args.delta, n_seeds=args.seeds,
                                master_seed=args.master_seed)
    print(json.dumps(summary, indent=1))
    return 0


def _cmd_bounds(args) -> int:
    rep = analysis.complexity_bounds(args.method, args.L, args.mu, args.m,
                                     args.n, args.b, args.c, args.delta,
                                     args.eps)
    print(json.dumps(asdict(rep), indent=1))
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="byzvr",
        description="Byzantine-robust variance-reduced optimization runs")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="execute an experiment grid")
    p_run.add_argument("grid")
    p_run.add_argument("--output-dir", default=None,
                       help=f"default: grid file value, then ${OUTPUT_DIR_ENV}, then ./runs")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--seed-override", type=int, default=None)
    p_run.set_defaults(fn=_cmd_run)

    p_ref = sub.add_parser("solve-ref", help="solve one reference solution")
    p_ref.add_argument("data")
    p_ref.add_argument("--l2", default="auto")
    p_ref.add_argument("--dim", type=int, default=None)
    p_ref.add_argument("--subsample", type=int, default=None)
    p_ref.add_argument("--subsample-seed", type=int, default=0)
    p_ref.add_argument("--tol", type=float, default=1e-12)
    p_ref.set_defaults(fn=_cmd_solve_ref)

    p_aud = sub.add_parser("audit-agg", help="Monte-Carlo robustness audit")
    p_aud.add_argument("--aggregator", default="gm+b2")
    p_aud.add_argument("--honest", type=int, default=13)
    p_aud.add_argument("--byz", type=int, default=3)
    p_aud.add_argument("--dim", type=int, default=10)
    p_aud.add_argument("--scale", type=float, default=1e6)
    p_aud.add_argument("--delta", type=float, default=3 / 16)
    p_aud.add_argument("--seeds", type=int, default=200)
    p_aud.add_argument("--master-seed", type=int, default=0)
    p_aud.set_defaults(fn=_cmd_audit_agg)

    p_bnd = sub.add_parser("bounds", help="evaluate complexity bounds")
    p_bnd.add_argument("--method", required=True,
                       choices=list(analysis.METHODS))
    p_bnd.add_argument("--L", type=float, required=True)
    p_bnd.add_argument("--mu", type=float, required=True)
    p_bnd.add_argument("--m", type=int, required=True)
    p_bnd.add_argument("--n", type=int, default=16)
    p_bnd.add_argument("--b", type=int, default=1)
    p_bnd.add_argument("--c", type=float, default=1.0)
    p_bnd.add_argument("--delta", type=float, default=0.0)
    p_bnd.add_argument("--eps", type=float, default=1e-3)
    p_bnd.set_defaults(fn=_cmd_bounds)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
