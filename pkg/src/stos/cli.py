"""Command-line front end: generate, solve, metrics, compare.

Runs are driven by a JSON config file; command-line flags override config
values. Every solve writes the fully resolved configuration (all defaults
materialized, including an auto-selected step size) into summary.json so
the run can be reproduced exactly.

Exit codes: 0 converged (or command succeeded), 2 epoch budget exhausted
before the residual test, 1 error.
"""

import argparse
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import ESTIMATOR_NAMES, EstimatorKind
from .metrics import (default_drvh_edges, default_dvh_edges, dose_rate_vector,
                      dose_vector, drvh_curve, dvh_curve, metrics_report)
from .problem import (SchemaError, generate_phantom, load_problem,
                      load_vector, save_problem, save_vector)
from .solver import SolverConfig, objective_value, resolve_gamma, run

__all__ = ["main"]

PHANTOM_KEYS = {
    "seed", "n_voxels", "n_spots", "n_angles", "target_radius_frac",
    "roi_margin", "n_roi", "beam_span_frac", "beam_sigma_frac",
    "curvature_scale", "target_weight", "objective_boost", "mu_d_frac",
    "alpha", "t_min", "mu_dr",
}

SOLVE_KEYS = {
    "problem_dir", "phantom", "estimator", "estimators", "gamma", "lambda",
    "mmu_mode", "max_epochs", "residual_tol", "seed", "record_stride",
    "record_energy", "output_dir",
}


class ConfigError(ValueError):
    """Bad run configuration; message names the offending key."""


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for key in cfg:
        if key not in SOLVE_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def _estimator_kind(spec):
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError("estimator must be a name or an object with 'name'")
    extra = set(spec) - {"name", "batch_size", "sarah_p", "svrg_inner_m"}
    if extra:
        raise ConfigError(f"unknown estimator key {sorted(extra)[0]!r}")
    try:
        return EstimatorKind(
            name=spec["name"],
            batch_size=int(spec.get("batch_size", 1)),
            sarah_p=spec.get("sarah_p"),
            svrg_inner_m=spec.get("svrg_inner_m"),
        )
    except ValueError as e:
        raise ConfigError(f"estimator: {e}") from None


def _resolve_problem(cfg, args):
    problem_dir = getattr(args, "problem_dir", None) or cfg.get("problem_dir")
    phantom = cfg.get("phantom")
    if problem_dir is not None and phantom is not None:
        raise ConfigError("give exactly one of 'problem_dir' and 'phantom'")
    if problem_dir is not None:
        return load_problem(problem_dir), {"problem_dir": str(problem_dir)}
    phantom = dict(phantom or {})
    for key in phantom:
        if key not in PHANTOM_KEYS:
            raise ConfigError(f"unknown phantom key {key!r}")
    if getattr(args, "seed", None) is not None:
        phantom["seed"] = args.seed
    problem = generate_phantom(**phantom)
    echo = {k: phantom[k] for k in sorted(phantom)}
    return problem, {"phantom": echo}


def _solver_config(cfg, args, estimator):
    def pick(flag, key, default):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        return cfg.get(key, default)

    try:
        return SolverConfig(
            gamma=pick("gamma", "gamma", None),
            max_epochs=float(pick("epochs", "max_epochs", 50.0)),
            residual_tol=float(cfg.get("residual_tol", 1e-6)),
            estimator=estimator,
            seed=int(pick("seed", "seed", 0)),
            c1=0.5,
            record_energy=bool(cfg.get("record_energy", True)),
            record_stride=int(cfg.get("record_stride", 1)),
            lam=float(cfg.get("lambda", 1.0)),
            mmu_mode=str(cfg.get("mmu_mode", "exact")),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _echo_config(config, problem_echo, problem):
    est = config.estimator
    return {
        **problem_echo,
        "estimator": {
            "name": est.name,
            "batch_size": est.batch_size,
            "sarah_p": est.sarah_p,
            "svrg_inner_m": est.svrg_inner_m,
        },
        "gamma": resolve_gamma(problem, config),
        "lambda": config.lam,
        "mmu_mode": config.mmu_mode,
        "max_epochs": config.max_epochs,
        "residual_tol": config.residual_tol,
        "seed": config.seed,
        "c1": config.c1,
        "record_stride": config.record_stride,
        "record_energy": config.record_energy,
    }


def _write_atomic(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path, obj):
    _write_atomic(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _history_csv(history):
    lines = ["iter,epoch,objective,phi,residual,stationarity,grad_evals"]
    for r in history:
        lines.append(f"{r.iter},{r.epoch!r},{r.objective!r},{r.phi!r},"
                     f"{r.residual!r},{r.stationarity!r},{r.grad_evals}")
    return "\n".join(lines) + "\n"


def _curve_csv(curve):
    lines = ["edge,volume_fraction"]
    for e, f in zip(curve.bin_edges, curve.volume_fraction):
        lines.append(f"{float(e)!r},{float(f)!r}")
    return "\n".join(lines) + "\n"


def _safe_name(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name).lower()


def cmd_generate(args):
    cfg = _load_config(args.config)
    extra = set(cfg) - {"phantom", "output_dir"}
    if extra:
        raise ConfigError(f"unknown config key {sorted(extra)[0]!r} for generate")
    phantom = dict(cfg.get("phantom", {}))
    if args.seed is not None:
        phantom["seed"] = args.seed
    for key in phantom:
        if key not in PHANTOM_KEYS:
            raise ConfigError(f"unknown phantom key {key!r}")
    out = args.out or cfg.get("output_dir")
    if out is None:
        raise ConfigError("generate needs an output directory (--out)")
    problem = generate_phantom(**phantom)
    save_problem(problem, out)
    nnz = problem.a_matrix.nnz
    print(f"wrote {out}: A {problem.n_voxels}x{problem.n_spots} ({nnz} nnz), "
          f"B {problem.b_roi.shape[0]}x{problem.b_roi.shape[1]}, "
          f"structures: {', '.join(f'{k}({v.size})' for k, v in problem.structures.items())}")
    return 0


def cmd_solve(args):
    cfg = _load_config(args.config)
    if "estimators" in cfg:
        raise ConfigError("'estimators' is a compare key; solve takes 'estimator'")
    problem, problem_echo = _resolve_problem(cfg, args)
    est_spec = args.estimator or cfg.get("estimator", "full")
    if args.estimator and isinstance(cfg.get("estimator"), dict):
        est_spec = {**cfg["estimator"], "name": args.estimator}
    if args.batch_size is not None:
        est_spec = ({"name": est_spec} if isinstance(est_spec, str) else dict(est_spec))
        est_spec["batch_size"] = args.batch_size
    estimator = _estimator_kind(est_spec)
    config = _solver_config(cfg, args, estimator)
    out = Path(args.out or cfg.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    final, history = run(problem, config)
    wall_s = time.perf_counter() - t0
    converged = final.residual <= config.residual_tol * (1.0 + float(np.linalg.norm(final.x)))

    save_vector(final.x, out / "final_x.vec")
    _write_atomic(out / "history.csv", _history_csv(history))
    report = metrics_report(problem, final.x)
    summary = {
        "version": __version__,
        "config": _echo_config(config, problem_echo, problem),
        "converged": converged,
        "iterations": final.iter,
        "epochs": final.grad_evals / problem.n_samples,
        "grad_evals": final.grad_evals,
        "final_objective": objective_value(problem, final.z),
        "final_residual": final.residual,
        "metrics": report.as_dict(),
        "wall_time_s": wall_s,
    }
    _write_json(out / "summary.json", summary)
    print(f"{'converged' if converged else 'epoch budget reached'} after "
          f"{final.iter} iterations ({summary['epochs']:.2f} epochs), "
          f"objective {summary['final_objective']:.6g}")
    return 0 if converged else 2


def cmd_metrics(args):
    problem = load_problem(args.problem_dir)
    x = load_vector(args.x_file)
    if x.shape[0] != problem.n_spots:
        raise SchemaError(
            f"{args.x_file}: expected {problem.n_spots} weights, got {x.shape[0]}")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)

    names = {}
    for name in problem.structures:
        safe = _safe_name(name)
        if safe in names:
            raise SchemaError(f"structure names collide after sanitizing: "
                              f"{names[safe]!r} vs {name!r}")
        names[safe] = name

    report = metrics_report(problem, x)
    _write_json(out / "metrics.json", report.as_dict())
    dose = dose_vector(problem, x)
    edges = default_dvh_edges(problem.prescription)
    for safe, name in names.items():
        curve = dvh_curve(dose, problem.structures[name], edges)
        _write_atomic(out / f"dvh_{safe}.csv", _curve_csv(curve))
    rates = dose_rate_vector(problem, x)
    roi_local = np.arange(problem.b_roi.shape[0])
    curve = drvh_curve(rates, roi_local, default_drvh_edges(problem.mu_dr))
    _write_atomic(out / "drvh_roi.csv", _curve_csv(curve))
    print(f"wrote metrics for {args.x_file}: ci={report.ci:.4f} "
          f"p_d={report.p_d:.1f}% p_dr={report.p_dr:.1f}%")
    return 0


def cmd_compare(args):
    cfg = _load_config(args.config)
    specs = cfg.get("estimators")
    if not specs or not isinstance(specs, list) or len(specs) < 2:
        raise ConfigError("compare needs 'estimators': a list of at least 2")
    problem, problem_echo = _resolve_problem(cfg, args)
    out = Path(args.out or cfg.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)

    kinds = [_estimator_kind(s) for s in specs]
    labels = []
    for k in kinds:
        base = k.name if k.name == "full" else f"{k.name}_b{k.batch_size}"
        label = base
        i = 2
        while label in labels:
            label = f"{base}#{i}"
            i += 1
        labels.append(label)

    base_obj = objective_value(problem, np.zeros(problem.n_spots))
    epochs = int(float(cfg.get("max_epochs", 30.0)))
    grid = list(range(epochs + 1))
    columns = {}
    results = []
    for label, kind in zip(labels, kinds):
        config = _solver_config(cfg, args, kind)
        try:
            final, history = run(problem, config)
        except Exception as e:  # noqa: BLE001 - others continue per contract
            results.append({"estimator": label, "error": str(e)})
            print(f"{label}: failed: {e}", file=sys.stderr)
            continue
        series = []
        j = 0
        cur = base_obj
        for e in grid:
            while j < len(history) and history[j].epoch <= e:
                cur = history[j].objective
                j += 1
            series.append(cur)
        columns[label] = series
        results.append({
            "estimator": label,
            "final_objective": history[-1].objective if history else base_obj,
            "epochs": final.grad_evals / problem.n_samples,
            "iterations": final.iter,
            "error": None,
        })

    ok = [r for r in results if r.get("error") is None]
    ok.sort(key=lambda r: r["final_objective"])
    for rank, r in enumerate(ok, start=1):
        r["rank"] = rank

    lines = ["epoch," + ",".join(l for l in labels if l in columns)]
    for i, e in enumerate(grid):
        row = [str(e)] + [f"{columns[l][i]!r}" for l in labels if l in columns]
        lines.append(",".join(row))
    _write_atomic(out / "compare.csv", "\n".join(lines) + "\n")
    _write_json(out / "ranking.json", {"results": results})
    for r in ok:
        print(f"#{r['rank']} {r['estimator']}: objective {r['final_objective']:.6g}")
    failed = len(results) - len(ok)
    return 1 if failed else 0


def _build_parser():
    p = argparse.ArgumentParser(
        prog="stos",
        description="Splitting solver for dose/dose-rate constrained plan optimization")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="random seed override")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("generate", help="write a synthetic phantom problem directory")
    common(g)
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("solve", help="run the solver and write history/summary")
    common(s)
    s.add_argument("--estimator",
                   help=f"gradient estimator ({', '.join(ESTIMATOR_NAMES)})")
    s.add_argument("--batch-size", type=int, help="mini-batch size")
    s.add_argument("--gamma", type=float, help="step size (default: auto)")
    s.add_argument("--epochs", type=float, help="epoch budget")
    s.set_defaults(fn=cmd_solve)

    m = sub.add_parser("metrics", help="compute plan metrics for a weight vector")
    m.add_argument("problem_dir", help="problem directory")
    m.add_argument("x_file", help="weight vector, one value per line")
    m.add_argument("--out", help="output directory")
    m.set_defaults(fn=cmd_metrics)

    c = sub.add_parser("compare", help="run several estimators on a shared budget")
    common(c)
    c.add_argument("--gamma", type=float, help="step size (default: auto)")
    c.add_argument("--epochs", type=float, help="epoch budget")
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SchemaError, ValueError, FileNotFoundError,
            FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
