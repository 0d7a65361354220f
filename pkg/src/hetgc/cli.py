"""Command-line entry point: ``hetgc {allocate,design,run,verify}``.

Exit status is 0 on success, 1 when a verification check fails and 2 for
configuration or input errors.  Output goes to ``--out``, else the config's
``[output] dir``, else ``$HETGC_OUT``, else ``./hetgc-out``.
"""
import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bitalloc, verify
from .baselines import SchemeSpec, build_scheme
from .config import ExperimentConfig, load_config
from .design import balance_eta, design_residual_bound
from .errors import ConfigError, HetGCError
from .losses import calibrate_C, make_logistic, make_quadratic
from .sim import (
    STREAM_DESIGN,
    STREAM_LOSS,
    STREAM_PROFILES,
    AdamParams,
    TrainConfig,
    reference_min_loss,
    run_experiment,
    smooth_bound,
    step_size,
    stream_rng,
    strongly_convex_bound,
    uncoded_trajectory,
)
from .stragglers import format_profiles, profiles_from_p, sample_profiles

ENV_OUT = "HETGC_OUT"
DEFAULT_OUT = "hetgc-out"
ALLOCATE_SOLVERS = ("dp", "proposed", "greedy", "lagrangian", "equal")
RUN_COLUMNS = ("scheme", "iteration", "mean_loss", "se_loss", "mean_grad_sq", "mean_dist_sq", "cum_bits")
ALLOCATE_COLUMNS = ("solver", "Z_res", "F", "gap_to_DP", "wall_time_ms")
BOUNDED_KINDS = ("PROPOSED", "OSGC_EQUALBITS")


def fmt(x):
    """Six significant digits; empty for missing values."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def write_csv(path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def out_dir(args, cfg):
    for choice in (args.out, cfg.out_dir if cfg else None, os.environ.get(ENV_OUT)):
        if choice:
            return Path(choice)
    return Path(DEFAULT_OUT)


def profiles_for(cfg):
    if cfg.p is not None:
        return profiles_from_p(cfg.p)
    return sample_profiles(cfg.k, cfg.psi_min, cfg.psi_max, cfg.tau_th, stream_rng(cfg.seed, STREAM_PROFILES))


def resolve_eta(cfg, profiles, Z_res):
    if cfg.eta == "balance":
        k = len(profiles)
        return balance_eta(profiles, Z_res + 2 * k, k, cfg.l)
    return float(cfg.eta)


def make_loss(cfg):
    rng = stream_rng(cfg.seed, STREAM_LOSS)
    if cfg.loss == "logistic":
        return make_logistic(cfg.partitions, cfg.l, cfg.samples, rng, ridge=cfg.ridge)
    return make_quadratic(cfg.partitions, cfg.l, cfg.lam, rng, rows=cfg.rows, spread=cfg.spread,
                          diagonal=cfg.structure == "diagonal")


def cmd_allocate(args, cfg):
    profiles = profiles_for(cfg)
    rows = []
    for Z_res in cfg.budgets():
        eta = resolve_eta(cfg, profiles, Z_res)
        results = {}
        for name in ALLOCATE_SOLVERS:
            t0 = time.perf_counter()
            alloc = bitalloc.SOLVERS[name](profiles, cfg.l, Z_res, eta)
            results[name] = (alloc, 1e3 * (time.perf_counter() - t0))
        best = results["dp"][0].objective
        for name in ALLOCATE_SOLVERS:
            alloc, ms = results[name]
            gap = 0.0 if name == "dp" else (best - alloc.objective) / abs(best) if best else 0.0
            rows.append((name, int(Z_res), alloc.objective, gap, ms))
    path = out_dir(args, cfg) / "allocate.csv"
    write_csv(path, ALLOCATE_COLUMNS, rows)
    print(f"{'solver':<11} {'Z_res':>6} {'F':>12} {'gap_to_DP':>11} {'ms':>9}")
    for name, Z, F, gap, ms in rows:
        print(f"{name:<11} {Z:>6} {F:>12.6g} {gap:>11.3g} {ms:>9.3f}")
    print(f"wrote {path}")
    return 0


def cmd_design(args, cfg):
    profiles = profiles_for(cfg)
    Z_res = cfg.single_budget()
    name = cfg.schemes[0] if args.scheme else "proposed"
    spec = SchemeSpec.parse(name)
    if spec.kind == "IDEAL_SGD":
        raise ConfigError("ideal_sgd sends exact gradients and has no code design", cfg.path)
    k = len(profiles)
    eta = resolve_eta(cfg, profiles, Z_res)
    scheme = build_scheme(spec, profiles, cfg.partitions, cfg.l, Z_res + 2 * k,
                          stream_rng(cfg.seed, STREAM_DESIGN), eta=eta, solver=cfg.solver)
    d = scheme.design
    print(f"scheme {scheme.name}: k={d.k} n={d.n} l={cfg.l} Z_tot={Z_res + 2 * k} eta={eta:.6g}")
    print("workers (id p psi):")
    print(format_profiles(profiles).rstrip())
    print("bits z: " + " ".join(str(int(v)) for v in scheme.z))
    print("Y: " + " ".join(fmt(v) for v in d.Y))
    coo = d.alpha.tocoo()
    print(f"alpha nonzeros ({coo.nnz}):")
    for i, j, v in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
        print(f"  worker {i} partition {j}: {v:.6f}")
    print(f"load d = {d.avg_load:.6f}")
    print("effective column sums: " + " ".join(f"{v:.6f}" for v in d.effective_column_sums()))
    print(f"residual bound per unit C: {design_residual_bound(d, 1.0):.6g}")
    path = out_dir(args, cfg) / "design.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    d.save(path)
    print(f"wrote {path}")
    return 0


def _train_config(cfg, track):
    adam = AdamParams(cfg.adam_lambda, cfg.beta1, cfg.beta2, cfg.eps, cfg.two_track)
    return TrainConfig(iterations=cfg.iterations, lr_schedule=cfg.schedule, lr=cfg.lr,
                       optimizer=cfg.optimizer, batch_size=cfg.batch_size, adam=adam,
                       trials=cfg.trials, seed=cfg.seed, track_C=track)


def _tracks_bounds(cfg, spec):
    return (spec.kind in BOUNDED_KINDS and cfg.optimizer == "gd"
            and cfg.schedule in ("inv_lambda_t", "const_sqrt", "decay_sqrt"))


def _bound_checks(cfg, loss, scheme, series, train):
    """Closed-form bound comparisons; None where a bound does not apply."""
    checks = {"strongly_convex": None, "smooth": None}
    if not _tracks_bounds(cfg, scheme.spec):
        return checks
    T = cfg.iterations
    n = cfg.partitions
    beta0 = np.zeros(loss.dim)
    lam = loss.strong_convexity
    warmup = uncoded_trajectory(loss, beta0, min(T, 200), lambda u: step_size(train, u, lam))
    C = max(calibrate_C(loss, warmup), 1.1 * series.meta["max_partition_grad_sq"])
    c = scheme.design.c
    if cfg.schedule == "inv_lambda_t" and loss.optimum is not None:
        checks["strongly_convex"] = bool(series.mean("dist_sq")[T] <= strongly_convex_bound(n, C, lam, T, c))
    elif cfg.schedule in ("const_sqrt", "decay_sqrt"):
        L_star = reference_min_loss(loss, beta0)
        gap = float(loss.loss(beta0)[0]) - L_star
        bound = smooth_bound(cfg.schedule, gap, loss.smoothness, n, C, c, T)
        checks["smooth"] = bool(series.running_avg_grad_sq()[T] <= bound)
    return checks


def cmd_run(args, cfg):
    profiles = profiles_for(cfg)
    Z_res = cfg.single_budget()
    k = len(profiles)
    eta = resolve_eta(cfg, profiles, Z_res)
    loss = make_loss(cfg)
    rows, summary = [], {}
    for name in cfg.schemes:
        spec = SchemeSpec.parse(name)
        scheme = build_scheme(spec, profiles, cfg.partitions, cfg.l, Z_res + 2 * k,
                              stream_rng(cfg.seed, STREAM_DESIGN), eta=eta, solver=cfg.solver)
        train = _train_config(cfg, _tracks_bounds(cfg, spec))
        series = run_experiment(train, loss, scheme)
        loss_mean, loss_se = series.mean("loss"), series.se("loss")
        grad_sq = series.mean("grad_sq")
        dist = series.mean("dist_sq") if series.dist_sq is not None else None
        cum = series.cum_bits()
        for t in range(cfg.iterations + 1):
            rows.append((scheme.name, t, loss_mean[t], loss_se[t], grad_sq[t],
                         None if dist is None else dist[t], cum[t]))
        summary[scheme.name] = {
            "final_mean_loss": float(loss_mean[-1]),
            "final_se_loss": float(loss_se[-1]),
            "total_bits": float(cum[-1]),
            "bits_per_worker": None if scheme.z is None else [int(v) for v in scheme.z],
            "bound_checks": _bound_checks(cfg, loss, scheme, series, train),
        }
        print(f"{scheme.name:<18} final loss {loss_mean[-1]:.6g} (se {loss_se[-1]:.3g}), bits {cum[-1]:.6g}")
    out = out_dir(args, cfg)
    write_csv(out / "run.csv", RUN_COLUMNS, rows)
    doc = {"name": cfg.name, "seed": cfg.seed, "Z_res": int(Z_res), "eta": eta, "l": cfg.l,
           "iterations": cfg.iterations, "trials": cfg.trials, "schemes": summary}
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'run.csv'} and {out / 'summary.json'}")
    return 0


def cmd_verify(args, cfg):
    seed = cfg.seed
    checks = verify.CHECKS
    if args.only:
        wanted = set(args.only)
        names = {c.__name__.removeprefix("check_"): c for c in checks}
        unknown = wanted - set(names)
        if unknown:
            raise ConfigError(f"unknown check(s): {', '.join(sorted(unknown))}; choose from {', '.join(names)}")
        checks = tuple(c for n, c in names.items() if n in wanted)
    failed = 0
    for check in checks:
        result = check(seed)
        print(result.line(), flush=True)
        failed += not result.passed
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


COMMANDS = {"allocate": cmd_allocate, "design": cmd_design, "run": cmd_run, "verify": cmd_verify}


def build_parser():
    parser = argparse.ArgumentParser(prog="hetgc", description="Quantized gradient coding with heterogeneous stragglers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("allocate", "compare bit-allocation solvers over a budget sweep"),
                            ("design", "build and dump a code design"),
                            ("run", "simulate training for each configured scheme"),
                            ("verify", "run the acceptance checks")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", required=name != "verify")
        p.add_argument("--seed", type=int, metavar="U64", help="override the master seed")
        p.add_argument("--out", metavar="DIR", help=f"output directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
        p.add_argument("--scheme", metavar="NAME", help="run or design only this scheme")
        p.add_argument("--eta", metavar="{1|balance|FLOAT}", help="override the cost balancing factor")
        if name == "verify":
            p.add_argument("--only", nargs="+", metavar="CHECK", help="run only the named checks")
    return parser


def apply_overrides(cfg, args):
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.scheme:
        try:
            SchemeSpec.parse(args.scheme)
        except HetGCError as exc:
            raise ConfigError(f"--scheme: {exc}") from None
        cfg.schemes = [args.scheme]
    if args.eta is not None:
        if args.eta != "balance":
            try:
                if float(args.eta) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("--eta must be 1, balance or a positive number") from None
        cfg.eta = args.eta
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
        cfg = apply_overrides(cfg, args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"hetgc: config error: {exc}", file=sys.stderr)
        return 2
    except HetGCError as exc:
        print(f"hetgc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
