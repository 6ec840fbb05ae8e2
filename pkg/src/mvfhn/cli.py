"""Command-line surface tying the modules into reproducible experiments.

Commands: check, simulate, picard, pullback, w2.  Global flags --config,
--seed, --out, --threads; env overrides prefixed MVFHN_.  Exit codes:
0 success, 1 usage/config error, 2 assumption failure, 3 non-convergence,
4 attraction-class violation.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import model, pullback as PB, splitting as SP
from .config import RunConfig, RunManifest
from .errors import ConfigError, MvfhnError
from .fields import SpatialGrid
from .integrator import (SchemeConfig, make_initial_ensemble,
                         picard_fixed_point, simulate)
from .measures import (EXACT_ATOM_CAP, distance_line, load_law,
                       wasserstein2_entropic, wasserstein2_exact)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ASSUMPTION = 2
EXIT_NONCONVERGED = 3
EXIT_CLASS_VIOLATION = 4


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="mvfhn",
        description="distribution-dependent stochastic FitzHugh-Nagumo lab")
    ap.add_argument("--config", help="path to a key = value config file")
    ap.add_argument("--seed", type=int, help="master seed override")
    ap.add_argument("--out", help="output directory override")
    ap.add_argument("--threads", type=int, help="worker threads override")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("check", help="verify structural assumptions and the "
                                 "dissipativity margin")
    sub.add_parser("simulate", help="run the ensemble scheme with monitors")
    sub.add_parser("picard", help="run the law fixed-point iteration")
    sub.add_parser("pullback", help="run the pullback convergence study")
    w2 = sub.add_parser("w2", help="transport distance between two "
                                   "serialized laws")
    w2.add_argument("law_a")
    w2.add_argument("law_b")
    return ap


def _resolve_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_env()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("output.dir", args.out)
    if args.threads is not None:
        cfg.set("threads", args.threads)
    return cfg


def _coeffs_from(cfg: RunConfig):
    if cfg["model.p"] != 4.0:
        raise ConfigError("the shipped instance fixes model.p = 4")
    lam = cfg["model.lambda"]
    lam_override = None if lam == "auto" else float(lam)
    return model.canonical_instance(
        epsilon_couple=cfg["model.eps_couple"], K=cfg["model.K"],
        omega=cfg["model.omega"], eta=cfg["model.eta"],
        margin_target=cfg["model.margin_target"],
        lambda_override=lam_override,
        auto_scale=cfg["model.auto_scale_lambda"])


def _grid_from(cfg: RunConfig):
    return SpatialGrid(cfg["grid.dimension"], cfg["grid.half_width"],
                       cfg["grid.points"])


def _scheme_from(cfg: RunConfig):
    return SchemeConfig(dt=cfg["scheme.dt"],
                        ensemble_size=cfg["scheme.ensemble"],
                        scheme=cfg["scheme.kind"],
                        checkpoint_stride=cfg["scheme.checkpoint_stride"],
                        threads=cfg["threads"],
                        track_w2=cfg["scheme.track_w2"])


def cmd_check(cfg: RunConfig) -> int:
    out_dir = cfg["output.dir"]
    manifest = RunManifest(cfg, out_dir)
    manifest.start()
    coeffs = _coeffs_from(cfg)
    grid = _grid_from(cfg)
    manifest.add_truncation_diagnostics(coeffs, grid)
    L = cfg["grid.half_width"]
    sampler = dict(t_range=(0.0, 10.0), x_range=(-L, L), u_range=(-5.0, 5.0),
                   m2_range=(0.0, 25.0), n_samples=cfg["check.samples"])
    report = model.check_assumptions(coeffs, sampler, seed=cfg["seed"])
    report.to_csv(os.path.join(out_dir, "assumptions.csv"))
    margin = model.dissipativity_margin(coeffs, cfg["model.eta"])
    ok = report.passed(cfg["check.tolerance"]) and margin > 0
    manifest.finalize(status="completed" if ok else "failed",
                      dissipativity_margin=f"{margin:.17g}",
                      assumptions_worst=f"{report.worst():.17g}")
    print(f"assumption worst violation: {report.worst():.3e}")
    print(f"dissipativity margin: {margin:.6g}")
    return EXIT_OK if ok else EXIT_ASSUMPTION


def cmd_simulate(cfg: RunConfig) -> int:
    out_dir = cfg["output.dir"]
    manifest = RunManifest(cfg, out_dir)
    manifest.start()
    coeffs = _coeffs_from(cfg)
    grid = _grid_from(cfg)
    manifest.add_truncation_diagnostics(coeffs, grid)
    manifest.add(dissipativity_margin="{:.17g}".format(
        model.dissipativity_margin(coeffs, cfg["model.eta"])))
    scheme = _scheme_from(cfg)
    init = make_initial_ensemble(cfg["scheme.initial"], grid,
                                 scheme.ensemble_size, cfg["seed"],
                                 scale=cfg["scheme.initial_scale"],
                                 dt=scheme.dt)
    res = simulate(init, coeffs, scheme, cfg["scheme.t_end"], cfg["seed"])
    res.series.to_csv(os.path.join(out_dir, "series.csv"))
    eta = cfg["model.eta"]
    reports = []
    if len(res.series) >= 10:
        i2 = model.forcing_integrals(coeffs, cfg["scheme.t_end"], eta)["I2"]
        reports = [SP.energy_monitor(res.series, eta, i2=i2),
                   SP.fourth_moment_monitor(res.series),
                   SP.tail_monitor(res.series, cfg["pullback.tail_gate"]),
                   SP.h1_monitor(res.series)]
        SP.append_estimates_csv(os.path.join(out_dir, "estimates.csv"),
                                reports)
    manifest.finalize(monitors=",".join(
        f"{r.name}:{'pass' if r.passed else 'fail'}" for r in reports))
    print(f"simulated to t={res.final.time:g}; "
          f"{len(res.series)} checkpoints written")
    return EXIT_OK


def cmd_picard(cfg: RunConfig) -> int:
    out_dir = cfg["output.dir"]
    manifest = RunManifest(cfg, out_dir)
    manifest.start()
    coeffs = _coeffs_from(cfg)
    grid = _grid_from(cfg)
    manifest.add_truncation_diagnostics(coeffs, grid)
    scheme = _scheme_from(cfg)
    init = make_initial_ensemble(cfg["scheme.initial"], grid,
                                 scheme.ensemble_size, cfg["seed"],
                                 scale=cfg["scheme.initial_scale"],
                                 dt=scheme.dt)
    out = picard_fixed_point(init, coeffs, scheme, cfg["picard.T"],
                             tol=cfg["picard.tol"],
                             max_iters=cfg["picard.max_iters"],
                             eta_picard=cfg["picard.eta"],
                             master_seed=cfg["seed"])
    with open(os.path.join(out_dir, "ratios.csv"), "w") as fh:
        fh.write("iteration,distance,ratio\n")
        for i, d in enumerate(out["distances"]):
            ratio = out["ratios"][i - 1] if i >= 1 else float("nan")
            fh.write(f"{i},{d:.17g},{ratio:.17g}\n")
    refinements = max(out["n_apply"] - 1, 1)
    manifest.finalize(status="completed" if out["converged"] else "failed",
                      converged=out["converged"], iterations=refinements)
    print(f"law iteration: {'converged' if out['converged'] else 'NOT converged'} "
          f"after {refinements} refinement(s); "
          f"ratios {['%.3f' % r for r in out['ratios']]}")
    return EXIT_OK if out["converged"] else EXIT_NONCONVERGED


def cmd_pullback(cfg: RunConfig) -> int:
    out_dir = cfg["output.dir"]
    manifest = RunManifest(cfg, out_dir)
    manifest.start()
    coeffs = _coeffs_from(cfg)
    grid = _grid_from(cfg)
    manifest.add_truncation_diagnostics(coeffs, grid)
    depths = cfg["pullback.depths"]
    if len(depths) < 2:
        raise ConfigError("pullback needs at least 2 depths for distances")
    scheme = _scheme_from(cfg)
    schedule = PB.PullbackSchedule(target_time=cfg["pullback.tau"],
                                   depths=depths,
                                   family=cfg["pullback.family"],
                                   base_scale=cfg["pullback.base_scale"],
                                   eta=cfg["model.eta"])
    report = PB.pullback_run(schedule, coeffs, scheme, cfg["seed"], grid,
                             n_floor_replicates=cfg["pullback.floor_replicates"],
                             keep_laws=True)
    report.to_csv(os.path.join(out_dir, "pullback.csv"))
    laws = report.details.get("laws", [])
    tight = None
    if len(laws) >= 2:
        tight = PB.tightness_diagnostic(laws, report.absorbing_radius)
    ok_records = [r for r in report.records if not r.failed]
    w2s = [r.w2_to_previous_depth for r in ok_records[1:]]
    floor = report.mc_floor
    trend_ok = all(w2s[i + 1] <= max(w2s[i], 2.0 * floor)
                   for i in range(len(w2s) - 1)) if len(w2s) >= 2 \
        else bool(w2s and w2s[0] <= 2.0 * floor)
    final_ok = bool(w2s) and w2s[-1] <= 2.0 * floor
    entry_ok = report.entry_depth is not None and report.membership_monotone
    manifest.finalize(
        status="completed",
        entry_depth=report.entry_depth, mc_floor=f"{floor:.17g}",
        class_violation=report.class_violation,
        cauchy_trend_ok=trend_ok and final_ok,
        tightness_certificate="" if tight is None
        else f"{tight['split_certificate']:.17g}")
    print(f"pullback: entry depth {report.entry_depth}, floor {floor:.3e}, "
          f"class violation {report.class_violation}")
    if report.class_violation:
        return EXIT_CLASS_VIOLATION
    return EXIT_OK if (trend_ok and final_ok and entry_ok) \
        else EXIT_NONCONVERGED


def cmd_w2(cfg: RunConfig, path_a, path_b) -> int:
    try:
        law_a = load_law(path_a)
        law_b = load_law(path_b)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if max(law_a.n_atoms, law_b.n_atoms) <= EXACT_ATOM_CAP:
        value = wasserstein2_exact(law_a, law_b, threads=cfg["threads"])
        line = distance_line("w2_exact", value, "ok")
    else:
        value, converged = wasserstein2_entropic(law_a, law_b,
                                                 threads=cfg["threads"])
        line = distance_line("w2_entropic", value,
                             "ok" if converged else "not_converged")
    sys.stdout.write(line)
    return EXIT_OK


def main(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        cfg = _resolve_config(args)
        if args.command == "check":
            return cmd_check(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "picard":
            return cmd_picard(cfg)
        if args.command == "pullback":
            return cmd_pullback(cfg)
        if args.command == "w2":
            return cmd_w2(cfg, args.law_a, args.law_b)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MvfhnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION


if __name__ == "__main__":
    sys.exit(main())
