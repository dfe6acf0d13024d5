"""``cmoe`` command line: simulate, fit, sweep, rates, check-ident.

Exit codes: 0 success, 2 validation error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import InputError
from .estimator import em_fit
from .experiments import (RATE_METRICS, fit_rates, read_csv, run_sweep, write_outputs,
                          emit_rates)
from .identifiability import (default_probes, distinguishability_check,
                              strong_identifiability_check)
from .model import GAUSSIAN, LAPLACE, ExpertMeanKind, ModelSpec, PretrainedSpec
from .sampler import load_csv, load_npz, make_truth, sample, save_csv, save_npz

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3
SCENARIO_CHOICES = ("a", "b1", "b2")
EXPERT_CHOICES = ("tanh", "relu", "sigmoid", "gelu", "affine")


def _save_dataset(data, path):
    if str(path).endswith(".npz"):
        save_npz(data, path)
    else:
        save_csv(data, path)


def _load_dataset(path):
    return load_npz(path) if str(path).endswith(".npz") else load_csv(path)


def cmd_simulate(args) -> int:
    conf = cfgmod.merge(cfgmod.load(args.config), "scenario",
                        {"tag": args.scenario, "d": args.d})
    scenario = cfgmod.scenario_from(conf)
    spec, truth = make_truth(scenario, args.n)
    data = sample(spec, truth, args.n, args.seed, scenario=scenario.tag.value)
    _save_dataset(data, args.out)
    print(f"wrote {data.n} rows (d={data.d}, scenario={scenario.tag.value}, "
          f"seed={args.seed}) to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    data = _load_dataset(args.data)
    tag = args.scenario or data.scenario
    if not tag:
        raise InputError("dataset carries no scenario tag; pass --scenario")
    conf = cfgmod.merge(cfgmod.load(args.config), "scenario", {"tag": tag, "d": data.d})
    scenario = cfgmod.scenario_from(conf)
    spec, truth = make_truth(scenario, data.n)
    em = cfgmod.em_from(conf)
    seed = data.seed if args.seed is None else args.seed
    fit = em_fit(spec, data, truth, em, seed)
    Path(args.out).write_text(fit.to_json() + "\n")
    print(f"converged={fit.converged} iterations={fit.iterations} "
          f"loglik={fit.loglik_trace.max():.6f} -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    overrides = {
        "trials": args.trials, "n_min": args.n_min, "n_max": args.n_max,
        "n_points": args.n_points, "base_seed": args.base_seed, "threads": args.threads,
        "compute_hellinger": args.hellinger, "aggregate": args.aggregate,
        "record_timing": args.record_timing, "preset": args.preset,
    }
    if args.pooled:
        overrides["pooled"] = True
    conf = cfgmod.merge(cfgmod.load(args.config), "sweep", overrides)
    conf = cfgmod.merge(conf, "scenario", {"tag": args.scenario})
    if args.n_grid:
        conf["sweep"]["n_grid"] = [int(v) for v in args.n_grid.split(",")]
    cfg, fit_opts = cfgmod.sweep_from(conf)
    records = run_sweep(cfg)
    rates = write_outputs(records, args.out_dir, **fit_opts)
    for metric, fit in rates.items():
        print(f"{metric:12s} slope={fit['slope']:+.3f} r2={fit['r2']:.3f}")
    return EXIT_OK


def cmd_rates(args) -> int:
    src = Path(args.input)
    records = read_csv(src / "records.csv" if src.is_dir() else src)
    metrics = RATE_METRICS if args.metric == "all" else tuple(args.metric.split(","))
    unknown = set(metrics) - set(RATE_METRICS)
    if unknown:
        raise InputError(f"unknown metrics {sorted(unknown)}")
    rates = fit_rates(records, metrics, aggregate=args.aggregate, pooled=args.pooled)
    if args.out:
        emit_rates(rates, args.out)
    else:
        print(json.dumps(rates, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_check_ident(args) -> int:
    kind = ExpertMeanKind.parse(args.expert)
    d = args.d
    rng = np.random.Generator(np.random.Philox(args.seed))
    x = rng.standard_normal((args.samples, d))
    beta = rng.standard_normal(d) / np.sqrt(d)
    eta = rng.standard_normal(kind.q(d)) / np.sqrt(d)
    verdicts = strong_identifiability_check(kind, beta, eta, x, args.threshold)

    eta0 = np.zeros(kind.q(d))
    eta0[0] = 1.0
    family = LAPLACE if args.pretrained == "laplace" else GAUSSIAN
    spec = ModelSpec(d, PretrainedSpec(family, kind, eta0, 1e-3), kind)
    verdicts.append(distinguishability_check(
        spec, default_probes(spec), x[:args.dist_samples], threshold=args.threshold))

    print(f"{'condition':20s} {'min_sigma':>12s} {'threshold':>10s}  pass")
    for v in verdicts:
        print(f"{v.condition.value:20s} {v.min_singular_value:12.4e} "
              f"{v.threshold:10.1e}  {'yes' if v.passed else 'NO'}")
    if args.strict and not all(v.passed for v in verdicts):
        return 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmoe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic dataset")
    s.add_argument("--scenario", choices=SCENARIO_CHOICES, default=None)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--d", type=int, default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True, help=".csv or .npz")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="EM fit of one dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--config", default=None)
    f.add_argument("--scenario", choices=SCENARIO_CHOICES, default=None,
                   help="defaults to the tag stored with the data")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    w = sub.add_parser("sweep", help="run a convergence-rate sweep")
    w.add_argument("--config", default=None)
    w.add_argument("--out-dir", required=True)
    w.add_argument("--scenario", choices=SCENARIO_CHOICES, default=None)
    w.add_argument("--preset", choices=("desk",), default=None)
    w.add_argument("--trials", type=int, default=None)
    w.add_argument("--n-min", type=float, default=None)
    w.add_argument("--n-max", type=float, default=None)
    w.add_argument("--n-points", type=int, default=None)
    w.add_argument("--n-grid", default=None, help="comma-separated sample sizes")
    w.add_argument("--base-seed", type=int, default=None)
    w.add_argument("--threads", type=int, default=None)
    w.add_argument("--hellinger", action=argparse.BooleanOptionalAction, default=None)
    w.add_argument("--aggregate", choices=("median", "mean"), default=None)
    w.add_argument("--pooled", action="store_true")
    w.add_argument("--record-timing", action="store_true", default=None)
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("rates", help="fit log-log slopes to sweep records")
    r.add_argument("--in", dest="input", required=True, help="sweep dir or records.csv")
    r.add_argument("--metric", default="all")
    r.add_argument("--aggregate", choices=("median", "mean"), default="median")
    r.add_argument("--pooled", action="store_true")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_rates)

    c = sub.add_parser("check-ident", help="identifiability rank tests")
    c.add_argument("--expert", default="tanh",
                   help="tanh, relu, sigmoid, gelu, affine or affine-<activation>")
    c.add_argument("--pretrained", choices=("laplace", "gaussian"), default="laplace")
    c.add_argument("--d", type=int, default=8)
    c.add_argument("--samples", type=int, default=4000)
    c.add_argument("--dist-samples", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--threshold", type=float, default=1e-6)
    c.add_argument("--strict", action="store_true")
    c.set_defaults(func=cmd_check_ident)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"cmoe: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"cmoe: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
