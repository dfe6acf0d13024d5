"""Convergence-rate sweeps: simulate, fit, measure errors, fit log-log slopes."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InputError
from .estimator import EmConfig, em_fit
from .metrics import ErrorReport, QuadratureConfig, expected_hellinger, param_errors
from .sampler import Scenario, make_truth, sample

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scenario", "n", "trial", "seed", "converged", "err_exp_tau", "err_beta",
               "err_eta", "err_nu", "d1", "d2", "drift_norm", "hellinger", "wall_ms")
RATE_METRICS = ("err_beta", "err_exp_tau", "err_eta", "err_nu", "d1", "d2", "hellinger")
AGGREGATES = ("median", "mean")


def log_grid(lo: float, hi: float, points: int) -> tuple[int, ...]:
    """``points`` log-spaced integers in ``[lo, hi]`` (duplicates after rounding dropped)."""
    if points < 1 or lo < 1 or hi < lo:
        raise InputError("invalid sample-size grid")
    return tuple(int(v) for v in np.unique(np.round(np.logspace(
        math.log10(lo), math.log10(hi), points)).astype(int)))


@dataclass(frozen=True)
class SweepConfig:
    scenario: Scenario
    n_grid: tuple[int, ...] = field(default_factory=lambda: log_grid(1e3, 1e5, 20))
    trials: int = 40
    em: EmConfig = field(default_factory=EmConfig)
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    base_seed: int = 0
    compute_hellinger: bool = False
    out_dir: str | None = None
    threads: int = 1
    record_timing: bool = False

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        object.__setattr__(self, "n_grid", grid)
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise InputError("n_grid must be non-empty and strictly increasing")
        if grid[0] < 1:
            raise InputError("sample sizes must be positive")
        if self.trials < 1:
            raise InputError("trials must be at least 1")
        if self.threads < 1:
            raise InputError("threads must be at least 1")


@dataclass(frozen=True)
class SweepRecord:
    scenario: str
    n: int
    trial: int
    seed: int
    report: ErrorReport
    converged: bool
    wall_ms: float | None = None


def derive_seed(base_seed: int, n: int, trial: int) -> int:
    """Independent 32-bit seed for one ``(n, trial)`` cell."""
    return int(np.random.SeedSequence([base_seed, n, trial]).generate_state(1)[0])


def run_cell(cfg: SweepConfig, n: int, trial: int) -> SweepRecord:
    start = time.perf_counter()
    spec, truth = make_truth(cfg.scenario, n)
    seed = derive_seed(cfg.base_seed, n, trial)
    data = sample(spec, truth, n, seed, scenario=cfg.scenario.tag.value)
    fit = em_fit(spec, data, truth, cfg.em, seed)
    report = param_errors(fit.estimate, truth, spec.pretrained.eta0, spec.pretrained.nu0)
    if cfg.compute_hellinger:
        h = expected_hellinger(spec, fit.estimate, truth, cfg.quad)
        report = replace(report, hellinger=h.value)
    wall = (time.perf_counter() - start) * 1e3 if cfg.record_timing else None
    return SweepRecord(cfg.scenario.tag.value, n, trial, seed, report, fit.converged, wall)


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(cfg: SweepConfig) -> list[SweepRecord]:
    """Fit every ``(n, trial)`` cell; the output depends only on ``cfg``.

    Records come back ordered by ``(n, trial)`` whatever the worker count.
    """
    tasks = [(cfg, n, t) for n in cfg.n_grid for t in range(cfg.trials)]
    if cfg.threads == 1:
        records = [run_cell(*task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            records = list(pool.map(_run_cell_args, tasks, chunksize=1))
    bad = sum(not r.converged for r in records)
    if bad:
        log.warning("%d of %d fits did not converge", bad, len(records))
    return sorted(records, key=lambda r: (r.n, r.trial))


# --- rate fitting ----------------------------------------------------------

class RateFit(NamedTuple):
    slope: float
    intercept: float
    r2: float
    stderr_slope: float
    n_points: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return self._asdict()


def _aggregate(values, how: str) -> float:
    values = np.asarray(values, dtype=float)
    if how == "median":
        return float(np.median(values))
    if how == "mean":
        return float(np.mean(values))
    raise InputError(f"unknown aggregate {how!r}")


def fit_rate(ns: Sequence[float], errors, aggregate: str = "median") -> RateFit:
    """Ordinary least squares of ``log(error)`` on ``log(n)``.

    ``errors[i]`` is either the aggregated error at ``ns[i]`` or the per-trial
    errors there, which are reduced with ``aggregate``.  Non-positive points
    are dropped and counted in ``n_excluded``.
    """
    if aggregate not in AGGREGATES:
        raise InputError(f"unknown aggregate {aggregate!r}")
    ns = np.asarray(ns, dtype=float)
    errs = np.array([_aggregate(e, aggregate) if np.ndim(e) else float(e) for e in errors])
    if ns.shape != errs.shape:
        raise InputError("ns and errors differ in length")
    keep = (errs > 0) & np.isfinite(errs) & (ns > 0)
    excluded = int(np.sum(~keep))
    if excluded:
        log.warning("fit_rate: excluded %d non-positive points", excluded)
    lx, ly = np.log(ns[keep]), np.log(errs[keep])
    k = lx.size
    if k < 3:
        raise InputError("need at least 3 usable grid points")
    xc = lx - lx.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise InputError("sample sizes must not all be equal")
    slope = float(xc @ (ly - ly.mean())) / sxx
    intercept = float(ly.mean() - slope * lx.mean())
    resid = ly - (intercept + slope * lx)
    ss_res = float(resid @ resid)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot <= 1e-300 or ss_res <= 1e-30 * max(ss_tot, 1.0) else 1.0 - ss_res / ss_tot
    r2 = min(max(r2, 0.0), 1.0)
    stderr = math.sqrt(ss_res / (k - 2) / sxx)
    return RateFit(slope, intercept, r2, stderr, k, excluded)


def metric_values(records: Iterable[SweepRecord], metric: str):
    """Per-n lists of a metric over converged trials, plus the non-converged count."""
    by_n: dict[int, list[float]] = {}
    skipped = 0
    for r in records:
        if not r.converged:
            skipped += 1
            continue
        v = getattr(r.report, metric)
        if v is None:
            continue
        by_n.setdefault(r.n, []).append(v)
    ns = sorted(by_n)
    return ns, [by_n[n] for n in ns], skipped


def fit_rates(records: Sequence[SweepRecord], metrics: Sequence[str] = RATE_METRICS,
              aggregate: str = "median", pooled: bool = False) -> dict:
    """Slopes for every metric present in ``records``, from the same records.

    Aggregate-then-fit by default; ``pooled=True`` regresses on every trial.
    Each entry carries the primary fit, the alternate aggregate, and counts.
    """
    out = {}
    for metric in metrics:
        ns, vals, skipped = metric_values(records, metric)
        if len(ns) < 3:
            continue
        if pooled:
            flat_n = [n for n, v in zip(ns, vals) for _ in v]
            flat_v = [e for v in vals for e in v]
            primary = fit_rate(flat_n, flat_v, aggregate)
            entry = {**primary.to_dict(), "aggregate": "pooled"}
        else:
            primary = fit_rate(ns, vals, aggregate)
            other = "mean" if aggregate == "median" else "median"
            alt = fit_rate(ns, vals, other)
            entry = {**primary.to_dict(), "aggregate": aggregate,
                     "alternate": {**alt.to_dict(), "aggregate": other}}
        entry["n_nonconverged"] = skipped
        out[metric] = entry
    return out


# --- output ----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def emit_csv(records: Sequence[SweepRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            rep = r.report
            writer.writerow([r.scenario, _fmt(r.n), _fmt(r.trial), _fmt(r.seed),
                             _fmt(r.converged), _fmt(rep.err_exp_tau), _fmt(rep.err_beta),
                             _fmt(rep.err_eta), _fmt(rep.err_nu), _fmt(rep.d1), _fmt(rep.d2),
                             _fmt(rep.drift_norm), _fmt(rep.hellinger), _fmt(r.wall_ms)])


def read_csv(path) -> list[SweepRecord]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise InputError(f"{path}: unexpected header")
        out = []
        for row in reader:
            rec = dict(zip(header, row))

            def opt(key):
                return float(rec[key]) if rec[key] != "" else None

            report = ErrorReport(*(float(rec[k]) for k in CSV_COLUMNS[5:12]),
                                 hellinger=opt("hellinger"))
            out.append(SweepRecord(rec["scenario"], int(rec["n"]), int(rec["trial"]),
                                   int(rec["seed"]), report, rec["converged"] == "1",
                                   opt("wall_ms")))
    return out


def emit_rates(ratefits: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(ratefits, indent=2, sort_keys=True) + "\n")


def emit_plot_data(records: Sequence[SweepRecord], ratefits: dict, path,
                   aggregate: str = "median") -> None:
    """Per-metric ``log10_n,log10_error`` points and fitted-line endpoints.

    Writes ``<metric>.csv`` and ``<metric>_fit.csv`` into the directory ``path``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for metric, fit in ratefits.items():
        ns, vals, _ = metric_values(records, metric)
        agg = [_aggregate(v, aggregate) for v in vals]
        with (path / f"{metric}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["log10_n", "log10_error"])
            for n, e in zip(ns, agg):
                if e > 0:
                    writer.writerow([repr(math.log10(n)), repr(math.log10(e))])
        with (path / f"{metric}_fit.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["log10_n", "log10_error"])
            for n in (ns[0], ns[-1]):
                # natural-log fit converted to base 10
                yhat = (fit["intercept"] + fit["slope"] * math.log(n)) / math.log(10)
                writer.writerow([repr(math.log10(n)), repr(yhat)])


def write_outputs(records: Sequence[SweepRecord], out_dir, aggregate: str = "median",
                  pooled: bool = False) -> dict:
    """``records.csv``, ``rates.json`` and ``plot_data/`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rates = fit_rates(records, aggregate=aggregate, pooled=pooled)
    emit_csv(records, out_dir / "records.csv")
    emit_rates(rates, out_dir / "rates.json")
    emit_plot_data(records, rates, out_dir / "plot_data", aggregate)
    return rates
