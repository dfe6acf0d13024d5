import json
import math

import numpy as np
import pytest

from cmoe.cli import main
from cmoe.errors import InputError
from cmoe.experiments import (CSV_COLUMNS, SweepConfig, derive_seed, emit_csv, fit_rate,
                              fit_rates, log_grid, read_csv, run_cell, run_sweep,
                              write_outputs)
from cmoe.metrics import QuadratureConfig
from cmoe.sampler import Scenario, load_csv

TINY = SweepConfig(scenario=Scenario("a"), n_grid=(60, 90, 140), trials=2, base_seed=5)


@pytest.fixture(scope="module")
def tiny_records():
    return run_sweep(TINY)


# --- rate fitting ------------------------------------------------------------

def test_fit_rate_exact_power_law():
    ns = log_grid(1e3, 1e5, 12)
    fit = fit_rate(ns, [3.0 * n ** -0.5 for n in ns])
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-10)
    assert fit.r2 == 1.0
    assert fit.n_points == 12 and fit.n_excluded == 0


def test_fit_rate_constant():
    fit = fit_rate([10, 100, 1000, 10000], [0.2] * 4)
    assert fit.slope == pytest.approx(0.0, abs=1e-14)


def test_fit_rate_noisy_recovers_slope():
    rng = np.random.Generator(np.random.Philox(123))
    ns = log_grid(1e3, 1e5, 12)
    errs = [[n ** -0.375 * math.exp(0.1 * rng.standard_normal()) for _ in range(10)]
            for n in ns]
    assert fit_rate(ns, errs).slope == pytest.approx(-0.375, abs=0.05)


def test_fit_rate_excludes_nonpositive():
    fit = fit_rate([10, 100, 1000, 10000, 1e5], [1.0, 0.1, 0.0, 0.001, 1e-4])
    assert fit.n_excluded == 1 and fit.n_points == 4
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize("ns,errs", [([10, 100], [1, 2]), ([10, 10, 10], [1, 2, 3]),
                                     ([10, 100, 1000], [1, 2])])
def test_fit_rate_rejects_bad_input(ns, errs):
    with pytest.raises(InputError):
        fit_rate(ns, errs)


def test_fit_rate_mean_vs_median():
    errs = [[1.0, 1.0, 100.0]] * 3
    assert fit_rate([1, 10, 100], errs, "median").intercept == pytest.approx(0.0)
    assert fit_rate([1, 10, 100], errs, "mean").intercept == pytest.approx(math.log(34.0))
    with pytest.raises(InputError):
        fit_rate([1, 10, 100], errs, "mode")


def test_log_grid():
    g = log_grid(1e3, 1e5, 20)
    assert len(g) == 20 and g[0] == 1000 and g[-1] == 100000
    assert all(a < b for a, b in zip(g, g[1:]))


# --- sweep -------------------------------------------------------------------

def test_derive_seed_distinct():
    seeds = {derive_seed(0, n, t) for n in (100, 200) for t in range(50)}
    assert len(seeds) == 100
    assert derive_seed(0, 100, 3) == derive_seed(0, 100, 3)
    assert derive_seed(1, 100, 3) != derive_seed(0, 100, 3)


def test_sweep_cardinality_and_order(tiny_records):
    assert len(tiny_records) == 6
    assert [(r.n, r.trial) for r in tiny_records] == [(n, t) for n in TINY.n_grid
                                                     for t in range(2)]
    assert all(r.wall_ms is None and r.report.hellinger is None for r in tiny_records)


def test_sweep_deterministic(tiny_records, tmp_path):
    again = run_sweep(TINY)
    emit_csv(tiny_records, tmp_path / "a.csv")
    emit_csv(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_run_cell_matches_sweep(tiny_records):
    rec = run_cell(TINY, 90, 1)
    assert rec == next(r for r in tiny_records if (r.n, r.trial) == (90, 1))


def test_sweep_with_hellinger_and_timing():
    cfg = SweepConfig(scenario=Scenario("b2"), n_grid=(80,), trials=1, compute_hellinger=True,
                      record_timing=True, quad=QuadratureConfig(y_points=256, x_mc_samples=20))
    (rec,) = run_sweep(cfg)
    assert 0 <= rec.report.hellinger <= 1
    assert rec.wall_ms > 0


def test_scenario_a_smoke():
    cfg = SweepConfig(scenario=Scenario("a"), n_grid=(10_000,), trials=5, base_seed=1)
    errs = [r.report.err_eta for r in run_sweep(cfg)]
    assert np.median(errs) < 0.1


# --- output ------------------------------------------------------------------

def test_csv_header_and_roundtrip(tiny_records, tmp_path):
    path = tmp_path / "records.csv"
    emit_csv(tiny_records, path)
    assert path.read_text().splitlines()[0] == (
        "scenario,n,trial,seed,converged,err_exp_tau,err_beta,err_eta,err_nu,"
        "d1,d2,drift_norm,hellinger,wall_ms")
    assert ",".join(CSV_COLUMNS) == path.read_text().splitlines()[0]
    assert read_csv(path) == tiny_records


def test_read_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(InputError):
        read_csv(path)


def test_write_outputs(tiny_records, tmp_path):
    rates = write_outputs(tiny_records, tmp_path)
    blob = json.loads((tmp_path / "rates.json").read_text())
    assert blob == json.loads(json.dumps(rates))
    assert set(blob) == {"err_beta", "err_exp_tau", "err_eta", "err_nu", "d1", "d2"}
    entry = blob["err_eta"]
    assert entry["aggregate"] == "median" and entry["alternate"]["aggregate"] == "mean"
    assert entry["n_nonconverged"] >= 0
    pts = (tmp_path / "plot_data" / "err_eta.csv").read_text().splitlines()
    line = (tmp_path / "plot_data" / "err_eta_fit.csv").read_text().splitlines()
    assert pts[0] == line[0] == "log10_n,log10_error"
    assert len(pts) == 4 and len(line) == 3
    x0, y0 = map(float, line[1].split(","))
    assert x0 == pytest.approx(math.log10(60))
    assert y0 == pytest.approx((entry["intercept"] + entry["slope"] * math.log(60))
                               / math.log(10))


def test_pooled_rates(tiny_records):
    rates = fit_rates(tiny_records, ("err_eta",), pooled=True)
    assert rates["err_eta"]["aggregate"] == "pooled"
    assert rates["err_eta"]["n_points"] == 6


def test_nonconverged_excluded_but_counted(tiny_records):
    from dataclasses import replace
    recs = [replace(r, converged=False) if i == 0 else r for i, r in enumerate(tiny_records)]
    entry = fit_rates(recs, ("err_eta",), pooled=True)["err_eta"]
    assert entry["n_nonconverged"] == 1 and entry["n_points"] == 5


# --- CLI ---------------------------------------------------------------------

def test_cli_simulate_fit(tmp_path, capsys):
    data = tmp_path / "data.csv"
    assert main(["simulate", "--scenario", "b1", "--n", "300", "--seed", "4",
                 "--out", str(data)]) == 0
    ds = load_csv(data)
    assert (ds.n, ds.d, ds.seed, ds.scenario) == (300, 8, 4, "b1")
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", str(data), "--out", str(out)]) == 0
    blob = json.loads(out.read_text())
    assert blob["seed"] == 4 and len(blob["estimate"]["beta"]) == 8


def test_cli_simulate_npz(tmp_path):
    assert main(["simulate", "--scenario", "a", "--n", "50", "--d", "3",
                 "--out", str(tmp_path / "d.npz")]) == 0
    assert main(["fit", "--data", str(tmp_path / "d.npz"), "--out",
                 str(tmp_path / "f.json")]) == 0


def test_cli_sweep_and_rates(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[scenario]\ntag = "a"\nd = 3\n\n[em]\nmax_iter = 200\n\n'
                   '[sweep]\nn_grid = [40, 60, 90]\ntrials = 2\nbase_seed = 3\n')
    out = tmp_path / "run"
    assert main(["sweep", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "records.csv").exists() and (out / "plot_data").is_dir()
    capsys.readouterr()
    assert main(["rates", "--in", str(out), "--metric", "err_eta,d1"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert set(printed) == {"err_eta", "d1"}
    again = tmp_path / "run2"
    assert main(["sweep", "--config", str(cfg), "--out-dir", str(again)]) == 0
    assert (out / "records.csv").read_bytes() == (again / "records.csv").read_bytes()


def test_cli_check_ident(capsys):
    assert main(["check-ident", "--expert", "tanh", "--samples", "1000",
                 "--dist-samples", "20"]) == 0
    text = capsys.readouterr().out
    for name in ("FirstOrderGating", "GradientProduct", "MixedSecondOrder",
                 "Distinguishability"):
        assert name in text
    assert main(["check-ident", "--expert", "relu", "--samples", "1000",
                 "--dist-samples", "20", "--strict"]) == 1


@pytest.mark.parametrize("argv", [
    ["simulate", "--scenario", "a", "--n", "-5", "--out", "{tmp}/x.csv"],
    ["rates", "--in", "{tmp}/bad.csv", "--metric", "nope"],
    ["check-ident", "--expert", "cosine"],
    ["sweep", "--config", "{tmp}/bad.toml", "--out-dir", "{tmp}/o"],
])
def test_cli_validation_exit_code(argv, tmp_path):
    (tmp_path / "bad.csv").write_text(",".join(CSV_COLUMNS) + "\n")
    (tmp_path / "bad.toml").write_text("[sweep]\ntrials = 0\n")
    assert main([a.format(tmp=tmp_path) for a in argv]) == 2


def test_cli_io_exit_code(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--out",
                 str(tmp_path / "f.json")]) == 3
    assert main(["simulate", "--scenario", "a", "--n", "30",
                 "--out", str(tmp_path / "no" / "such" / "dir" / "x.csv")]) == 3
