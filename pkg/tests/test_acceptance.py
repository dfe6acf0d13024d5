"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Run alone with ``pytest -m acceptance``.  The rate sweeps take several minutes.
"""
import math

import numpy as np
import pytest
from scipy.integrate import quad

from cmoe.estimator import EmConfig, em_fit
from cmoe.experiments import (SweepConfig, emit_csv, emit_rates, fit_rates, log_grid,
                              run_sweep)
from cmoe.identifiability import (Condition, default_probes, distinguishability_check,
                                  strong_identifiability_check)
from cmoe.metrics import QuadratureConfig, hellinger_conditional, loss_d1, loss_d2
from cmoe.model import (GAUSSIAN, LAPLACE, TANH, ExpertMeanKind, ModelSpec, PretrainedSpec,
                        PromptParams, expert_mean, log_density_grad, mixture_density,
                        mixture_logpdf)
from cmoe.sampler import Scenario, make_truth, sample

from conftest import random_params

pytestmark = pytest.mark.acceptance

BASE_SEED = 0
GRID = log_grid(1e3, 3e4, 12)
TRIALS = 10
PARAM_METRICS = ("err_beta", "err_exp_tau", "err_eta", "err_nu")


def _sweep(tag, hellinger=False):
    cfg = SweepConfig(scenario=Scenario(tag, d=8), n_grid=GRID, trials=TRIALS,
                      base_seed=BASE_SEED, compute_hellinger=hellinger)
    records = run_sweep(cfg)
    metrics = ("hellinger",) if hellinger else PARAM_METRICS
    return records, fit_rates(records, metrics)


@pytest.fixture(scope="module")
def sweep_a():
    return _sweep("a")


def _fmt_rates(rates, metrics):
    return "; ".join(f"{m} {rates[m]['slope']:+.3f} (r2 {rates[m]['r2']:.2f})" for m in metrics)


def _rate_check(rates, bands, min_r2=None):
    ok = True
    for metric, (lo, hi) in bands.items():
        r = rates[metric]
        ok &= lo <= r["slope"] <= hi
        if min_r2 is not None:
            ok &= r["r2"] >= min_r2
    return bool(ok)


def test_c01_distinguishable_rates(sweep_a, criterion):
    _, rates = sweep_a
    ok = _rate_check(rates, {m: (-0.65, -0.35) for m in PARAM_METRICS}, min_r2=0.9)
    criterion(1, ok, _fmt_rates(rates, PARAM_METRICS))
    assert ok


def test_c02_eta_drift_rates(criterion):
    _, rates = _sweep("b1")
    bands = {"err_exp_tau": (-0.35, -0.13), "err_beta": (-0.50, -0.25),
             "err_eta": (-0.50, -0.25), "err_nu": (-0.50, -0.25)}
    ok = _rate_check(rates, bands)
    criterion(2, ok, _fmt_rates(rates, PARAM_METRICS))
    assert ok


def test_c03_nu_drift_rates(criterion):
    _, rates = _sweep("b2")
    bands = {"err_exp_tau": (-0.35, -0.13), "err_beta": (-0.50, -0.25),
             "err_eta": (-0.50, -0.25), "err_nu": (-0.50, -0.25)}
    ok = _rate_check(rates, bands)
    criterion(3, ok, _fmt_rates(rates, PARAM_METRICS))
    assert ok


def test_c04_hellinger_rate(criterion):
    _, rates = _sweep("a", hellinger=True)
    slope = rates["hellinger"]["slope"]
    ok = -0.65 <= slope <= -0.35
    criterion(4, ok, _fmt_rates(rates, ("hellinger",)))
    assert ok


def test_c05_em_ascent(criterion):
    rng = np.random.Generator(np.random.Philox(5))
    worst = math.inf
    for k in range(100):
        tag = ("a", "b1", "b2")[k % 3]
        n = int(rng.integers(100, 3000))
        spec, truth = make_truth(Scenario(tag, d=8), n)
        data = sample(spec, truth, n, int(rng.integers(1 << 31)))
        fit = em_fit(spec, data, truth, EmConfig(), seed=int(rng.integers(1 << 31)))
        worst = min(worst, float(np.min(np.diff(fit.loglik_trace), initial=0.0)))
    ok = worst >= -1e-9
    criterion(5, ok, f"smallest trace increment {worst:.3e} over 100 fits")
    assert ok


def _fd_grad(spec, p, x, y, h=1e-5):
    theta = p.to_vector()
    out = np.empty_like(theta)
    for j in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        fp = mixture_logpdf(spec, PromptParams.from_vector(tp, spec.d), x, y)
        fm = mixture_logpdf(spec, PromptParams.from_vector(tm, spec.d), x, y)
        out[j] = (fp - fm) / (2 * h)
    return out


def test_c06_gradient(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(100):
        spec, _ = make_truth(Scenario(("a", "b1", "b2")[k % 3], d=4), 1000)
        p = random_params(rng, 4, 4, nu_low=1e-4, nu_high=1.0)
        x = rng.normal(size=4)
        lam_mean = expert_mean(TANH, p.eta, x)
        y = float(lam_mean + math.sqrt(p.nu) * rng.normal())
        g = log_density_grad(spec, p, x[None, :], np.array([y]))[0]
        fd = _fd_grad(spec, p, x, y)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    ok = worst < 1e-5
    criterion(6, ok, f"max relative error {worst:.2e} over 100 points")
    assert ok


def test_c07_normalization(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for family in (GAUSSIAN, LAPLACE):
        for _ in range(50):
            d = 3
            nu0 = float(np.exp(rng.uniform(math.log(1e-3), 0.0)))
            spec = ModelSpec(d, PretrainedSpec(family, TANH, rng.normal(size=d), nu0), TANH)
            p = random_params(rng, d, d, nu_low=1e-3, nu_high=1.0)
            x = rng.normal(size=d)
            means = [float(expert_mean(TANH, spec.pretrained.eta0, x)),
                     float(expert_mean(TANH, p.eta, x))]
            sd = math.sqrt(max(nu0, p.nu))
            total, _ = quad(lambda y: mixture_density(spec, p, x, y), min(means) - 40 * sd,
                            max(means) + 40 * sd, points=means, limit=500,
                            epsabs=1e-12, epsrel=1e-12)
            worst = max(worst, abs(total - 1.0))
    ok = worst <= 1e-6
    criterion(7, ok, f"max |integral - 1| {worst:.2e} over 100 cases")
    assert ok


def test_c08_hellinger_oracle(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        nu = float(np.exp(rng.uniform(math.log(1e-3), 0.0)))
        spec = ModelSpec(1, PretrainedSpec(GAUSSIAN, TANH, [0.3], nu), TANH)
        e1, e2 = rng.uniform(-2, 2, 2)
        g1, g2 = PromptParams([0.0], 60.0, [e1], nu), PromptParams([0.0], 60.0, [e2], nu)
        m1, m2 = math.tanh(e1), math.tanh(e2)
        expect = math.sqrt(1 - math.exp(-(m1 - m2) ** 2 / (8 * nu)))
        worst = max(worst, abs(hellinger_conditional(spec, g1, g2, np.array([1.0])) - expect))
    ok = worst <= 1e-6
    criterion(8, ok, f"max abs error {worst:.2e} over 50 pairs")
    assert ok


def test_c09_identifiability(criterion):
    rng = np.random.Generator(np.random.Philox(9))
    d = 8
    x = rng.standard_normal((4000, d))
    beta = rng.standard_normal(d) / math.sqrt(d)
    sig = {}
    for name in ("tanh", "sigmoid", "gelu", "relu", "affine"):
        kind = ExpertMeanKind.parse(name)
        eta = rng.standard_normal(kind.q(d)) / math.sqrt(d)
        sig[name] = {v.condition: v.min_singular_value
                     for v in strong_identifiability_check(kind, beta, eta, x)}
    smooth_ok = all(s > 1e-4 for k in ("tanh", "sigmoid", "gelu") for s in sig[k].values())
    kink_ok = all(sig[k][Condition.MIXED_SECOND_ORDER] < 1e-8 for k in ("relu", "affine"))
    spec_a, _ = make_truth(Scenario("a"), 1000)
    spec_b, _ = make_truth(Scenario("b1"), 1000)
    dist_a = distinguishability_check(spec_a, default_probes(spec_a), x[:200])
    dist_b = distinguishability_check(spec_b, default_probes(spec_b), x[:200])
    ok = smooth_ok and kink_ok and dist_a.passed and not dist_b.passed
    smooth_min = min(s for k in ("tanh", "sigmoid", "gelu") for s in sig[k].values())
    kink_max = max(sig[k][Condition.MIXED_SECOND_ORDER] for k in ("relu", "affine"))
    criterion(9, ok, f"smooth min sigma {smooth_min:.3g}; relu/affine mixed {kink_max:.2g}; "
                     f"laplace {dist_a.min_singular_value:.3g}; "
                     f"gaussian {dist_b.min_singular_value:.2g}")
    assert ok


def _core(g):
    return [*g.beta, *g.eta, g.nu]


def _scalar_d1(g, s):
    a, c = math.exp(g.tau), math.exp(s.tau)
    dist = math.sqrt(sum((u - v) ** 2 for u, v in zip(_core(g), _core(s))))
    return abs(a - c) + (a + c) * dist


def _scalar_d2(g, s, eta0, nu0):
    a, c = math.exp(g.tau), math.exp(s.tau)
    da = math.sqrt(sum((u - v) ** 2 for u, v in zip(g.eta, eta0)) + (g.nu - nu0) ** 2)
    dc = math.sqrt(sum((u - v) ** 2 for u, v in zip(s.eta, eta0)) + (s.nu - nu0) ** 2)
    dist = math.sqrt(sum((u - v) ** 2 for u, v in zip(_core(g), _core(s))))
    return a * da * da + c * dc * dc - min(a, c) * (da * da + dc * dc) + (a * da + c * dc) * dist


def test_c10_losses(criterion):
    rng = np.random.default_rng(10)
    eta0, nu0 = rng.normal(size=8), 1e-3
    zero_ok = positive_ok = True
    worst = 0.0
    for _ in range(1000):
        g, s = random_params(rng, 8, 8), random_params(rng, 8, 8)
        zero_ok &= loss_d1(g, g) == 0.0 and loss_d2(g, g, eta0, nu0) == 0.0
        d1, d2 = loss_d1(g, s), loss_d2(g, s, eta0, nu0)
        positive_ok &= d1 > 0 and d2 > 0
        worst = max(worst, abs(d1 - _scalar_d1(g, s)) / _scalar_d1(g, s),
                    abs(d2 - _scalar_d2(g, s, eta0, nu0)) / _scalar_d2(g, s, eta0, nu0))
    ok = zero_ok and positive_ok and worst <= 1e-12
    criterion(10, ok, f"zero at equality {zero_ok}; positive {positive_ok}; "
                      f"max relative mismatch {worst:.1e}")
    assert ok


def test_c11_determinism(sweep_a, tmp_path, criterion):
    first_records, first_rates = sweep_a
    second_records, second_rates = _sweep("a")
    blobs = []
    for tag, records, rates in (("1", first_records, first_rates),
                                ("2", second_records, second_rates)):
        emit_csv(records, tmp_path / f"records{tag}.csv")
        emit_rates(rates, tmp_path / f"rates{tag}.json")
        blobs.append(((tmp_path / f"records{tag}.csv").read_bytes(),
                      (tmp_path / f"rates{tag}.json").read_bytes()))
    ok = blobs[0] == blobs[1]
    criterion(11, ok, f"csv {len(blobs[0][0])} bytes, rates {len(blobs[0][1])} bytes, "
                      f"identical={ok}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
