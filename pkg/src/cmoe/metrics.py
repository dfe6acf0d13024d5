"""Parameter losses, per-parameter errors and density distances."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, InputError
from .model import LAPLACE, ModelSpec, PromptParams, expert_mean, mixture_logpdf


def _core(g: PromptParams) -> np.ndarray:
    return np.concatenate([g.beta, g.eta, [g.nu]])


def _check_pair(g: PromptParams, g_star: PromptParams) -> None:
    if g.d != g_star.d or g.q != g_star.q:
        raise InputError("parameter dimensions differ")


def loss_d1(g: PromptParams, g_star: PromptParams) -> float:
    """``|e^tau - e^tau*| + (e^tau + e^tau*) * ||(beta, eta, nu) - (beta*, eta*, nu*)||``."""
    _check_pair(g, g_star)
    et, es = math.exp(g.tau), math.exp(g_star.tau)
    return abs(et - es) + (et + es) * float(np.linalg.norm(_core(g) - _core(g_star)))


def _drift(g: PromptParams, eta0, nu0) -> float:
    eta0 = np.asarray(eta0, dtype=float)
    return float(np.linalg.norm(np.concatenate([g.eta - eta0, [g.nu - nu0]])))


def loss_d2(g: PromptParams, g_star: PromptParams, eta0, nu0) -> float:
    """Loss for the regime where the prompt may collapse onto the frozen expert.

    Weights the squared drifts ``||(eta - eta0, nu - nu0)||^2`` by the gate
    scales and adds the drift-weighted parameter distance.
    """
    _check_pair(g, g_star)
    et, es = math.exp(g.tau), math.exp(g_star.tau)
    a = _drift(g, eta0, nu0)
    b = _drift(g_star, eta0, nu0)
    dist = float(np.linalg.norm(_core(g) - _core(g_star)))
    # the first three terms reduce to |et - es| times the larger-gate squared drift
    lead = (et - es) * a * a if et >= es else (es - et) * b * b
    return lead + (et * a + es * b) * dist


@dataclass(frozen=True)
class ErrorReport:
    err_exp_tau: float
    err_beta: float
    err_eta: float
    err_nu: float
    d1: float
    d2: float
    drift_norm: float
    hellinger: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def param_errors(fit: PromptParams, truth: PromptParams, eta0, nu0) -> ErrorReport:
    _check_pair(fit, truth)
    return ErrorReport(
        err_exp_tau=abs(math.exp(fit.tau) - math.exp(truth.tau)),
        err_beta=float(np.linalg.norm(fit.beta - truth.beta)),
        err_eta=float(np.linalg.norm(fit.eta - truth.eta)),
        err_nu=abs(fit.nu - truth.nu),
        d1=loss_d1(fit, truth),
        d2=loss_d2(fit, truth, eta0, nu0),
        drift_norm=_drift(truth, eta0, nu0),
    )


# --- density distances -----------------------------------------------------

@dataclass(frozen=True)
class QuadratureConfig:
    y_halfwidth_sds: float = 12.0
    y_points: int = 2048
    x_mc_samples: int = 2000
    x_seed: int = 0

    def __post_init__(self):
        if self.y_points < 2 or self.x_mc_samples < 1 or not self.y_halfwidth_sds > 0:
            raise InputError("quadrature sizes must be positive")


def simpson_weights(n_intervals: int) -> np.ndarray:
    """Composite Simpson weights on ``n_intervals + 1`` unit-spaced nodes."""
    if n_intervals < 2 or n_intervals % 2:
        raise InputError("Simpson's rule needs an even number of intervals >= 2")
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def _y_grid(spec: ModelSpec, g1: PromptParams, g2: PromptParams, x, quad):
    """Per-row y grids covering every component mean +- halfwidth sds.

    A Laplace frozen expert has a kink at its mean; the grid is split there
    so that each Simpson panel integrates a smooth function.
    """
    pre = spec.pretrained
    m0 = expert_mean(pre.mean, pre.eta0, x)
    means = np.stack([
        m0,
        expert_mean(spec.prompt_mean, g1.eta, x),
        expert_mean(spec.prompt_mean, g2.eta, x),
    ], axis=-1)
    sds = np.sqrt([pre.nu0, g1.nu, g2.nu])
    lo = np.min(means - quad.y_halfwidth_sds * sds, axis=-1)
    hi = np.max(means + quad.y_halfwidth_sds * sds, axis=-1)
    if np.any(~(hi > lo)):
        raise DomainError("degenerate quadrature range")
    if pre.family != LAPLACE:
        n_int = quad.y_points + (quad.y_points % 2)
        t = np.linspace(0.0, 1.0, n_int + 1)
        step = (hi - lo) / n_int
        return lo[:, None] + (hi - lo)[:, None] * t, step[:, None] * simpson_weights(n_int)
    half = max(2, (quad.y_points + 3) // 4 * 2)
    t = np.linspace(0.0, 1.0, half + 1)
    y = np.concatenate([lo[:, None] + (m0 - lo)[:, None] * t,
                        m0[:, None] + (hi - m0)[:, None] * t[1:]], axis=1)
    sw = simpson_weights(half)
    w = np.concatenate([((m0 - lo) / half)[:, None] * sw,
                        ((hi - m0) / half)[:, None] * sw[1:]], axis=1)
    w[:, half] += (hi - m0) / half * sw[0]
    return y, w


def conditional_distances(spec: ModelSpec, g1: PromptParams, g2: PromptParams, x,
                          quad: QuadratureConfig = QuadratureConfig(), chunk: int = 256):
    """Hellinger and total-variation distances at each row of ``x``.

    Both integrals share one Simpson grid per covariate.
    """
    spec.check(g1)
    spec.check(g2)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    hell = np.empty(x.shape[0])
    tv = np.empty(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        y, w = _y_grid(spec, g1, g2, xb, quad)
        xr = np.broadcast_to(xb[:, None, :], y.shape + (xb.shape[1],))
        lp1 = mixture_logpdf(spec, g1, xr, y)
        lp2 = mixture_logpdf(spec, g2, xr, y)
        p1, p2 = np.exp(lp1), np.exp(lp2)
        sq = np.exp(0.5 * lp1) - np.exp(0.5 * lp2)
        h2 = 0.5 * np.sum(w * sq * sq, axis=1)
        hell[start:start + chunk] = np.sqrt(np.clip(h2, 0.0, 1.0))
        tv[start:start + chunk] = np.clip(0.5 * np.sum(w * np.abs(p1 - p2), axis=1), 0.0, 1.0)
    return hell, tv


def hellinger_conditional(spec, g1, g2, x, quad: QuadratureConfig = QuadratureConfig()) -> float:
    """Hellinger distance between ``p_g1(. | x)`` and ``p_g2(. | x)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("x must be a single covariate vector")
    return float(conditional_distances(spec, g1, g2, x[None, :], quad)[0][0])


def tv_conditional(spec, g1, g2, x, quad: QuadratureConfig = QuadratureConfig()) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("x must be a single covariate vector")
    return float(conditional_distances(spec, g1, g2, x[None, :], quad)[1][0])


class MCEstimate(NamedTuple):
    value: float
    stderr: float


def covariate_draws(d: int, quad: QuadratureConfig) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(quad.x_seed))
    return rng.standard_normal((quad.x_mc_samples, d))


def expected_hellinger(spec: ModelSpec, g1: PromptParams, g2: PromptParams,
                       quad: QuadratureConfig = QuadratureConfig()) -> MCEstimate:
    """Monte Carlo mean of the conditional Hellinger distance over ``x ~ N(0, I_d)``."""
    hell, _ = conditional_distances(spec, g1, g2, covariate_draws(spec.d, quad), quad)
    se = float(np.std(hell, ddof=1) / math.sqrt(hell.size)) if hell.size > 1 else math.nan
    return MCEstimate(float(np.mean(hell)), se)
