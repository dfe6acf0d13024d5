"""Maximum likelihood for the contaminated MoE by EM with a quasi-Newton M-step.

Optimization runs over ``theta = (beta, tau, eta, log nu)`` inside a
coordinate box (the compact parameter set).  Log-likelihoods are reported as
per-sample averages.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import log_expit

from .errors import InputError
from .model import (GAUSSIAN, ModelSpec, PromptParams, component_logpdf,
                    expert_mean, mixture_logpdf, prompt_responsibility,
                    score_terms)
from .sampler import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MStepConfig:
    max_iter: int = 100
    grad_tol: float = 1e-8
    armijo_c1: float = 1e-4
    max_backtracks: int = 50


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    rel_tol: float = 1e-8
    init_perturb_scale: float = 0.1
    mstep: MStepConfig = field(default_factory=MStepConfig)
    beta_bounds: tuple[float, float] = (-10.0, 10.0)
    tau_bounds: tuple[float, float] = (-10.0, 10.0)
    eta_bounds: tuple[float, float] = (-10.0, 10.0)
    nu_bounds: tuple[float, float] = (1e-6, 10.0)
    n_starts: int = 1

    def __post_init__(self):
        for name in ("rel_tol", "init_perturb_scale"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.rel_tol > 0 and self.mstep.grad_tol > 0):
            raise InputError("tolerances must be positive")
        if self.max_iter < 1 or self.mstep.max_iter < 1 or self.n_starts < 1:
            raise InputError("iteration counts must be positive")
        for name in ("beta_bounds", "tau_bounds", "eta_bounds", "nu_bounds"):
            lo, hi = (float(v) for v in getattr(self, name))
            object.__setattr__(self, name, (lo, hi))
            if lo > hi:
                raise InputError(f"{name}: lower bound exceeds upper bound")
        if self.nu_bounds[0] <= 0:
            raise InputError("nu_bounds must be positive")

    def bounds(self, d: int, q: int) -> tuple[np.ndarray, np.ndarray]:
        """Box on ``theta = (beta, tau, eta, log nu)``."""
        lo = np.concatenate([np.full(d, self.beta_bounds[0]), [self.tau_bounds[0]],
                             np.full(q, self.eta_bounds[0]), [math.log(self.nu_bounds[0])]])
        hi = np.concatenate([np.full(d, self.beta_bounds[1]), [self.tau_bounds[1]],
                             np.full(q, self.eta_bounds[1]), [math.log(self.nu_bounds[1])]])
        return lo, hi

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EmConfig":
        data = dict(data)
        mstep = MStepConfig(**data.pop("mstep", {}))
        for key in ("beta_bounds", "tau_bounds", "eta_bounds", "nu_bounds"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return cls(mstep=mstep, **data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class FitResult:
    estimate: PromptParams
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    seed: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate.to_dict(),
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "FitResult":
        return cls(PromptParams.from_dict(data["estimate"]),
                   np.asarray(data["loglik_trace"], dtype=float),
                   int(data["iterations"]), bool(data["converged"]),
                   int(data.get("seed", 0)), data.get("config_hash", ""))


def log_likelihood(spec: ModelSpec, params: PromptParams, data: Dataset) -> float:
    """Average ``log p_G(y_i | x_i)``; ``-inf`` if any density underflows."""
    if data.n == 0:
        raise InputError("empty dataset")
    lp = mixture_logpdf(spec, params, data.x, data.y)
    if not np.all(np.isfinite(lp)):
        log.warning("log-likelihood: %d points with zero density",
                    int(np.sum(~np.isfinite(lp))))
        return -math.inf
    return float(np.mean(lp))


def e_step(spec: ModelSpec, params: PromptParams, data: Dataset) -> np.ndarray:
    """Responsibilities of the prompt expert, computed in log space."""
    return prompt_responsibility(spec, params, data.x, data.y)


class _QObjective:
    """Negative average expected complete-data log-likelihood and its gradient.

    The frozen expert's log-density does not depend on the parameters and is
    dropped; ``q_value`` adds it back.
    """

    def __init__(self, spec: ModelSpec, data: Dataset, resp: np.ndarray):
        self.spec = spec
        self.data = data
        self.resp = np.asarray(resp, dtype=float)
        pre = spec.pretrained
        m0 = expert_mean(pre.mean, pre.eta0, data.x)
        self.const = float(np.mean((1.0 - self.resp)
                                   * component_logpdf(pre.family, m0, pre.nu0, data.y)))

    def params(self, theta) -> PromptParams:
        return PromptParams.from_vector(theta, self.spec.d)

    def __call__(self, theta) -> tuple[float, np.ndarray]:
        spec, x, y, r = self.spec, self.data.x, self.data.y, self.resp
        d = spec.d
        beta, tau, eta, log_nu = theta[:d], theta[d], theta[d + 1:-1], theta[-1]
        nu = math.exp(log_nu)
        s = x @ beta + tau
        m = expert_mean(spec.prompt_mean, eta, x)
        resid = y - m
        log_f = -0.5 * (math.log(2 * math.pi) + log_nu + resid * resid / nu)
        q = r * log_expit(s) + (1.0 - r) * log_expit(-s) + r * log_f
        params = PromptParams(beta, tau, eta, nu)
        grad = score_terms(spec, params, x, y, r).mean(axis=0)
        return -float(np.mean(q)), -grad


def q_value(spec: ModelSpec, params: PromptParams, data: Dataset, resp) -> float:
    """Average expected complete-data log-likelihood at ``params``."""
    obj = _QObjective(spec, data, resp)
    return -obj(params.to_vector())[0] + obj.const


def q_grad(spec: ModelSpec, params: PromptParams, data: Dataset, resp) -> np.ndarray:
    return score_terms(spec, params, data.x, data.y, resp).mean(axis=0)


class BoxBFGSResult(NamedTuple):
    x: np.ndarray
    fun: float
    grad: np.ndarray
    converged: bool
    iterations: int
    hess_inv: np.ndarray


def _projected_grad(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def minimize_box_bfgs(fun: Callable, x0, lo, hi, *, max_iter=100, grad_tol=1e-8,
                      c1=1e-4, max_backtracks=50, hess_inv=None) -> BoxBFGSResult:
    """Minimize ``fun`` (returning value and gradient) over a box.

    Projected BFGS: coordinates pinned at a bound with the gradient pushing
    outward are frozen for the step, trial points are clipped into the box,
    and steps are accepted under the Armijo condition measured along the
    projected path.  Every accepted step lowers ``fun``.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    n = x.size
    f, g = fun(x)
    H = np.eye(n) if hess_inv is None else np.array(hess_inv, dtype=float)
    fresh = hess_inv is None
    for it in range(max_iter):
        pg = _projected_grad(x, g, lo, hi)
        if np.linalg.norm(pg) < grad_tol:
            return BoxBFGSResult(x, f, g, True, it, H)
        free = pg != 0.0
        p = np.zeros(n)
        p[free] = -H[np.ix_(free, free)] @ g[free]
        if g @ p >= 0:
            H = np.eye(n)
            fresh = True
            p = -pg
        if fresh:
            # first step from an unscaled inverse Hessian: keep it short
            p *= min(1.0, 1.0 / np.linalg.norm(p))
        alpha = 1.0
        for _ in range(max_backtracks):
            x_new = np.clip(x + alpha * p, lo, hi)
            f_new, g_new = fun(x_new)
            step = x_new - x
            if np.isfinite(f_new) and f_new <= f + c1 * (g @ step):
                break
            alpha *= 0.5
        else:
            if not fresh:
                H = np.eye(n)
                fresh = True
                continue
            return BoxBFGSResult(x, f, g, False, it, H)
        s = x_new - x
        yv = g_new - g
        sy = s @ yv
        if fresh and sy > 0:
            H = np.eye(n) * (sy / (yv @ yv))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            Hy = H @ yv
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * (yv @ Hy) + rho) * np.outer(s, s))
            fresh = False
        x, f, g = x_new, f_new, g_new
    pg = _projected_grad(x, g, lo, hi)
    return BoxBFGSResult(x, f, g, bool(np.linalg.norm(pg) < grad_tol), max_iter, H)


class MStepResult(NamedTuple):
    params: PromptParams
    converged: bool
    grad_norm: float
    hess_inv: np.ndarray


def m_step(spec: ModelSpec, params_in: PromptParams, data: Dataset, resp,
           cfg: EmConfig = EmConfig(), hess_inv=None) -> MStepResult:
    """Maximize the expected complete-data log-likelihood by box-constrained BFGS.

    Returns the best point reached even when the line search gives up; the
    objective never decreases relative to ``params_in``.
    """
    spec.check(params_in)
    obj = _QObjective(spec, data, resp)
    lo, hi = cfg.bounds(spec.d, spec.q)
    ms = cfg.mstep
    res = minimize_box_bfgs(obj, params_in.to_vector(), lo, hi, max_iter=ms.max_iter,
                            grad_tol=ms.grad_tol, c1=ms.armijo_c1,
                            max_backtracks=ms.max_backtracks, hess_inv=hess_inv)
    pg = _projected_grad(res.x, res.grad, lo, hi)
    return MStepResult(obj.params(res.x), res.converged, float(np.linalg.norm(pg)),
                       res.hess_inv)


def _initial_theta(truth_hint: PromptParams, cfg: EmConfig, seed: int, lo, hi):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
    theta = truth_hint.to_vector()
    theta = theta + cfg.init_perturb_scale * rng.standard_normal(theta.size)
    return np.clip(theta, lo, hi)


def _em_single(spec, data, truth_hint, cfg, seed) -> FitResult:
    lo, hi = cfg.bounds(spec.d, spec.q)
    params = PromptParams.from_vector(_initial_theta(truth_hint, cfg, seed, lo, hi), spec.d)
    ll = log_likelihood(spec, params, data)
    trace = [ll]
    best, best_ll = params, ll
    converged = False
    mstep_ok = True
    hess_inv = None
    it = 0
    for it in range(1, cfg.max_iter + 1):
        resp = e_step(spec, params, data)
        step = m_step(spec, params, data, resp, cfg, hess_inv=hess_inv)
        hess_inv = step.hess_inv
        mstep_ok = step.converged
        params = step.params
        new_ll = log_likelihood(spec, params, data)
        trace.append(new_ll)
        if new_ll > best_ll:
            best, best_ll = params, new_ll
        if abs(new_ll - ll) < cfg.rel_tol:
            converged = True
            break
        ll = new_ll
    if not mstep_ok:
        log.debug("final M-step stopped before reaching grad_tol")
    return FitResult(best, np.asarray(trace), it, converged, seed, cfg.digest())


def em_fit(spec: ModelSpec, data: Dataset, truth_hint: PromptParams,
           cfg: EmConfig = EmConfig(), seed: int = 0) -> FitResult:
    """EM from a perturbed copy of ``truth_hint``.

    The start is ``truth_hint + N(0, init_perturb_scale**2)`` per coordinate of
    ``(beta, tau, eta, log nu)``, clipped into the box.  With
    ``cfg.n_starts > 1`` the starts use seeds ``seed, seed + 1, ...`` and the
    highest final log-likelihood wins (ties go to the lowest seed).
    """
    spec.check(truth_hint)
    if data.n == 0:
        raise InputError("empty dataset")
    if data.n < spec.d + spec.q + 2:
        raise InputError(
            f"n = {data.n} is below d + q + 2 = {spec.d + spec.q + 2}; "
            "the model is not identifiable at this size")
    if data.d != spec.d:
        raise InputError(f"data has d = {data.d}, spec expects {spec.d}")
    fits = [_em_single(spec, data, truth_hint, cfg, seed + k) for k in range(cfg.n_starts)]
    return max(fits, key=lambda f: (f.loglik_trace.max(), -f.seed))
