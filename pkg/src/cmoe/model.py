"""Softmax-contaminated mixture of experts: densities, expert means, gradients.

A frozen pre-trained expert ``f0(y | h0(x, eta0), nu0)`` is mixed with a
trainable Gaussian prompt expert ``f(y | h(x, eta), nu)`` through the gate
``lambda(x) = logistic(beta @ x + tau)``.  Variances (``nu``) are variances
for both families; a Laplace expert with variance ``nu`` has scale
``sqrt(nu / 2)``.

All functions accept either a single covariate vector of shape ``(d,)`` or a
batch of shape ``(n, d)`` and broadcast accordingly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit, ndtr

from .errors import DomainError, InputError

LOG_2PI = math.log(2.0 * math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
FAMILIES = (GAUSSIAN, LAPLACE)


# --- activations -----------------------------------------------------------

def _tanh(z):
    t = np.tanh(z)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _sigmoid(z):
    s = expit(z)
    ds = s * (1.0 - s)
    return s, ds, ds * (1.0 - 2.0 * s)


def _gelu(z):
    phi = np.exp(-0.5 * z * z) * _INV_SQRT_2PI
    cdf = ndtr(z)
    return z * cdf, cdf + z * phi, phi * (2.0 - z * z)


def _relu(z):
    # derivative at the kink is taken as 0
    pos = (z > 0).astype(float)
    return np.maximum(z, 0.0), pos, np.zeros_like(pos)


ACTIVATIONS: dict[str, Callable] = {
    "tanh": _tanh,
    "sigmoid": _sigmoid,
    "gelu": _gelu,
    "relu": _relu,
}


@dataclass(frozen=True)
class ExpertMeanKind:
    """Expert mean function ``h(x, eta)``.

    With ``affine=False`` the expert is ``act(eta @ x)`` and ``q == d``.  With
    ``affine=True`` it is ``act(a @ x + b)`` for ``eta = (a, b)`` and
    ``q == d + 1``.
    """

    activation: str = "tanh"
    affine: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")

    def q(self, d: int) -> int:
        return d + 1 if self.affine else d

    @classmethod
    def parse(cls, name: str) -> "ExpertMeanKind":
        """Parse ``tanh``, ``relu``, ..., ``affine`` or ``affine-<act>``."""
        name = name.lower()
        if name == "affine":
            return cls("sigmoid", affine=True)
        if name.startswith("affine-"):
            return cls(name.split("-", 1)[1], affine=True)
        return cls(name)

    @property
    def name(self) -> str:
        return f"affine-{self.activation}" if self.affine else self.activation


TANH = ExpertMeanKind("tanh")


@dataclass(frozen=True, eq=False)
class PromptParams:
    """Gate slope ``beta``, gate bias ``tau``, prompt expert ``eta`` and variance ``nu``."""

    beta: np.ndarray
    tau: float
    eta: np.ndarray
    nu: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        eta = np.array(self.eta, dtype=float).reshape(-1)
        beta.flags.writeable = False
        eta.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "nu", float(self.nu))
        if not self.nu > 0:
            raise DomainError(f"nu must be positive, got {self.nu}")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(eta))
                and math.isfinite(self.tau) and math.isfinite(self.nu)):
            raise InputError("parameters must be finite")

    @property
    def d(self) -> int:
        return self.beta.size

    @property
    def q(self) -> int:
        return self.eta.size

    def to_vector(self, log_nu: bool = True) -> np.ndarray:
        """Flatten to ``(beta, tau, eta, log nu)`` (or raw ``nu``)."""
        last = math.log(self.nu) if log_nu else self.nu
        return np.concatenate([self.beta, [self.tau], self.eta, [last]])

    @classmethod
    def from_vector(cls, theta, d: int, log_nu: bool = True) -> "PromptParams":
        theta = np.asarray(theta, dtype=float)
        nu = math.exp(theta[-1]) if log_nu else theta[-1]
        return cls(theta[:d], theta[d], theta[d + 1:-1], nu)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "tau": self.tau,
                "eta": self.eta.tolist(), "nu": self.nu}

    @classmethod
    def from_dict(cls, data: dict) -> "PromptParams":
        return cls(data["beta"], data["tau"], data["eta"], data["nu"])

    def __eq__(self, other):
        if not isinstance(other, PromptParams):
            return NotImplemented
        return (self.tau == other.tau and self.nu == other.nu
                and np.array_equal(self.beta, other.beta)
                and np.array_equal(self.eta, other.eta))

    def __repr__(self):
        return (f"PromptParams(beta={self.beta.tolist()}, tau={self.tau!r}, "
                f"eta={self.eta.tolist()}, nu={self.nu!r})")


@dataclass(frozen=True, eq=False)
class PretrainedSpec:
    family: str
    mean: ExpertMeanKind
    eta0: np.ndarray
    nu0: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown density family {self.family!r}")
        eta0 = np.array(self.eta0, dtype=float).reshape(-1)
        eta0.flags.writeable = False
        object.__setattr__(self, "eta0", eta0)
        object.__setattr__(self, "nu0", float(self.nu0))
        if not self.nu0 > 0:
            raise DomainError(f"nu0 must be positive, got {self.nu0}")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Covariate dimension, frozen expert, and the prompt's mean function.

    The prompt density is always Gaussian.
    """

    d: int
    pretrained: PretrainedSpec
    prompt_mean: ExpertMeanKind = field(default=TANH)

    def __post_init__(self):
        if self.d < 1:
            raise InputError("d must be positive")
        if self.pretrained.eta0.size != self.pretrained.mean.q(self.d):
            raise InputError("eta0 has the wrong length for the pre-trained expert")

    @property
    def q(self) -> int:
        return self.prompt_mean.q(self.d)

    @property
    def n_params(self) -> int:
        return self.d + 1 + self.q + 1

    @property
    def distinguishable(self) -> bool:
        """Non-Gaussian frozen experts are always distinguishable from a Gaussian prompt."""
        return self.pretrained.family != GAUSSIAN

    def check(self, params: PromptParams) -> None:
        if params.d != self.d or params.q != self.q:
            raise InputError(
                f"params have (d, q) = ({params.d}, {params.q}); spec expects "
                f"({self.d}, {self.q})")


# --- gate and experts ------------------------------------------------------

def _as_x(x, d: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim < 1:
        raise InputError("x must be a vector or an (n, d) matrix")
    if d is not None and x.shape[-1] != d:
        raise InputError(f"x has dimension {x.shape[-1]}, expected {d}")
    return x


def gating_logit(x, beta, tau) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    x = _as_x(x, beta.size)
    return x @ beta + tau


def gating_weight(x, beta, tau):
    """Probability ``logistic(beta @ x + tau)`` that the prompt generates ``y``."""
    return expit(gating_logit(x, beta, tau))


def _inner(kind: ExpertMeanKind, eta, x):
    eta = np.asarray(eta, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim < 1:
        raise InputError("x must be a vector or an (n, d) matrix")
    d = x.shape[-1]
    if eta.size != kind.q(d):
        raise InputError(f"eta has length {eta.size}, expected {kind.q(d)}")
    if kind.affine:
        return x @ eta[:-1] + eta[-1], x
    return x @ eta, x


def _features(kind: ExpertMeanKind, x):
    # d z / d eta
    if not kind.affine:
        return x
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([x, ones], axis=-1)


def expert_mean(kind: ExpertMeanKind, eta, x):
    z, _ = _inner(kind, eta, x)
    return ACTIVATIONS[kind.activation](z)[0]


def expert_mean_grad(kind: ExpertMeanKind, eta, x):
    """Gradient of ``h(x, eta)`` in ``eta``; shape ``(q,)`` or ``(n, q)``."""
    z, x = _inner(kind, eta, x)
    _, d1, _ = ACTIVATIONS[kind.activation](z)
    return np.asarray(d1)[..., None] * _features(kind, x)


def expert_mean_hess(kind: ExpertMeanKind, eta, x):
    """Hessian of ``h(x, eta)`` in ``eta``; shape ``(q, q)`` or ``(n, q, q)``."""
    z, x = _inner(kind, eta, x)
    _, _, d2 = ACTIVATIONS[kind.activation](z)
    feats = _features(kind, x)
    return np.asarray(d2)[..., None, None] * feats[..., :, None] * feats[..., None, :]


# --- component densities ---------------------------------------------------

def component_logpdf(family: str, mean, variance, y):
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise DomainError("variance must be positive")
    r = np.asarray(y, dtype=float) - mean
    if family == GAUSSIAN:
        return -0.5 * (LOG_2PI + np.log(variance) + r * r / variance)
    if family == LAPLACE:
        b = np.sqrt(0.5 * variance)
        return -np.log(2.0 * b) - np.abs(r) / b
    raise InputError(f"unknown density family {family!r}")


def component_density(family: str, mean, variance, y):
    """Density of ``y`` with the given mean and variance."""
    return np.exp(component_logpdf(family, mean, variance, y))


# --- mixture ---------------------------------------------------------------

def _weighted_logs(spec: ModelSpec, params: PromptParams, x, y):
    """Log of the two weighted components plus the pieces reused by gradients."""
    spec.check(params)
    x = _as_x(x, spec.d)
    y = np.asarray(y, dtype=float)
    s = x @ params.beta + params.tau
    pre = spec.pretrained
    m0 = expert_mean(pre.mean, pre.eta0, x)
    m = expert_mean(spec.prompt_mean, params.eta, x)
    log_f0 = component_logpdf(pre.family, m0, pre.nu0, y)
    log_f = component_logpdf(GAUSSIAN, m, params.nu, y)
    a0 = log_expit(-s) + log_f0
    a1 = log_expit(s) + log_f
    return a0, a1, s, m, x, y


def mixture_logpdf(spec: ModelSpec, params: PromptParams, x, y):
    a0, a1, *_ = _weighted_logs(spec, params, x, y)
    return np.logaddexp(a0, a1)


def mixture_density(spec: ModelSpec, params: PromptParams, x, y):
    """``(1 - lambda) f0(y | h0, nu0) + lambda f(y | h, nu)``."""
    return np.exp(mixture_logpdf(spec, params, x, y))


def conditional_mean(spec: ModelSpec, params: PromptParams, x):
    spec.check(params)
    lam = gating_weight(x, params.beta, params.tau)
    pre = spec.pretrained
    h0 = expert_mean(pre.mean, pre.eta0, x)
    h = expert_mean(spec.prompt_mean, params.eta, x)
    return (1.0 - lam) * h0 + lam * h


def prompt_responsibility(spec: ModelSpec, params: PromptParams, x, y):
    """Posterior probability that ``y`` came from the prompt expert."""
    a0, a1, *_ = _weighted_logs(spec, params, x, y)
    return np.exp(a1 - np.logaddexp(a0, a1))


def score_terms(spec: ModelSpec, params: PromptParams, x, y, resp):
    """Per-sample gradient of the expected complete-data log-likelihood.

    Coordinates are ``(beta, tau, eta, log nu)``.  When ``resp`` equals the
    current responsibilities this is the gradient of ``log p_G(y | x)``.
    """
    x = _as_x(x, spec.d)
    y = np.asarray(y, dtype=float)
    s = x @ params.beta + params.tau
    lam = expit(s)
    m = expert_mean(spec.prompt_mean, params.eta, x)
    dh = expert_mean_grad(spec.prompt_mean, params.eta, x)
    resid = y - m
    g_s = resp - lam
    g_eta = (resp * resid / params.nu)[..., None] * dh
    g_lognu = resp * (0.5 * resid * resid / params.nu - 0.5)
    return np.concatenate(
        [np.asarray(g_s)[..., None] * x, np.asarray(g_s)[..., None],
         g_eta, np.asarray(g_lognu)[..., None]], axis=-1)


def log_density_grad(spec: ModelSpec, params: PromptParams, x, y):
    """Gradient of ``log p_G(y | x)`` in ``(beta, tau, eta, log nu)``.

    The density is never formed directly, so gradients stay finite wherever
    the log-density is finite.
    """
    a0, a1, *_ = _weighted_logs(spec, params, x, y)
    logp = np.logaddexp(a0, a1)
    if np.any(~np.isfinite(logp)):
        raise DomainError("mixture density underflows to zero")
    resp = np.exp(a1 - logp)
    return score_terms(spec, params, x, y, resp)
