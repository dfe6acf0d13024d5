"""Finite-sample rank tests for distinguishability and strong identifiability.

A family of functions is declared linearly independent when the smallest
singular value of its column-normalized evaluation matrix exceeds a
threshold.  Functions that coincide inside one family (for instance
``x_w dh/deta_u`` and ``x_u dh/deta_w`` for single-index experts, or the two
halves of a symmetric Hessian) count once, since a set holds each function
only once.  Coincidences across families are kept; they are exactly the
degeneracies the tests are meant to catch.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InputError
from .model import (GAUSSIAN, ExpertMeanKind, ModelSpec, component_density,
                    expert_mean, expert_mean_grad, expert_mean_hess)

DEFAULT_THRESHOLD = 1e-6


class Condition(str, Enum):
    FIRST_ORDER_GATING = "FirstOrderGating"
    GRADIENT_PRODUCT = "GradientProduct"
    MIXED_SECOND_ORDER = "MixedSecondOrder"
    DISTINGUISHABILITY = "Distinguishability"


@dataclass(frozen=True)
class IdentVerdict:
    condition: Condition
    min_singular_value: float
    threshold: float
    sample_size: int

    @property
    def passed(self) -> bool:
        return self.min_singular_value > self.threshold


def normalize_columns(mat: np.ndarray) -> np.ndarray:
    """Scale columns to unit Euclidean norm; all-zero columns stay zero."""
    norms = np.linalg.norm(mat, axis=-2, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def min_normalized_singular_value(mat: np.ndarray) -> np.ndarray:
    """Smallest singular value of the column-normalized matrix (batched over leading axes)."""
    mat = np.asarray(mat, dtype=float)
    sv = np.linalg.svd(normalize_columns(mat), compute_uv=False)
    return sv[..., -1]


def _distinct(cols: list[np.ndarray], tol: float = 1e-12) -> list[np.ndarray]:
    if not cols:
        return cols
    unit = normalize_columns(np.stack(cols, axis=1))
    kept: list[int] = []
    for j in range(unit.shape[1]):
        c = unit[:, j]
        if any(np.max(np.abs(c - unit[:, i])) <= tol * max(1.0, np.max(np.abs(c)))
               for i in kept):
            continue
        kept.append(j)
    return [cols[j] for j in kept]


def _families(kind: ExpertMeanKind, beta, eta, x):
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != beta.size:
        raise InputError("x_samples must be an (m, d) matrix matching beta")
    m, d = x.shape
    gate = np.exp(x @ beta)
    dh = expert_mean_grad(kind, eta, x)            # (m, q)
    d2h = expert_mean_hess(kind, eta, x)           # (m, q, q)
    q = dh.shape[1]
    upper = [(u, v) for u in range(q) for v in range(u, q)]

    def fam(cols):
        return _distinct(list(cols))

    grads = fam(dh[:, u] for u in range(q))
    gated_grads = fam(gate * dh[:, u] for u in range(q))
    prods = fam(dh[:, u] * dh[:, v] for u, v in upper)
    gated_prods = fam(gate * dh[:, u] * dh[:, v] for u, v in upper)
    x_grads = fam(x[:, w] * dh[:, u] for u in range(q) for w in range(d))
    hess = fam(d2h[:, u, v] for u, v in upper)
    gated_hess = fam(gate * d2h[:, u, v] for u, v in upper)
    basic = [np.ones(m)] + fam(x[:, w] for w in range(d)) + [gate]

    return {
        Condition.FIRST_ORDER_GATING: grads + gated_grads,
        Condition.GRADIENT_PRODUCT: basic + prods + gated_prods,
        Condition.MIXED_SECOND_ORDER: grads + gated_grads + x_grads + hess + gated_hess,
    }


def strong_identifiability_check(kind: ExpertMeanKind, beta, eta, x_samples,
                                 threshold: float = DEFAULT_THRESHOLD) -> list[IdentVerdict]:
    """Rank tests for the three strong-identifiability function families.

    Each family is evaluated at the sampled covariates, one column per
    function.  Returns one verdict per family in the order first-order
    gating, gradient product, mixed second order.
    """
    fams = _families(kind, beta, eta, x_samples)
    m = np.asarray(x_samples).shape[0]
    largest = max(len(cols) for cols in fams.values())
    if m < 4 * largest:
        raise InputError(f"need at least {4 * largest} samples, got {m}")
    out = []
    for cond, cols in fams.items():
        sv = float(min_normalized_singular_value(np.stack(cols, axis=1)))
        out.append(IdentVerdict(cond, sv, threshold, m))
    return out


def _gaussian_derivs(mean, var, y):
    f = component_density(GAUSSIAN, mean, var, y)
    r = y - mean
    return f * r / var, f * (0.5 * r * r / (var * var) - 0.5 / var)


def distinguishability_check(spec: ModelSpec, probe_params, x_samples, y_grid=None,
                             threshold: float = DEFAULT_THRESHOLD) -> IdentVerdict:
    """Test whether the frozen expert is distinguishable from the Gaussian prompt.

    For every probe ``(eta1, nu1, eta2, nu2)`` and sampled ``x`` the columns
    ``f0``, ``f(. | h(x, eta1), nu1)``, ``f(. | h(x, eta2), nu2)`` and the
    derivatives of the latter in its mean and variance are evaluated on a y
    grid.  At fixed ``x`` every eta-derivative is a multiple of the
    mean-derivative, so that single column stands for the eta directions.
    ``y_grid`` is given in units of the largest component sd (default 512
    points on [-6, 6]) and is recentred at each ``x`` so that it also spans
    the spread of the component means.  The verdict reports the smallest
    singular value over all probes and covariates.
    """
    x = np.atleast_2d(np.asarray(x_samples, dtype=float))
    if x.shape[1] != spec.d:
        raise InputError("x_samples must have d columns")
    t = np.linspace(-6.0, 6.0, 512) if y_grid is None else np.asarray(y_grid, dtype=float)
    if t.ndim != 1 or t.size < 6 or np.ptp(t) <= 0:
        raise InputError("y_grid must contain at least 6 distinct points")
    pre = spec.pretrained
    m0 = expert_mean(pre.mean, pre.eta0, x)
    worst = np.inf
    for eta1, nu1, eta2, nu2 in probe_params:
        eta1 = np.asarray(eta1, dtype=float)
        eta2 = np.asarray(eta2, dtype=float)
        if np.array_equal(eta1, eta2) and nu1 == nu2:
            raise InputError("probe pairs must be distinct")
        m1 = expert_mean(spec.prompt_mean, eta1, x)
        m2 = expert_mean(spec.prompt_mean, eta2, x)
        means = np.stack([m0, m1, m2], axis=1)
        lo, hi = means.min(axis=1), means.max(axis=1)
        sd = np.sqrt(max(pre.nu0, nu1, nu2))
        center = 0.5 * (lo + hi)
        scale = sd + 0.5 * (hi - lo) / np.max(np.abs(t))
        y = center[:, None] + scale[:, None] * t[None, :]
        cols = [
            component_density(pre.family, m0[:, None], pre.nu0, y),
            component_density(GAUSSIAN, m1[:, None], nu1, y),
            component_density(GAUSSIAN, m2[:, None], nu2, y),
            *_gaussian_derivs(m2[:, None], nu2, y),
        ]
        mats = np.stack(cols, axis=-1)              # (m, len(t), 5)
        worst = min(worst, float(np.min(min_normalized_singular_value(mats))))
    return IdentVerdict(Condition.DISTINGUISHABILITY, worst, threshold, x.shape[0])


def default_probes(spec: ModelSpec):
    """Probe pairs near the frozen expert, including the pair equal to it."""
    pre = spec.pretrained
    eta0 = pre.eta0
    if spec.q != eta0.size:
        eta0 = np.resize(eta0, spec.q)
    return [
        (-eta0, pre.nu0, 0.8 * eta0, 2.0 * pre.nu0),
        (1.5 * eta0, 1.5 * pre.nu0, eta0, pre.nu0),
    ]
