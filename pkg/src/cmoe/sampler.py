"""Synthetic data from the contaminated MoE under the three simulation scenarios."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import (GAUSSIAN, LAPLACE, TANH, ModelSpec, PretrainedSpec,
                    PromptParams, expert_mean, gating_weight)

NU0 = 0.001


class ScenarioTag(str, Enum):
    DISTINGUISHABLE_LAPLACE = "a"
    NON_DIST_ETA_DRIFT = "b1"
    NON_DIST_NU_DRIFT = "b2"

    @classmethod
    def parse(cls, value) -> "ScenarioTag":
        if isinstance(value, cls):
            return value
        aliases = {
            "a": cls.DISTINGUISHABLE_LAPLACE,
            "distinguishablelaplace": cls.DISTINGUISHABLE_LAPLACE,
            "b1": cls.NON_DIST_ETA_DRIFT,
            "nondistetadrift": cls.NON_DIST_ETA_DRIFT,
            "b2": cls.NON_DIST_NU_DRIFT,
            "nondistnudrift": cls.NON_DIST_NU_DRIFT,
        }
        key = str(value).lower().replace("_", "").replace("-", "")
        if key not in aliases:
            raise InputError(f"unknown scenario {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class Scenario:
    tag: ScenarioTag
    d: int = 8
    drift_exponent: float = 0.125

    def __post_init__(self):
        object.__setattr__(self, "tag", ScenarioTag.parse(self.tag))
        if self.d < 1:
            raise InputError("d must be at least 1")
        if not self.drift_exponent > 0:
            raise InputError("drift_exponent must be positive")


def make_truth(scenario: Scenario, n: int) -> tuple[ModelSpec, PromptParams]:
    """Ground-truth model and parameters at sample size ``n``.

    Both non-distinguishable scenarios use a Gaussian frozen expert sharing
    the prompt's tanh mean function; the drift ``n ** -drift_exponent`` moves
    the prompt toward the frozen expert as ``n`` grows.
    """
    if n < 1:
        raise InputError("n must be at least 1")
    d = scenario.d
    e1 = np.zeros(d)
    e1[0] = 1.0
    beta = np.full(d, 1.0 / math.sqrt(d))
    tau = 1.0
    drift = float(n) ** -scenario.drift_exponent
    tag = scenario.tag
    if tag is ScenarioTag.DISTINGUISHABLE_LAPLACE:
        family, eta, nu = LAPLACE, -e1, NU0
    elif tag is ScenarioTag.NON_DIST_ETA_DRIFT:
        family, eta, nu = GAUSSIAN, e1 * (1.0 + drift), NU0
    elif tag is ScenarioTag.NON_DIST_NU_DRIFT:
        family, eta, nu = GAUSSIAN, -e1, NU0 * (1.0 + drift)
    else:  # pragma: no cover
        raise InputError(f"unknown scenario {tag!r}")
    spec = ModelSpec(d, PretrainedSpec(family, TANH, e1, NU0), TANH)
    return spec, PromptParams(beta, tau, eta, nu)


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    seed: int = 0
    scenario: str = ""
    # component labels (1 = prompt); kept for verification only
    z: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise InputError("x must be (n, d) with one row per response")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InputError("dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def prompt_fraction(self) -> float:
        """Fraction of responses drawn from the prompt expert."""
        if self.z is None:
            raise ValueError("dataset carries no component labels")
        return float(np.mean(self.z))


def rng_for(seed: int) -> np.random.Generator:
    # counter-based stream: independent datasets can be generated in any order
    return np.random.Generator(np.random.Philox(seed))


def sample(spec: ModelSpec, params: PromptParams, n: int, seed: int,
           scenario: str = "") -> Dataset:
    """Draw ``n`` pairs with ``x ~ N(0, I_d)`` and ``y | x`` from the mixture."""
    if n < 1:
        raise InputError("n must be at least 1")
    spec.check(params)
    rng = rng_for(seed)
    x = rng.standard_normal((n, spec.d))
    u = rng.random(n)
    noise = rng.standard_normal(n)
    lap = rng.laplace(size=n)

    z = u < gating_weight(x, params.beta, params.tau)
    pre = spec.pretrained
    m0 = expert_mean(pre.mean, pre.eta0, x)
    if pre.family == LAPLACE:
        y0 = m0 + math.sqrt(pre.nu0 / 2.0) * lap
    else:
        y0 = m0 + math.sqrt(pre.nu0) * noise
    m = expert_mean(spec.prompt_mean, params.eta, x)
    y1 = m + math.sqrt(params.nu) * noise
    y = np.where(z, y1, y0)
    return Dataset(x, y, seed=seed, scenario=scenario, z=z.astype(np.int8))


# --- persistence -----------------------------------------------------------

def save_csv(data: Dataset, path) -> None:
    """Write ``x_1..x_d, y`` with a leading ``# d=..,n=..,seed=..,scenario=..`` line."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# d={data.d},n={data.n},seed={data.seed},scenario={data.scenario}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x_{j + 1}" for j in range(data.d)] + ["y"])
        for row, yi in zip(data.x, data.y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(yi))])


def load_csv(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise InputError(f"{path}: missing metadata line")
        meta = dict(kv.split("=", 1) for kv in first[1:].strip().split(","))
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader], dtype=float)
    d = int(meta["d"])
    if header != [f"x_{j + 1}" for j in range(d)] + ["y"]:
        raise InputError(f"{path}: unexpected header {header}")
    rows = rows.reshape(-1, d + 1)
    if rows.shape[0] != int(meta["n"]):
        raise InputError(f"{path}: header says n={meta['n']}, found {rows.shape[0]} rows")
    return Dataset(rows[:, :d], rows[:, d], seed=int(meta["seed"]),
                   scenario=meta.get("scenario", ""))


def save_npz(data: Dataset, path) -> None:
    """Binary cache; component labels are kept when present."""
    extra = {} if data.z is None else {"z": data.z}
    np.savez(path, x=data.x, y=data.y, seed=np.uint64(data.seed),
             scenario=np.array(data.scenario), **extra)


def load_npz(path) -> Dataset:
    with np.load(path) as f:
        z = f["z"] if "z" in f.files else None
        return Dataset(f["x"], f["y"], seed=int(f["seed"]),
                       scenario=str(f["scenario"]), z=z)
