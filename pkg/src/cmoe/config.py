"""TOML configuration with ``[scenario]``, ``[em]``, ``[quad]`` and ``[sweep]`` sections."""
from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InputError
from .estimator import EmConfig
from .experiments import SweepConfig, log_grid
from .metrics import QuadratureConfig
from .sampler import Scenario

SECTIONS = ("scenario", "em", "quad", "sweep")

DESK_PRESET = {"trials": 10, "n_min": 1000, "n_max": 30000, "n_points": 12}


def load(path) -> dict:
    if path is None:
        return {}
    with Path(path).open("rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise InputError(f"{path}: {exc}") from None
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise InputError(f"{path}: unknown sections {sorted(unknown)}")
    return data


def merge(config: dict, section: str, overrides: dict) -> dict:
    """Copy of ``config`` with non-None ``overrides`` written into ``section``."""
    out = {k: dict(v) for k, v in config.items()}
    sec = out.setdefault(section, {})
    sec.update({k: v for k, v in overrides.items() if v is not None})
    return out


def scenario_from(config: dict) -> Scenario:
    sc = dict(config.get("scenario", {}))
    try:
        return Scenario(sc.pop("tag", "a"), **sc)
    except TypeError as exc:
        raise InputError(f"[scenario]: {exc}") from None


def em_from(config: dict) -> EmConfig:
    try:
        return EmConfig.from_dict(config.get("em", {}))
    except TypeError as exc:
        raise InputError(f"[em]: {exc}") from None


def quad_from(config: dict) -> QuadratureConfig:
    try:
        return QuadratureConfig(**config.get("quad", {}))
    except TypeError as exc:
        raise InputError(f"[quad]: {exc}") from None


def sweep_from(config: dict) -> tuple[SweepConfig, dict]:
    """Build the sweep config; also returns rate-fitting options (aggregate, pooled)."""
    sw = dict(config.get("sweep", {}))
    if sw.pop("preset", None) == "desk":
        sw = {**DESK_PRESET, **sw}
    if "n_grid" in sw:
        grid = tuple(sw.pop("n_grid"))
        for key in ("n_min", "n_max", "n_points"):
            sw.pop(key, None)
    else:
        grid = log_grid(float(sw.pop("n_min", 1e3)), float(sw.pop("n_max", 1e5)),
                        int(sw.pop("n_points", 20)))
    fit_opts = {"aggregate": sw.pop("aggregate", "median"),
                "pooled": bool(sw.pop("pooled", False))}
    try:
        cfg = SweepConfig(scenario=scenario_from(config), n_grid=grid,
                          em=em_from(config), quad=quad_from(config), **sw)
    except TypeError as exc:
        raise InputError(f"[sweep]: {exc}") from None
    return cfg, fit_opts
