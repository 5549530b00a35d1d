"""One YAML file configures every stage; ``key.path=value`` overrides on top.

Times may be given as ISO-8601 strings (converted to hours since the epoch)
or as plain numbers of hours.
"""

from __future__ import annotations

import copy
import math
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import kernels, medic, metrics, svgp
from .data import CAPE_TOWN, DEFAULT_SCHEMA, UNIX_EPOCH, BoundingBox, SpatioTemporalGrid
from .harness import SIX_MONTHS_HOURS, WEEK_HOURS, BacktestConfig
from .optimize import OptimizerConfig

DEFAULTS = {
    "seed": 0,
    "data": {
        "epoch": "1970-01-01T00:00:00+00:00",
        "schema": dict(DEFAULT_SCHEMA),
        "emergencies_only": True,
        "land_mask": None,
    },
    "grid": {
        "bbox": [CAPE_TOWN.lat_min, CAPE_TOWN.lon_min, CAPE_TOWN.lat_max, CAPE_TOWN.lon_max],
        "nx": 6,
        "ny": 6,
        "t_bin": 4.0,
    },
    "kernel": {
        "variances": [1.0, 1.0, 1.0, 1.0],
        "period": 24.0,
        "time_lengthscale": 8.0,
        "space_lengthscale": 10.0,
        "interaction_time_lengthscale": None,
        "interaction_space_lengthscale": None,
    },
    "model": {
        "num_inducing": 180,
        "mean_const": None,
        "jitter": 1e-6,
        "whiten": True,
        "collapse": True,
    },
    "optimizer": {
        "max_iters": 500,
        "grad_tol": 1e-5,
        "f_tol": 1e-9,
        "wolfe_c1": 1e-4,
        "wolfe_c2": 0.9,
        "memory": 20,
        "max_ls_trials": 50,
    },
    "medic": {"weeks_back": 4, "years_back": None, "year_weeks": 52},
    "eval": {"nx": 50, "ny": 50, "t_res": 4.0, "rate_floor": 1e-4},
    "backtest": {
        "test_start": "2015-03-17T00:00:00+00:00",
        "test_end": "2015-09-15T00:00:00+00:00",
        "fold_length": WEEK_HOURS,
        "max_training_span": SIX_MONTHS_HOURS,
        "history_start": None,
        "elbo_threshold": -1.07e4,
        "max_retrains": 5,
        "include_constant_baseline": False,
    },
    "window": {"start": None, "end": None},
    "synth": {
        "demo": True,
        "weeks": 26.0,
        "mean_count": 0.6,
        "t_start": 0.0,
    },
}


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, loaded)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def apply_override(cfg: dict, item: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as YAML (so ``1e-3``, ``null``, ``[1, 2]`` work)."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    out = copy.deepcopy(cfg)
    node = out
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise KeyError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)
    return out


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


# --------------------------------------------------------------------------
# builders


def epoch(cfg: dict) -> datetime:
    e = cfg["data"].get("epoch")
    if e is None:
        return UNIX_EPOCH
    d = e if isinstance(e, datetime) else datetime.fromisoformat(str(e).replace("Z", "+00:00"))
    return d if d.tzinfo else d.replace(tzinfo=timezone.utc)


def to_hours(value, cfg: dict) -> float | None:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, datetime):
        d = value
    else:
        try:
            return float(value)
        except ValueError:
            d = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if d.tzinfo is None:
        d = d.replace(tzinfo=timezone.utc)
    return (d - epoch(cfg)).total_seconds() / 3600.0


def bbox(cfg: dict) -> BoundingBox:
    return BoundingBox(*[float(v) for v in cfg["grid"]["bbox"]])


def grid(cfg: dict, t_start: float, t_end: float) -> SpatioTemporalGrid:
    g = cfg["grid"]
    return SpatioTemporalGrid(bbox(cfg), t_start, t_end, int(g["nx"]), int(g["ny"]), float(g["t_bin"]))


def kernel(cfg: dict):
    k = cfg["kernel"]
    return kernels.spatiotemporal_kernel(
        variances=tuple(float(v) for v in k["variances"]),
        period=float(k["period"]),
        time_lengthscale=float(k["time_lengthscale"]),
        space_lengthscale=float(k["space_lengthscale"]),
        interaction_time_lengthscale=k.get("interaction_time_lengthscale"),
        interaction_space_lengthscale=k.get("interaction_space_lengthscale"),
    )


def model_config(cfg: dict, seed: int | None = None) -> svgp.ModelConfig:
    m = cfg["model"]
    return svgp.ModelConfig(
        kernel=kernel(cfg),
        num_inducing=int(m["num_inducing"]),
        mean_const=None if m["mean_const"] is None else float(m["mean_const"]),
        jitter=float(m["jitter"]),
        seed=int(cfg["seed"] if seed is None else seed),
        whiten=bool(m["whiten"]),
        collapse=bool(m["collapse"]),
    )


def optimizer_config(cfg: dict) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(
        max_iters=int(o["max_iters"]), grad_tol=float(o["grad_tol"]), f_tol=float(o["f_tol"]),
        wolfe_c1=float(o["wolfe_c1"]), wolfe_c2=float(o["wolfe_c2"]), memory=int(o["memory"]),
        max_ls_trials=int(o["max_ls_trials"]),
    )


def medic_config(cfg: dict) -> medic.MedicConfig:
    m = cfg["medic"]
    return medic.MedicConfig(int(m["weeks_back"]), None if m["years_back"] is None else int(m["years_back"]),
                             int(m["year_weeks"]))


def eval_config(cfg: dict) -> metrics.EvalConfig:
    e = cfg["eval"]
    return metrics.EvalConfig(int(e["nx"]), int(e["ny"]), float(e["t_res"]), float(e["rate_floor"]))


def backtest_config(cfg: dict) -> BacktestConfig:
    b = cfg["backtest"]
    g = cfg["grid"]
    thr = b["elbo_threshold"]
    return BacktestConfig(
        bbox=bbox(cfg),
        test_start=to_hours(b["test_start"], cfg),
        test_end=to_hours(b["test_end"], cfg),
        nx=int(g["nx"]),
        ny=int(g["ny"]),
        t_bin=float(g["t_bin"]),
        fold_length=float(b["fold_length"]),
        max_training_span=float(b["max_training_span"]),
        history_start=to_hours(b["history_start"], cfg),
        elbo_threshold=-math.inf if thr is None else float(thr),
        max_retrains=int(b["max_retrains"]),
        master_seed=int(cfg["seed"]),
        emergencies_only=bool(cfg["data"]["emergencies_only"]),
        include_constant_baseline=bool(b["include_constant_baseline"]),
        model=model_config(cfg),
        optimizer=optimizer_config(cfg),
        medic=medic_config(cfg),
        eval=eval_config(cfg),
    )
