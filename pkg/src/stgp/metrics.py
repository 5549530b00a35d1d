"""Scoring: inhomogeneous Poisson log-likelihood and binned MAE.

A *rate* here is any callable mapping an ``(n, 3)`` array of
``(x_km, y_km, t_hours)`` points to intensities in events / km^2 / hour.

The log-likelihood of events ``s_1..s_k`` under rate ``lam`` is

    sum_i log max(lam(s_i), floor) - integral(lam) - log k!

with the integral taken by the midpoint rule on a regular spatial grid
(default 50 x 50) times fixed-length time bins, over land cells only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .data import BinnedCounts, EventSet, LandMask, SpatioTemporalGrid, project
from .errors import EventOutsideDomain, ShapeMismatch

RATE_FLOOR = 1e-4


@dataclass(frozen=True)
class EvalConfig:
    nx: int = 50
    ny: int = 50
    t_res: float = 4.0
    rate_floor: float = RATE_FLOOR
    land_mask: LandMask | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.rate_floor > 0:
            raise ValueError("rate_floor must be positive")


@lru_cache(maxsize=64)
def log_factorial(k: int) -> float:
    """``log k!`` as a correctly rounded sum of ``log i``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return math.fsum(math.log(i) for i in range(2, k + 1))


# --------------------------------------------------------------------------
# rate fields


class GridRate:
    """Piecewise-constant rate on the bins of ``grid``."""

    def __init__(self, grid: SpatioTemporalGrid, rates):
        rates = np.asarray(rates, dtype=float)
        if rates.shape != grid.shape:
            raise ShapeMismatch(f"rates shape {rates.shape} != grid shape {grid.shape}")
        self.grid = grid
        self.rates = rates

    def __call__(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        it, iy, ix = self.grid.locate(points[:, 0], points[:, 1], points[:, 2])
        if np.any((it < 0) | (iy < 0) | (ix < 0)):
            raise EventOutsideDomain("point outside the rate grid")
        return self.rates[it, iy, ix]


class ConstantRate:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, points):
        return np.full(len(np.asarray(points).reshape(-1, 3)), self.value)


# --------------------------------------------------------------------------
# log-likelihood


@dataclass(frozen=True)
class IntegrationGrid:
    points: np.ndarray  # (P, 3) land-only midpoints
    volumes: np.ndarray  # (P,) km^2 * hours


def integration_grid(grid: SpatioTemporalGrid, t0: float, t1: float, cfg: EvalConfig) -> IntegrationGrid:
    """Midpoints and volumes over the spatial extent of ``grid`` and ``[t0, t1)``.

    A spatial midpoint counts as land when the ``grid`` cell containing it is
    land. The last time slab is shortened if ``t_res`` does not divide the
    window.
    """
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    xe = np.linspace(x0, x1, cfg.nx + 1)
    ye = np.linspace(y0, y1, cfg.ny + 1)
    xc = 0.5 * (xe[:-1] + xe[1:])
    yc = 0.5 * (ye[:-1] + ye[1:])
    yy, xx = np.meshgrid(yc, xc, indexing="ij")
    xs, ys = xx.ravel(), yy.ravel()
    area = (x1 - x0) / cfg.nx * (y1 - y0) / cfg.ny
    if cfg.land_mask is not None:
        cfg.land_mask.check(grid)
        _, iy, ix = grid.locate(xs, ys, np.full(len(xs), grid.t_start))
        land = cfg.land_mask.mask[iy, ix]
        xs, ys = xs[land], ys[land]

    n_full = int(math.floor((t1 - t0) / cfg.t_res + 1e-9))
    te = list(t0 + cfg.t_res * np.arange(n_full + 1))
    if t1 - te[-1] > 1e-9:
        te.append(t1)
    te = np.asarray(te)
    tc = 0.5 * (te[:-1] + te[1:])
    dt = np.diff(te)
    n_s = len(xs)
    pts = np.empty((len(tc) * n_s, 3))
    pts[:, 0] = np.tile(xs, len(tc))
    pts[:, 1] = np.tile(ys, len(tc))
    pts[:, 2] = np.repeat(tc, n_s)
    return IntegrationGrid(pts, np.repeat(dt, n_s) * area)


@dataclass(frozen=True)
class LoglikTerms:
    sum_log: float
    integral: float
    k: int

    @property
    def value(self) -> float:
        return self.sum_log - self.integral - log_factorial(self.k)


def loglik_terms(event_rates, grid_rates, grid_volumes, rate_floor: float = RATE_FLOOR) -> LoglikTerms:
    event_rates = np.asarray(event_rates, dtype=float)
    sum_log = float(np.sum(np.log(np.maximum(event_rates, rate_floor))))
    integral = float(np.dot(np.asarray(grid_rates, dtype=float), np.asarray(grid_volumes, dtype=float)))
    return LoglikTerms(sum_log, integral, len(event_rates))


def combine_loglik(terms) -> float:
    """Log-likelihood of the union of disjoint windows."""
    terms = list(terms)
    return LoglikTerms(
        math.fsum(t.sum_log for t in terms),
        math.fsum(t.integral for t in terms),
        sum(t.k for t in terms),
    ).value


def _check_events(events: EventSet, grid: SpatioTemporalGrid, t0: float, t1: float):
    if not events.projected:
        events = project(events, grid.projection)
    pts = events.points()
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    inside = (
        (pts[:, 0] >= x0) & (pts[:, 0] < x1) & (pts[:, 1] >= y0) & (pts[:, 1] < y1)
        & (pts[:, 2] >= t0) & (pts[:, 2] < t1)
    )
    if not np.all(inside):
        raise EventOutsideDomain(f"{np.count_nonzero(~inside)} events outside the evaluated domain")
    return pts


def evaluate_loglik(rate, events: EventSet, grid: SpatioTemporalGrid, t0: float, t1: float,
                    cfg: EvalConfig | None = None) -> tuple[LoglikTerms, np.ndarray, IntegrationGrid, np.ndarray]:
    """Terms plus the raw rates they were computed from (for persistence)."""
    cfg = cfg or EvalConfig()
    pts = _check_events(events, grid, t0, t1)
    ig = integration_grid(grid, t0, t1, cfg)
    ev_rates = np.asarray(rate(pts), dtype=float) if len(pts) else np.zeros(0)
    g_rates = np.asarray(rate(ig.points), dtype=float) if len(ig.points) else np.zeros(0)
    return loglik_terms(ev_rates, g_rates, ig.volumes, cfg.rate_floor), ev_rates, ig, g_rates


def poisson_loglik(rate, events: EventSet, grid: SpatioTemporalGrid, t0: float, t1: float,
                   cfg: EvalConfig | None = None) -> float:
    """Log-likelihood of ``events`` (projected) over ``[t0, t1)`` and the grid's spatial extent."""
    return evaluate_loglik(rate, events, grid, t0, t1, cfg)[0].value


# --------------------------------------------------------------------------
# MAE and residuals


def _land3(actual: BinnedCounts, land_mask: LandMask | None):
    if land_mask is None:
        return np.ones(actual.counts.shape, dtype=bool)
    land_mask.check(actual.grid)
    return np.broadcast_to(land_mask.mask, actual.counts.shape)


def expected_counts(rate, actual: BinnedCounts) -> np.ndarray:
    rate = np.asarray(rate, dtype=float)
    if rate.shape != actual.counts.shape:
        raise ShapeMismatch(f"rate shape {rate.shape} != counts shape {actual.counts.shape}")
    return rate * actual.grid.bin_volume


def mae_terms(rate, actual: BinnedCounts, land_mask: LandMask | None = None) -> tuple[float, int]:
    """(sum of absolute errors, number of land bins)."""
    err = np.abs(expected_counts(rate, actual) - actual.counts)
    land = _land3(actual, land_mask)
    return float(np.sum(err[land])), int(np.count_nonzero(land))


def mae(rate, actual: BinnedCounts, land_mask: LandMask | None = None) -> float:
    """Mean over land bins of ``|rate * A * tau - count|``; ``rate`` has the counts' shape."""
    s, n = mae_terms(rate, actual, land_mask)
    return s / n if n else float("nan")


@dataclass(frozen=True)
class ResidualBreakdown:
    by_count: dict  # count value -> {n, mean, q05, q25, q50, q75, q95}
    cell_mean: np.ndarray  # (ny, nx), NaN on masked cells
    overall_mean: float
    n: int


def residual_breakdown(rate, actual: BinnedCounts, land_mask: LandMask | None = None) -> ResidualBreakdown:
    """Residuals ``rate * A * tau - count`` grouped by observed count and by cell."""
    r = expected_counts(rate, actual) - actual.counts
    land = _land3(actual, land_mask)
    groups = {}
    counts = actual.counts[land]
    res = r[land]
    for c in np.unique(counts):
        v = res[counts == c]
        q = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
        groups[int(c)] = {"n": int(len(v)), "mean": float(np.mean(v)),
                          "q05": q[0], "q25": q[1], "q50": q[2], "q75": q[3], "q95": q[4]}
    with np.errstate(invalid="ignore"):
        cell = np.where(land[0], r.mean(axis=0), np.nan) if r.shape[0] else np.full(r.shape[1:], np.nan)
    overall = float(np.mean(res)) if res.size else float("nan")
    return ResidualBreakdown(groups, cell, overall, int(res.size))


# --------------------------------------------------------------------------
# per-fold tables


@dataclass(frozen=True)
class FoldScore:
    fold_start: float
    fold_end: float
    mae_sum: float
    n_bins: int
    loglik: LoglikTerms

    @property
    def mae(self) -> float:
        return self.mae_sum / self.n_bins if self.n_bins else float("nan")


def weekly_scores(folds) -> tuple[list, dict]:
    """Per-fold rows ``(fold_start, mae, loglik)`` and the global scores.

    The global MAE is the bin-weighted mean of fold MAEs; the global
    log-likelihood treats all folds as one window (one ``log k!`` term).
    """
    folds = list(folds)
    rows = [{"fold_start": f.fold_start, "fold_end": f.fold_end, "mae": f.mae,
             "loglik": f.loglik.value, "n_bins": f.n_bins, "n_events": f.loglik.k} for f in folds]
    n = sum(f.n_bins for f in folds)
    glob = {
        "mae": math.fsum(f.mae_sum for f in folds) / n if n else float("nan"),
        "loglik": combine_loglik(f.loglik for f in folds) if folds else 0.0,
        "n_bins": n,
        "n_events": sum(f.loglik.k for f in folds),
        "n_folds": len(folds),
    }
    return rows, glob
