"""Synthetic events from a known intensity, by thinning.

The intensity family is

    lam(x, y, t) = exp(a + b sin(2 pi t / 24 + phi) + sum_k h_k exp(-|s - c_k|^2 / (2 w_k^2)))

in events / km^2 / hour, with ``s = (x, y)`` in km of the spec's projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import i0

from . import metrics
from .data import BoundingBox, EventSet, Projection, SpatioTemporalGrid
from .errors import UnboundedIntensity

DAY_HOURS = 24.0
LAMBDA_MAX_SAFETY = 1.05
LATTICE = (200, 200, 96)


@dataclass(frozen=True)
class Bump:
    cx: float
    cy: float
    width: float
    height: float


@dataclass(frozen=True)
class IntensitySpec:
    bbox: BoundingBox
    t_start: float
    t_end: float
    a: float = -6.0
    b: float = 0.0
    phi: float = 0.0
    bumps: tuple = ()
    seed: int = 0
    projection: Projection | None = field(default=None)

    def __post_init__(self):
        if self.projection is None:
            object.__setattr__(self, "projection", Projection.centered(self.bbox))
        if not self.t_end > self.t_start:
            raise ValueError("empty time range")
        vals = [self.a, self.b, self.phi] + [v for bp in self.bumps for v in (bp.cx, bp.cy, bp.width, bp.height)]
        if not all(math.isfinite(v) for v in vals):
            raise UnboundedIntensity("intensity parameters must be finite")
        if any(bp.width <= 0 for bp in self.bumps):
            raise ValueError("bump widths must be positive")

    @property
    def extent(self):
        x0, y0 = self.projection.forward(self.bbox.lat_min, self.bbox.lon_min)
        x1, y1 = self.projection.forward(self.bbox.lat_max, self.bbox.lon_max)
        return float(x0), float(x1), float(y0), float(y1)

    def log_spatial(self, x, y):
        g = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        for bp in self.bumps:
            g = g + bp.height * np.exp(-((x - bp.cx) ** 2 + (y - bp.cy) ** 2) / (2.0 * bp.width ** 2))
        return g

    def log_temporal(self, t):
        return self.b * np.sin(2.0 * np.pi * np.asarray(t) / DAY_HOURS + self.phi)

    def __call__(self, points):
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.exp(self.a + self.log_temporal(p[:, 2]) + self.log_spatial(p[:, 0], p[:, 1]))

    def lambda_max(self) -> float:
        """Dense lattice maximum times a safety factor (time over one period)."""
        x0, x1, y0, y1 = self.extent
        nx, ny, nt = LATTICE
        xs, ys = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny), indexing="ij")
        ts = np.linspace(0.0, DAY_HOURS, nt, endpoint=False)
        with np.errstate(over="ignore"):
            lmax = float(np.exp(self.a) * np.max(np.exp(self.log_spatial(xs, ys)))
                         * np.max(np.exp(self.log_temporal(ts))))
        if not math.isfinite(lmax):
            raise UnboundedIntensity(f"no finite bound on the intensity (got {lmax})")
        return LAMBDA_MAX_SAFETY * lmax

    def mean_spatial_factor(self, order: int = 64) -> float:
        x0, x1, y0, y1 = self.extent
        u, w = leggauss(order)
        xs = 0.5 * (x1 - x0) * u + 0.5 * (x1 + x0)
        ys = 0.5 * (y1 - y0) * u + 0.5 * (y1 + y0)
        G = np.exp(self.log_spatial(xs[:, None], ys[None, :]))
        return float(0.25 * w @ G @ w)

    def with_mean_count(self, target: float, bin_volume: float) -> IntensitySpec:
        """Shift ``a`` so a bin of ``bin_volume`` holds ``target`` events on average.

        Uses the exact time average ``I0(b)`` of ``exp(b sin)``.
        """
        mean_rate = target / bin_volume
        a = math.log(mean_rate / (float(i0(self.b)) * self.mean_spatial_factor()))
        return replace(self, a=a)


def sample_events(spec: IntensitySpec, seed: int | None = None) -> EventSet:
    """Thinning sampler; events are returned sorted by time."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lmax = spec.lambda_max()
    x0, x1, y0, y1 = spec.extent
    volume = (x1 - x0) * (y1 - y0) * (spec.t_end - spec.t_start)
    n = rng.poisson(lmax * volume)
    x = rng.uniform(x0, x1, n)
    y = rng.uniform(y0, y1, n)
    t = rng.uniform(spec.t_start, spec.t_end, n)
    u = rng.uniform(0.0, 1.0, n)
    lam = spec(np.column_stack([x, y, t]))
    if np.any(lam > lmax):
        raise UnboundedIntensity("intensity exceeded its lattice bound; raise the safety factor")
    keep = u * lmax < lam
    order = np.argsort(t[keep], kind="stable")
    x, y, t = x[keep][order], y[keep][order], t[keep][order]
    lat, lon = spec.projection.inverse(x, y)
    return EventSet.from_arrays(t, lat, lon, x=x, y=y)


def bin_expected_counts(spec: IntensitySpec, grid: SpatioTemporalGrid, order: int = 12) -> np.ndarray:
    """Integral of the intensity over every bin of ``grid`` (Gauss-Legendre per axis)."""
    u, w = leggauss(order)

    def axis(edges, fn):
        lo, hi = edges[:-1], edges[1:]
        nodes = 0.5 * (hi - lo)[:, None] * u[None, :] + 0.5 * (hi + lo)[:, None]
        return (np.exp(fn(nodes)) * w[None, :]).sum(axis=1) * 0.5 * (hi - lo)

    t_int = axis(grid.t_edges, spec.log_temporal)
    xe, ye = grid.x_edges, grid.y_edges
    xn = 0.5 * (xe[1:] - xe[:-1])[:, None] * u[None, :] + 0.5 * (xe[1:] + xe[:-1])[:, None]
    yn = 0.5 * (ye[1:] - ye[:-1])[:, None] * u[None, :] + 0.5 * (ye[1:] + ye[:-1])[:, None]
    # (ny, nx) spatial integrals
    G = np.exp(spec.log_spatial(xn[None, :, None, :], yn[:, None, :, None]))  # (ny, nx, qy, qx)
    s_int = np.einsum("abij,i,j->ab", G, w, w) * 0.25 * np.outer(ye[1:] - ye[:-1], xe[1:] - xe[:-1])
    return math.exp(spec.a) * t_int[:, None, None] * s_int[None, :, :]


def true_loglik(spec: IntensitySpec, events: EventSet, grid: SpatioTemporalGrid, t0: float, t1: float,
                cfg: metrics.EvalConfig | None = None) -> float:
    """Log-likelihood score of the generating intensity itself."""
    return metrics.poisson_loglik(spec, events, grid, t0, t1, cfg)


def demo_spec(weeks: float = 26.0, seed: int = 0, mean_count: float = 0.6, t_start: float = 0.0,
              nx: int = 6, ny: int = 6, t_bin: float = 4.0) -> IntensitySpec:
    """About 40 x 40 km around central Cape Town, diurnal amplitude 0.8, two bumps."""
    bbox = BoundingBox(-34.2, 18.25, -33.84, 18.684)
    spec = IntensitySpec(
        bbox=bbox,
        t_start=t_start,
        t_end=t_start + weeks * 168.0,
        b=0.8,
        phi=0.5 * math.pi - 2.0 * math.pi * 14.0 / DAY_HOURS,  # daily peak at 14:00
        bumps=(Bump(-6.0, 5.0, 7.0, 1.6), Bump(9.0, -8.0, 9.0, 1.0)),
        seed=seed,
    )
    grid = SpatioTemporalGrid(bbox, t_start, spec.t_end, nx, ny, t_bin, spec.projection)
    return spec.with_mean_count(mean_count, grid.bin_volume)


def spec_from_dict(d: dict) -> IntensitySpec:
    bbox = BoundingBox(*d["bbox"])
    bumps = tuple(Bump(*b) if isinstance(b, (list, tuple)) else Bump(**b) for b in d.get("bumps", ()))
    return IntensitySpec(bbox=bbox, t_start=float(d["t_start"]), t_end=float(d["t_end"]),
                         a=float(d.get("a", -6.0)), b=float(d.get("b", 0.0)), phi=float(d.get("phi", 0.0)),
                         bumps=bumps, seed=int(d.get("seed", 0)))
