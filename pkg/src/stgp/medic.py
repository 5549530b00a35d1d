"""MEDIC baseline: per cell, average the same time bin over recent weeks and years.

For a test bin at time index ``t`` the gathered values are the counts in the
same cell at ``t - y * year_weeks * B - w * B`` for ``w = 1..weeks_back`` and
``y = 0..years_back``, where ``B`` is the number of bins per week. Years are
exact ``year_weeks``-week strides. Slots that fall before the start of the
history are skipped rather than zero-filled; a bin with nothing to gather is
predicted as 0 and counted in ``no_history``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .data import BinnedCounts, SpatioTemporalGrid
from .errors import LeakageError

HOURS_PER_WEEK = 168.0


@dataclass(frozen=True)
class MedicConfig:
    weeks_back: int = 4
    years_back: int | None = None  # None: every year the history covers
    year_weeks: int = 52

    def __post_init__(self):
        if self.weeks_back < 1:
            raise ValueError("weeks_back must be at least 1")
        if self.years_back is not None and self.years_back < 0:
            raise ValueError("years_back must be non-negative")


@dataclass(frozen=True)
class MedicPrediction:
    counts: np.ndarray
    n_gathered: np.ndarray
    no_history: int


def bins_per_week(t_bin: float) -> int:
    b = HOURS_PER_WEEK / t_bin
    if abs(b - round(b)) > 1e-9:
        raise ValueError(f"a week is not a whole number of {t_bin} h bins")
    return int(round(b))


def lookback_offsets(history_len: int, B: int, cfg: MedicConfig) -> np.ndarray:
    year = cfg.year_weeks * B
    if cfg.years_back is None:
        years = max(history_len - 1, 0) // year
    else:
        years = cfg.years_back
    return np.array([y * year + w * B for y in range(years + 1) for w in range(1, cfg.weeks_back + 1)],
                    dtype=np.int64)


def medic_predict(history: BinnedCounts, test_t, test_cell, cfg: MedicConfig | None = None) -> MedicPrediction:
    """Predicted counts for test bins ``(test_t[i], test_cell[i])``.

    ``test_t`` indexes time bins on the history grid's axis (so the first bin
    after the history is ``history.grid.n_t``); ``test_cell`` is the flat
    ``iy * nx + ix`` cell index.
    """
    cfg = cfg or MedicConfig()
    g = history.grid
    B = bins_per_week(g.t_bin)
    test_t = np.asarray(test_t, dtype=np.int64)
    test_cell = np.asarray(test_cell, dtype=np.int64)
    hist_len = g.n_t
    if np.any(test_t < hist_len):
        raise LeakageError("test bins overlap the history")
    years_span = int(test_t.max()) + 1 if len(test_t) else hist_len
    offsets = lookback_offsets(years_span, B, cfg)
    counts2d = history.counts.reshape(hist_len, g.n_cells)
    sums, ns, leaks = _accel.medic_gather(counts2d, test_t, test_cell, offsets, hist_len)
    if leaks:
        raise LeakageError(f"{leaks} lookback slots fall inside the test period")
    pred = np.where(ns > 0, sums / np.maximum(ns, 1), 0.0)
    return MedicPrediction(pred, ns, int(np.count_nonzero(ns == 0)))


def medic_forecast(history: BinnedCounts, test_grid: SpatioTemporalGrid,
                   cfg: MedicConfig | None = None) -> MedicPrediction:
    """Predicted counts for every bin of ``test_grid`` (shape ``test_grid.shape``)."""
    g = history.grid
    start = (test_grid.t_start - g.t_start) / g.t_bin
    if abs(start - round(start)) > 1e-9 or test_grid.t_bin != g.t_bin:
        raise ValueError("test grid is not aligned with the history grid")
    n_t, n_c = test_grid.n_t, test_grid.n_cells
    tt = np.repeat(np.arange(n_t, dtype=np.int64) + int(round(start)), n_c)
    cc = np.tile(np.arange(n_c, dtype=np.int64), n_t)
    p = medic_predict(history, tt, cc, cfg)
    return MedicPrediction(p.counts.reshape(test_grid.shape), p.n_gathered.reshape(test_grid.shape), p.no_history)
