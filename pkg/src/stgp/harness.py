"""Rolling weekly backtest of the GP model against MEDIC.

For each fold starting at ``t_te``: train on bins before ``t_te`` (clipped to
the trailing ``max_training_span``), predict ``[t_te, min(t_te + fold, t_end))``
and step ``t_te`` forward by one fold length, clamping at ``t_end``. MEDIC
uses the whole history before ``t_te``.

Every fold keeps the raw rates each method produced (per test bin, per test
event and per integration-grid point), and all reported scores are computed
from those raw arrays by :func:`score_fold`. A persisted report can therefore
be re-scored bit-exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import medic, metrics, svgp
from .data import (
    BinnedCounts,
    BoundingBox,
    EventSet,
    LandMask,
    SpatioTemporalGrid,
    bin_events,
    filter_events,
    project,
)
from .errors import InsufficientHistory, LeakageError, NumericalError
from .optimize import OptimizerConfig

log = logging.getLogger(__name__)

WEEK_HOURS = 168.0
SIX_MONTHS_HOURS = 182.5 * 24.0
PAPER_ELBO_THRESHOLD = -1.07e4
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class BacktestConfig:
    bbox: BoundingBox
    test_start: float
    test_end: float
    nx: int = 6
    ny: int = 6
    t_bin: float = 4.0
    fold_length: float = WEEK_HOURS
    max_training_span: float = SIX_MONTHS_HOURS
    history_start: float | None = None
    elbo_threshold: float = PAPER_ELBO_THRESHOLD
    max_retrains: int = 5
    master_seed: int = 0
    emergencies_only: bool = True
    include_constant_baseline: bool = False
    model: svgp.ModelConfig = field(default_factory=svgp.ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    medic: medic.MedicConfig = field(default_factory=medic.MedicConfig)
    eval: metrics.EvalConfig = field(default_factory=metrics.EvalConfig)

    def __post_init__(self):
        if not self.test_start < self.test_end:
            raise ValueError("test_start must precede test_end")
        if not self.fold_length > 0:
            raise ValueError("fold_length must be positive")
        if self.max_retrains < 0:
            raise ValueError("max_retrains must be non-negative")


# --------------------------------------------------------------------------
# seeds


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *indices: int) -> int:
    """Chain ``splitmix64`` over ``seed`` and each index; a 64-bit result."""
    h = splitmix64(seed & MASK64)
    for i in indices:
        h = splitmix64(h ^ (i & MASK64))
    return h


# --------------------------------------------------------------------------
# folds and the retrain guard


def fold_windows(test_start: float, test_end: float, fold_length: float = WEEK_HOURS) -> list:
    """``[(start, end), ...]`` tiling ``[test_start, test_end)``."""
    out = []
    t = test_start
    while t < test_end:
        nxt = min(t + fold_length, test_end)
        out.append((t, nxt))
        t = nxt
    return out


@dataclass
class GuardOutcome:
    state: object
    elbo: float
    elbos: list
    accepted: int
    flagged: bool
    result: tuple = ()  # the kept attempt as returned by the fit

    @property
    def n_retrains(self) -> int:
        return len(self.elbos) - 1


def retrain_guard(first, retrain: Callable[[int], tuple], cfg: BacktestConfig, fold_seed: int) -> GuardOutcome:
    """Retrain with fresh seeds while the training bound is below threshold.

    ``first`` is ``(state, elbo, ...)`` from the initial fit and
    ``retrain(seed)`` returns the same for a new seed. The first attempt at
    or above the threshold is accepted; after ``max_retrains`` failures the
    best attempt is kept and the fold is flagged. An attempt whose state is
    ``None`` failed outright; its third element is the exception, re-raised
    if every attempt failed that way.
    """
    attempts = [first]
    if first[0] is not None and first[1] >= cfg.elbo_threshold:
        return GuardOutcome(first[0], first[1], [first[1]], 0, False, first)
    for a in range(1, cfg.max_retrains + 1):
        res = retrain(derive_seed(fold_seed, a))
        attempts.append(res)
        if res[0] is not None and res[1] >= cfg.elbo_threshold:
            return GuardOutcome(res[0], res[1], [r[1] for r in attempts], a, False, res)
    elbos = [r[1] if r[0] is not None else -math.inf for r in attempts]
    if all(r[0] is None for r in attempts):
        raise attempts[-1][2]
    best = int(np.argmax(elbos))
    log.warning("retrain guard: no attempt reached %.4g; keeping attempt %d (%.4g)",
                cfg.elbo_threshold, best, elbos[best])
    return GuardOutcome(attempts[best][0], elbos[best], elbos, best, True, attempts[best])


# --------------------------------------------------------------------------
# raw fold predictions and scoring


@dataclass
class FoldRaw:
    """Everything needed to score one method on one fold."""

    fold_start: float
    fold_end: float
    bin_rates: np.ndarray  # (n_t, ny, nx) per km^2 per hour
    counts: np.ndarray  # (n_t, ny, nx)
    event_rates: np.ndarray  # (k,)
    grid_rates: np.ndarray  # (P,)
    grid_volumes: np.ndarray  # (P,)


def score_fold(raw: FoldRaw, bin_volume: float, land: np.ndarray, rate_floor: float) -> metrics.FoldScore:
    err = np.abs(raw.bin_rates * bin_volume - raw.counts)
    land3 = np.broadcast_to(land, raw.counts.shape)
    terms = metrics.loglik_terms(raw.event_rates, raw.grid_rates, raw.grid_volumes, rate_floor)
    return metrics.FoldScore(raw.fold_start, raw.fold_end, float(np.sum(err[land3])),
                             int(np.count_nonzero(land3)), terms)


@dataclass
class FoldInfo:
    index: int
    start: float
    end: float
    train_start: float
    train_end: float
    n_train_bins: int
    seed: int
    elbos: list
    accepted: int
    flagged: bool
    opt_status: str = ""
    opt_iterations: int = 0


@dataclass
class BacktestReport:
    methods: list
    folds: list  # FoldInfo
    raw: dict  # method -> list[FoldRaw]
    grid: SpatioTemporalGrid
    land: np.ndarray
    rate_floor: float
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def scores(self) -> dict:
        """method -> (rows, global)"""
        out = {}
        for m in self.methods:
            fs = [score_fold(r, self.grid.bin_volume, self.land, self.rate_floor) for r in self.raw[m]]
            out[m] = metrics.weekly_scores(fs)
        return out

    def summary(self) -> dict:
        return {m: g for m, (_, g) in self.scores().items()}

    def residuals(self, method: str) -> metrics.ResidualBreakdown:
        raws = self.raw[method]
        g = self.grid
        if not raws:
            empty = BinnedCounts(g.with_time(g.t_start, g.t_start), np.zeros((0, g.ny, g.nx), dtype=np.int64))
            return metrics.residual_breakdown(np.zeros(empty.counts.shape), empty, LandMask(self.land))
        rates = np.concatenate([r.bin_rates for r in raws])
        counts = np.concatenate([r.counts for r in raws])
        stacked = BinnedCounts(g.with_time(g.t_start, g.t_start + len(counts) * g.t_bin), counts)
        return metrics.residual_breakdown(rates, stacked, LandMask(self.land))


# --------------------------------------------------------------------------
# the backtest


def _aligned_start(cfg: BacktestConfig, events: EventSet) -> float:
    t_min = cfg.history_start
    if t_min is None:
        t_min = float(np.min(events.t)) if len(events) else cfg.test_start
    n = math.ceil((cfg.test_start - t_min) / cfg.t_bin - 1e-9)
    return cfg.test_start - max(n, 0) * cfg.t_bin


def _bin_index(grid: SpatioTemporalGrid, t: float) -> int:
    return int(round((t - grid.t_start) / grid.t_bin))


def run_backtest(cfg: BacktestConfig, events: EventSet, land_mask: LandMask | None = None,
                 extra_rates: dict | None = None, config_dict: dict | None = None) -> BacktestReport:
    """Run the rolling backtest.

    ``extra_rates`` maps a method name to a rate callable scored alongside
    the two predictors (for example the generating intensity of synthetic
    data).
    """
    wall0 = time.time()
    bbox = cfg.bbox
    ev = filter_events(events, bbox, cfg.emergencies_only)
    g0 = SpatioTemporalGrid(bbox, 0.0, 0.0, cfg.nx, cfg.ny, cfg.t_bin)
    ev = project(ev, g0.projection)
    start = _aligned_start(cfg, ev)
    if cfg.test_start - start < cfg.fold_length:
        raise InsufficientHistory(
            f"only {cfg.test_start - start:.1f} h of history before the test window; need {cfg.fold_length:.1f}"
        )
    n_test_bins = math.ceil((cfg.test_end - cfg.test_start) / cfg.t_bin - 1e-9)
    grid = SpatioTemporalGrid(bbox, start, cfg.test_start + n_test_bins * cfg.t_bin, cfg.nx, cfg.ny, cfg.t_bin,
                              g0.projection)
    binned = bin_events(ev, grid)
    land = (land_mask or LandMask.all_land(grid))
    land.check(grid)
    eval_cfg = dataclasses.replace(cfg.eval, land_mask=land)

    methods = ["STGP", "MEDIC"]
    if cfg.include_constant_baseline:
        methods.append("CONST")
    methods += list(extra_rates or {})
    raw = {m: [] for m in methods}
    infos = []

    for fi, (t_te, t_next) in enumerate(fold_windows(cfg.test_start, cfg.test_end, cfg.fold_length)):
        i_te = _bin_index(grid, t_te)
        i_next = min(math.ceil((t_next - grid.t_start) / grid.t_bin - 1e-9), grid.n_t)
        i_tr0 = max(0, math.ceil((t_te - cfg.max_training_span - grid.t_start) / grid.t_bin - 1e-9))
        history = binned.time_slice(0, i_te)
        train_set = binned.time_slice(i_tr0, i_te)
        test = binned.time_slice(i_te, i_next)
        # structural anti-leakage audit
        if not (train_set.grid.t_end <= t_te + 1e-9 and history.grid.t_end <= t_te + 1e-9):
            raise LeakageError(f"fold {fi}: training data reaches past {t_te}")
        late = ev.in_window(train_set.grid.t_start, math.inf).t
        if np.any(late[late < train_set.grid.t_end] >= t_te):
            raise LeakageError(f"fold {fi}: a training event is not before {t_te}")
        if train_set.n_bins == 0:
            raise InsufficientHistory(f"fold {fi}: no training bins before {t_te}")

        fold_seed = derive_seed(cfg.master_seed, fi)

        def fit(seed, train_set=train_set):
            mc = dataclasses.replace(cfg.model, seed=seed)
            try:
                return svgp.train(mc, train_set, cfg.optimizer)
            except NumericalError as exc:
                log.warning("fold %d: training failed with seed %d: %s", fi, seed, exc)
                return None, -math.inf, exc

        first = fit(derive_seed(fold_seed, 0))
        guard = retrain_guard(first, fit, cfg, fold_seed)
        state = guard.state

        fold_events = ev.in_window(t_te, t_next)
        ig = metrics.integration_grid(grid, t_te, t_next, eval_cfg)
        ev_pts = fold_events.points()
        bv = grid.bin_volume
        test_centers = test.grid.bin_centers()

        def make_raw(rate_fn, bin_rates=None):
            if bin_rates is None:
                bin_rates = np.asarray(rate_fn(test_centers), dtype=float).reshape(test.counts.shape)
            return FoldRaw(t_te, t_next, bin_rates, test.counts.copy(),
                           np.asarray(rate_fn(ev_pts), dtype=float) if len(ev_pts) else np.zeros(0),
                           np.asarray(rate_fn(ig.points), dtype=float), ig.volumes)

        raw["STGP"].append(make_raw(svgp.GPRate(state, bv)))
        mp = medic.medic_forecast(history, test.grid, cfg.medic)
        medic_rates = mp.counts / bv
        raw["MEDIC"].append(make_raw(metrics.GridRate(test.grid, medic_rates), medic_rates))
        if cfg.include_constant_baseline:
            const = float(train_set.counts.sum()) / (train_set.n_bins * bv)
            raw["CONST"].append(make_raw(metrics.ConstantRate(const)))
        for name, fn in (extra_rates or {}).items():
            raw[name].append(make_raw(fn))

        opt = guard.result[2] if isinstance(guard.result, svgp.TrainResult) else None
        infos.append(FoldInfo(fi, t_te, t_next, train_set.grid.t_start, train_set.grid.t_end, train_set.n_bins,
                              fold_seed, guard.elbos, guard.accepted, guard.flagged,
                              opt.status.value if opt is not None else "", opt.iterations if opt is not None else 0))
        log.info("fold %d [%g, %g): %d train bins, bound %.5g, %d retrains", fi, t_te, t_next,
                 train_set.n_bins, guard.elbo, guard.n_retrains)

    provenance = {
        "config_hash": config_hash(config_dict) if config_dict is not None else None,
        "master_seed": cfg.master_seed,
        "n_events": len(ev),
        "dropped_events": binned.dropped,
        "started": wall0,
        "finished": time.time(),
    }
    return BacktestReport(methods, infos, raw, grid, land.mask.copy(), cfg.eval.rate_floor,
                          config_dict or {}, provenance)


# --------------------------------------------------------------------------
# persistence


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _grid_meta(grid: SpatioTemporalGrid) -> dict:
    b = grid.bbox
    return {"bbox": [b.lat_min, b.lon_min, b.lat_max, b.lon_max], "t_start": grid.t_start,
            "t_end": grid.t_end, "nx": grid.nx, "ny": grid.ny, "t_bin": grid.t_bin}


def _grid_from_meta(d: dict) -> SpatioTemporalGrid:
    return SpatioTemporalGrid(BoundingBox(*d["bbox"]), d["t_start"], d["t_end"], d["nx"], d["ny"], d["t_bin"])


def write_tables(report: BacktestReport, out: Path) -> dict:
    scores = report.scores()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mae", "loglik", "n_folds", "n_bins", "n_events"])
        for m in report.methods:
            g = scores[m][1]
            w.writerow([m, repr(g["mae"]), repr(g["loglik"]), g["n_folds"], g["n_bins"], g["n_events"]])
    with open(out / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "fold_index", "fold_start", "fold_end", "mae", "loglik", "n_bins", "n_events"])
        for m in report.methods:
            for i, r in enumerate(scores[m][0]):
                w.writerow([m, i, r["fold_start"], r["fold_end"], repr(r["mae"]), repr(r["loglik"]),
                            r["n_bins"], r["n_events"]])
    for m in report.methods:
        rb = report.residuals(m)
        with open(out / f"residuals_{m}_by_count.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["count", "n", "mean", "q05", "q25", "q50", "q75", "q95"])
            for c, s in sorted(rb.by_count.items()):
                w.writerow([c, s["n"], s["mean"], s["q05"], s["q25"], s["q50"], s["q75"], s["q95"]])
        np.savetxt(out / f"residuals_{m}_by_cell.txt", rb.cell_mean, fmt="%.6g",
                   header="mean residual per cell; row 0 = southernmost")
    return scores


def persist_report(report: BacktestReport, out_dir) -> list:
    """Write summary/fold/residual tables, raw predictions and the resolved config."""
    import yaml

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"land": report.land, "rate_floor": np.array(report.rate_floor)}
    for m in report.methods:
        for i, r in enumerate(report.raw[m]):
            for name in ("bin_rates", "counts", "event_rates", "grid_rates", "grid_volumes"):
                arrays[f"{m}/{i}/{name}"] = getattr(r, name)
            arrays[f"{m}/{i}/window"] = np.array([r.fold_start, r.fold_end])
    meta = {"methods": report.methods, "grid": _grid_meta(report.grid),
            "n_folds": {m: len(report.raw[m]) for m in report.methods}}
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(out / "predictions.npz", **arrays)
    scores = write_tables(report, out)
    summary = {
        "global": {m: scores[m][1] for m in report.methods},
        "folds": [dataclasses.asdict(f) for f in report.folds],
        "provenance": report.provenance,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    (out / "config.yaml").write_text(yaml.safe_dump(report.config, sort_keys=True))
    return sorted(p.name for p in out.iterdir())


def load_report(out_dir) -> BacktestReport:
    """Rebuild a report from persisted raw predictions (scores recomputed on demand)."""
    import yaml

    out = Path(out_dir)
    with np.load(out / "predictions.npz") as z:
        meta = json.loads(str(z["meta"]))
        raw = {}
        for m in meta["methods"]:
            raw[m] = []
            for i in range(meta["n_folds"][m]):
                w = z[f"{m}/{i}/window"]
                raw[m].append(FoldRaw(float(w[0]), float(w[1]), z[f"{m}/{i}/bin_rates"], z[f"{m}/{i}/counts"],
                                      z[f"{m}/{i}/event_rates"], z[f"{m}/{i}/grid_rates"],
                                      z[f"{m}/{i}/grid_volumes"]))
        land = z["land"].copy()
        floor = float(z["rate_floor"])
    cfg_path = out / "config.yaml"
    config = yaml.safe_load(cfg_path.read_text()) if cfg_path.exists() else {}
    return BacktestReport(meta["methods"], [], raw, _grid_from_meta(meta["grid"]), land, floor, config or {})
