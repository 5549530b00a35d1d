"""Command line entry point: ``stgp <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import harness, metrics, svgp, synth
from .data import (
    EventSet,
    bin_events,
    filter_events,
    load_events,
    load_land_mask,
    project,
    save_events,
    write_csv,
)
from .errors import DataError, NumericalError

log = logging.getLogger("stgp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _events(cfg, path) -> EventSet:
    return load_events(path, cfg["data"]["schema"], C.epoch(cfg))


def _window(cfg, events: EventSet | None = None):
    w = cfg["window"]
    t0, t1 = C.to_hours(w["start"], cfg), C.to_hours(w["end"], cfg)
    if events is not None and len(events):
        t0 = float(np.floor(events.t.min())) if t0 is None else t0
        t1 = float(events.t.max()) + 1e-9 if t1 is None else t1
    if t0 is None or t1 is None:
        raise UsageError("window.start and window.end are required")
    if not t1 > t0:
        raise UsageError("window.end must be after window.start")
    return t0, t1


def _grid_and_counts(cfg, events, t0, t1):
    g = C.grid(cfg, t0, t1)
    ev = project(filter_events(events, g.bbox, cfg["data"]["emergencies_only"]), g.projection)
    return g, ev, bin_events(ev, g)


def _land(cfg, grid):
    path = cfg["data"].get("land_mask")
    return load_land_mask(path, grid) if path else None


def _print_summary(summary: dict, out=None):
    out = out or sys.stdout
    print(f"{'method':<8} {'MAE':>10} {'log-likelihood':>16} {'folds':>6}", file=out)
    for m, g in summary.items():
        print(f"{m:<8} {g['mae']:>10.4f} {g['loglik']:>16.6g} {g['n_folds']:>6d}", file=out)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg):
    events = _events(cfg, args.input)
    save_events(events, args.output)
    print(f"ingested {len(events)} events ({len(events.rejected)} rows rejected) -> {args.output}")


def cmd_synth(args, cfg):
    s = cfg["synth"]
    g = cfg["grid"]
    if s.get("demo", True):
        spec = synth.demo_spec(weeks=float(s["weeks"]), seed=int(cfg["seed"]), mean_count=float(s["mean_count"]),
                               t_start=float(s["t_start"]), nx=int(g["nx"]), ny=int(g["ny"]), t_bin=float(g["t_bin"]))
    else:
        spec = synth.spec_from_dict({**s, "seed": cfg["seed"]})
    events = dataclasses.replace(synth.sample_events(spec), epoch=C.epoch(cfg))
    write_csv(events, args.output)
    b = spec.bbox
    print(f"wrote {len(events)} events -> {args.output}")
    print(f"bbox: [{b.lat_min}, {b.lon_min}, {b.lat_max}, {b.lon_max}]  hours: [{spec.t_start}, {spec.t_end})")


def cmd_train(args, cfg):
    events = _events(cfg, args.events)
    t0, t1 = _window(cfg, events)
    grid, _, counts = _grid_and_counts(cfg, events, t0, t1)
    res = svgp.train(C.model_config(cfg), counts, C.optimizer_config(cfg))
    meta = {"bbox": cfg["grid"]["bbox"], "nx": grid.nx, "ny": grid.ny, "t_bin": grid.t_bin,
            "t_start": grid.t_start, "t_end": grid.t_end}
    svgp.save_state(res.state, args.output, meta)
    print(f"trained on {counts.n_bins} bins: bound {res.elbo:.6g}, {res.opt.status.value} "
          f"after {res.opt.iterations} iterations -> {args.output}")


def cmd_predict(args, cfg):
    state, meta = svgp.load_state(args.model)
    t0, t1 = _window(cfg)
    grid = C.grid(cfg, t0, t1)
    for key in ("nx", "ny", "t_bin"):
        if key in meta and meta[key] != getattr(grid, key):
            log.warning("model was trained with %s=%s, predicting with %s", key, meta[key], getattr(grid, key))
    field = svgp.predict_rate(state, grid.bin_centers(), grid.bin_volume)
    it, iy, ix = np.unravel_index(np.arange(len(field.rate)), grid.shape)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_start", "iy", "ix", "x", "y", "t", "rate", "expected_count", "latent_mean", "latent_var"])
        for k in range(len(field.rate)):
            x, y, t = field.points[k]
            w.writerow([grid.t_edges[it[k]], iy[k], ix[k], x, y, t, repr(float(field.rate[k])),
                        repr(float(field.rate[k] * grid.bin_volume)), field.latent_mean[k], field.latent_var[k]])
    print(f"wrote {len(field.rate)} bin rates -> {args.output}")


def read_rate_table(path, grid) -> np.ndarray:
    rates = np.full(grid.shape, np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            it = int(round((float(row["t_start"]) - grid.t_start) / grid.t_bin))
            iy, ix = int(row["iy"]), int(row["ix"])
            if not (0 <= it < grid.n_t and 0 <= iy < grid.ny and 0 <= ix < grid.nx):
                raise DataError(f"{path}: row outside the evaluation grid: {row}")
            rates[it, iy, ix] = float(row["rate"])
    if np.isnan(rates).any():
        raise DataError(f"{path}: {int(np.isnan(rates).sum())} grid bins have no prediction")
    return rates


def cmd_evaluate(args, cfg):
    events = _events(cfg, args.events)
    t0, t1 = _window(cfg)
    grid, ev, counts = _grid_and_counts(cfg, events, t0, t1)
    land = _land(cfg, grid)
    ecfg = dataclasses.replace(C.eval_config(cfg), land_mask=land)
    if args.model:
        state, _ = svgp.load_state(args.model)
        rate = svgp.GPRate(state, grid.bin_volume)
        bin_rates = rate(grid.bin_centers()).reshape(grid.shape)
    else:
        bin_rates = read_rate_table(args.predictions, grid)
        rate = metrics.GridRate(grid, bin_rates)
    ev = ev.in_window(grid.t_start, grid.t_end)
    terms = metrics.evaluate_loglik(rate, ev, grid, grid.t_start, grid.t_end, ecfg)[0]
    s, n = metrics.mae_terms(bin_rates, counts, land)
    out = {"mae": s / n if n else float("nan"), "loglik": terms.value, "n_bins": n, "n_events": terms.k}
    print(json.dumps(out, indent=2))
    if args.output:
        Path(args.output).write_text(json.dumps(out, indent=2))


def cmd_backtest(args, cfg):
    events = _events(cfg, args.events)
    bcfg = C.backtest_config(cfg)
    land = None
    if cfg["data"].get("land_mask"):
        land = load_land_mask(cfg["data"]["land_mask"], C.grid(cfg, bcfg.test_start, bcfg.test_end))
    report = harness.run_backtest(bcfg, events, land, config_dict=cfg)
    harness.persist_report(report, args.output)
    _print_summary(report.summary())
    flagged = [f.index for f in report.folds if f.flagged]
    if flagged:
        print(f"folds flagged by the retrain guard: {flagged}")
    print(f"results -> {args.output}")


def cmd_report(args, cfg):
    report = harness.load_report(args.input)
    out = Path(args.output) if args.output else Path(args.input)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_tables(report, out)
    _print_summary(report.summary())


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. model.num_inducing=100 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (config key: seed)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")

    p = _Parser(prog="stgp", description="Spatiotemporal demand forecasting with a log-Gaussian Cox process.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="CSV -> validated event store (.npz)")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", parents=[common], help="sample synthetic events -> CSV")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="fit one model on window.start..window.end")
    s.add_argument("--events", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="model -> per-bin rate table (CSV)")
    s.add_argument("--model", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="score predictions against events")
    s.add_argument("--events", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--predictions", help="rate table written by predict")
    g.add_argument("--model", help="score a saved model's continuous rate")
    s.add_argument("--output", help="write scores as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("backtest", parents=[common], help="rolling weekly backtest, GP model vs MEDIC")
    s.add_argument("--events", required=True)
    s.add_argument("--output", required=True, help="result directory")
    s.set_defaults(func=cmd_backtest)

    s = sub.add_parser("report", parents=[common], help="re-render tables from a backtest directory")
    s.add_argument("--input", required=True)
    s.add_argument("--output", help="directory for the tables (default: the input directory)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.dump_config:
            print(C.dump_config(cfg), end="")
            return 0
        args.func(args, cfg)
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, KeyError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
