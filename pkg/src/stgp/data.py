"""Event ingestion, filtering, projection and space-time binning.

Conventions
-----------
* Times are float hours since a configurable epoch (default the Unix epoch).
* Bounding-box filtering is strict-interior: an event on the box edge is
  dropped.
* Bin membership is half-open, ``[low, high)``: an event on an interior cell
  edge lands in the higher-index cell and is never double counted.
* Spatial coordinates are km in a local equirectangular projection centred on
  the bounding-box centroid; ``x`` is east, ``y`` is north and row 0 of any
  spatial raster is the southernmost row.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import _accel
from .errors import EmptyInput, MalformedRow, ShapeMismatch

log = logging.getLogger(__name__)

UNIX_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
KM_PER_DEG_LAT = 111.19

DEFAULT_SCHEMA = {
    "timestamp": "timestamp",
    "lat": "lat",
    "lon": "lon",
    "emergency": "emergency",
}


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lon_min: float
    lat_max: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError(f"degenerate bounding box {self}")

    @property
    def centroid(self):
        return 0.5 * (self.lat_min + self.lat_max), 0.5 * (self.lon_min + self.lon_max)

    def contains(self, lat, lon):
        """Strict-interior membership (vectorised)."""
        lat = np.asarray(lat)
        lon = np.asarray(lon)
        return (lat > self.lat_min) & (lat < self.lat_max) & (lon > self.lon_min) & (lon < self.lon_max)


# lower-left / upper-right corners as published for the Cape Town study area
CAPE_TOWN = BoundingBox(-34.98, 17.09, -30.16, 24.27)


@dataclass(frozen=True)
class Projection:
    origin_lat: float
    origin_lon: float
    km_per_deg_lat: float = KM_PER_DEG_LAT
    km_per_deg_lon: float | None = None

    def __post_init__(self):
        if self.km_per_deg_lon is None:
            object.__setattr__(
                self, "km_per_deg_lon", self.km_per_deg_lat * math.cos(math.radians(self.origin_lat))
            )
        if not (self.km_per_deg_lat > 0 and self.km_per_deg_lon > 0):
            raise ValueError("projection scale factors must be positive")

    @classmethod
    def centered(cls, bbox: BoundingBox, km_per_deg_lat: float = KM_PER_DEG_LAT) -> Projection:
        lat0, lon0 = bbox.centroid
        return cls(lat0, lon0, km_per_deg_lat)

    def forward(self, lat, lon):
        x = (np.asarray(lon, dtype=float) - self.origin_lon) * self.km_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.origin_lat) * self.km_per_deg_lat
        return x, y

    def inverse(self, x, y):
        lon = np.asarray(x, dtype=float) / self.km_per_deg_lon + self.origin_lon
        lat = np.asarray(y, dtype=float) / self.km_per_deg_lat + self.origin_lat
        return lat, lon


@dataclass(frozen=True, eq=False)
class EventSet:
    """Struct-of-arrays collection of call records.

    ``x``/``y`` are filled in by :func:`project`. ``rejected`` carries the
    malformed rows seen during ingestion.
    """

    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    emergency: np.ndarray
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    epoch: datetime = UNIX_EPOCH
    rejected: tuple = field(default=(), repr=False)

    def __post_init__(self):
        n = len(self.t)
        for name in ("lat", "lon", "emergency"):
            if len(getattr(self, name)) != n:
                raise ShapeMismatch(f"EventSet.{name} has length {len(getattr(self, name))}, expected {n}")

    @classmethod
    def from_arrays(cls, t, lat, lon, emergency=None, **kw) -> EventSet:
        t = np.asarray(t, dtype=float)
        if emergency is None:
            emergency = np.ones(len(t), dtype=bool)
        return cls(t, np.asarray(lat, dtype=float), np.asarray(lon, dtype=float),
                   np.asarray(emergency, dtype=bool), **kw)

    @classmethod
    def empty(cls) -> EventSet:
        return cls.from_arrays([], [], [])

    def __len__(self):
        return len(self.t)

    @property
    def projected(self) -> bool:
        return self.x is not None

    def subset(self, mask) -> EventSet:
        return replace(
            self,
            t=self.t[mask],
            lat=self.lat[mask],
            lon=self.lon[mask],
            emergency=self.emergency[mask],
            x=None if self.x is None else self.x[mask],
            y=None if self.y is None else self.y[mask],
        )

    def in_window(self, t0: float, t1: float) -> EventSet:
        return self.subset((self.t >= t0) & (self.t < t1))

    def points(self) -> np.ndarray:
        """(n, 3) array of ``(x_km, y_km, t_hours)``."""
        if self.x is None:
            raise ValueError("events are not projected")
        return np.column_stack([self.x, self.y, self.t])

    def equals(self, other: EventSet) -> bool:
        same = (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
            and np.array_equal(self.emergency, other.emergency)
        )
        return bool(same)


# --------------------------------------------------------------------------
# CSV I/O


def _parse_iso(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def _hours_since(text: str, epoch: datetime) -> float:
    text = text.strip()
    try:
        secs = int(text)
    except ValueError:
        secs = None
    if secs is not None:
        epoch_secs = (epoch - UNIX_EPOCH) // _ONE_SECOND
        return (secs - epoch_secs) / 3600.0
    try:
        fsecs = float(text)
    except ValueError:
        fsecs = None
    if fsecs is not None:
        return (fsecs - (epoch - UNIX_EPOCH).total_seconds()) / 3600.0
    micros = (_parse_iso(text) - epoch) // _ONE_MICRO
    return micros / 3.6e9


_ONE_SECOND = datetime(1970, 1, 1, 0, 0, 1, tzinfo=timezone.utc) - UNIX_EPOCH
_ONE_MICRO = _ONE_SECOND / 1_000_000


def _parse_flag(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "t", "yes", "y"):
        return True
    if v in ("0", "false", "f", "no", "n"):
        return False
    raise ValueError(f"bad emergency flag {text!r}")


def ingest_csv(path, schema: dict | None = None, epoch: datetime = UNIX_EPOCH) -> EventSet:
    """Read call records from a CSV file.

    Malformed rows are skipped and reported (logged and kept on
    ``EventSet.rejected``); zero valid rows raises :class:`EmptyInput`.
    A missing emergency column means every event counts as an emergency.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    ts, lats, lons, flags = [], [], [], []
    rejected = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for key in ("timestamp", "lat", "lon"):
            if schema[key] not in header:
                raise EmptyInput(f"{path}: missing required column {schema[key]!r}")
        has_flag = schema["emergency"] in header
        for i, row in enumerate(reader):
            try:
                t = _hours_since(row[schema["timestamp"]], epoch)
                lat = float(row[schema["lat"]])
                lon = float(row[schema["lon"]])
                flag = _parse_flag(row[schema["emergency"]]) if has_flag else True
                if not math.isfinite(t):
                    raise ValueError("non-finite timestamp")
                if not (-90.0 <= lat <= 90.0):
                    raise ValueError(f"latitude {lat} out of range")
                if not (-180.0 <= lon <= 180.0):
                    raise ValueError(f"longitude {lon} out of range")
            except (ValueError, TypeError, AttributeError) as exc:
                rejected.append(MalformedRow(i, str(exc)))
                continue
            ts.append(t)
            lats.append(lat)
            lons.append(lon)
            flags.append(flag)
    if rejected:
        log.warning("%s: skipped %d malformed rows (first: %s)", path, len(rejected), rejected[0])
    if not ts:
        raise EmptyInput(f"{path}: no valid rows")
    return EventSet.from_arrays(ts, lats, lons, flags, epoch=epoch, rejected=tuple(rejected))


def write_csv(events: EventSet, path) -> None:
    """Write events in the ingest format (integer epoch seconds)."""
    epoch_secs = (events.epoch - UNIX_EPOCH) // _ONE_SECOND
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "lat", "lon", "emergency"])
        for t, lat, lon, e in zip(events.t, events.lat, events.lon, events.emergency):
            w.writerow([int(round(t * 3600.0)) + epoch_secs, repr(float(lat)), repr(float(lon)), int(e)])


def save_events(events: EventSet, path) -> None:
    """Validated event store (``.npz``)."""
    np.savez(
        path,
        t=events.t,
        lat=events.lat,
        lon=events.lon,
        emergency=events.emergency,
        epoch=np.array(events.epoch.isoformat()),
    )


def load_events(path, schema=None, epoch: datetime = UNIX_EPOCH) -> EventSet:
    """Load events from either an ``.npz`` event store or a CSV file."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return EventSet.from_arrays(
                z["t"], z["lat"], z["lon"], z["emergency"], epoch=_parse_iso(str(z["epoch"]))
            )
    return ingest_csv(path, schema, epoch)


# --------------------------------------------------------------------------
# filtering and projection


def filter_events(events: EventSet, bbox: BoundingBox, emergencies_only: bool = True) -> EventSet:
    keep = bbox.contains(events.lat, events.lon)
    if emergencies_only:
        keep &= events.emergency
    return events.subset(keep)


def project(events: EventSet, proj: Projection) -> EventSet:
    x, y = proj.forward(events.lat, events.lon)
    return replace(events, x=x, y=y)


# --------------------------------------------------------------------------
# grid and binning


@dataclass(frozen=True)
class SpatioTemporalGrid:
    """Regular space-time grid over a bounding box.

    ``t_end`` is clamped down so that ``t_bin`` tiles ``[t_start, t_end)``.
    """

    bbox: BoundingBox
    t_start: float
    t_end: float
    nx: int = 6
    ny: int = 6
    t_bin: float = 4.0
    projection: Projection | None = None

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not self.t_bin > 0:
            raise ValueError("t_bin must be positive")
        if self.projection is None:
            object.__setattr__(self, "projection", Projection.centered(self.bbox))
        n_t = int(math.floor((self.t_end - self.t_start) / self.t_bin + 1e-9))
        if n_t < 0:
            raise ValueError("t_end precedes t_start")
        object.__setattr__(self, "t_end", self.t_start + n_t * self.t_bin)

    @property
    def x_range(self):
        x0, _ = self.projection.forward(self.bbox.lat_min, self.bbox.lon_min)
        x1, _ = self.projection.forward(self.bbox.lat_min, self.bbox.lon_max)
        return float(x0), float(x1)

    @property
    def y_range(self):
        _, y0 = self.projection.forward(self.bbox.lat_min, self.bbox.lon_min)
        _, y1 = self.projection.forward(self.bbox.lat_max, self.bbox.lon_min)
        return float(y0), float(y1)

    @property
    def x_edges(self):
        return np.linspace(*self.x_range, self.nx + 1)

    @property
    def y_edges(self):
        return np.linspace(*self.y_range, self.ny + 1)

    @property
    def t_edges(self):
        return self.t_start + self.t_bin * np.arange(self.n_t + 1)

    @property
    def cell_dx(self):
        x0, x1 = self.x_range
        return (x1 - x0) / self.nx

    @property
    def cell_dy(self):
        y0, y1 = self.y_range
        return (y1 - y0) / self.ny

    @property
    def cell_area(self):
        return self.cell_dx * self.cell_dy

    @property
    def bin_volume(self):
        return self.cell_area * self.t_bin

    @property
    def n_t(self):
        return int(round((self.t_end - self.t_start) / self.t_bin))

    @property
    def shape(self):
        return (self.n_t, self.ny, self.nx)

    @property
    def n_cells(self):
        return self.nx * self.ny

    def cell_centers(self) -> np.ndarray:
        """(ny*nx, 2) cell centres, row-major from the south-west corner."""
        xe, ye = self.x_edges, self.y_edges
        xc = 0.5 * (xe[:-1] + xe[1:])
        yc = 0.5 * (ye[:-1] + ye[1:])
        yy, xx = np.meshgrid(yc, xc, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def time_centers(self) -> np.ndarray:
        te = self.t_edges
        return 0.5 * (te[:-1] + te[1:])

    def bin_centers(self) -> np.ndarray:
        """(n_t*ny*nx, 3) ``(x, y, t)`` centres in C order of the counts tensor."""
        cells = self.cell_centers()
        tc = self.time_centers()
        n_c = len(cells)
        out = np.empty((len(tc) * n_c, 3))
        out[:, :2] = np.tile(cells, (len(tc), 1))
        out[:, 2] = np.repeat(tc, n_c)
        return out

    def with_time(self, t_start: float, t_end: float) -> SpatioTemporalGrid:
        return replace(self, t_start=t_start, t_end=t_end)

    def locate(self, x, y, t):
        """Bin indices ``(it, iy, ix)``; -1 where outside the grid."""
        ix = _accel.bin_index(x, self.x_edges)
        iy = _accel.bin_index(y, self.y_edges)
        it = _accel.bin_index(t, self.t_edges)
        return it, iy, ix


@dataclass(frozen=True, eq=False)
class BinnedCounts:
    grid: SpatioTemporalGrid
    counts: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        if self.counts.shape != self.grid.shape:
            raise ShapeMismatch(f"counts shape {self.counts.shape} != grid shape {self.grid.shape}")

    @property
    def bin_centers(self) -> np.ndarray:
        return self.grid.bin_centers()

    @property
    def n_bins(self) -> int:
        return self.counts.size

    def flat(self) -> np.ndarray:
        return self.counts.reshape(-1)

    def time_slice(self, i0: int, i1: int) -> BinnedCounts:
        g = self.grid
        sub = g.with_time(g.t_start + i0 * g.t_bin, g.t_start + i1 * g.t_bin)
        return BinnedCounts(sub, self.counts[i0:i1].copy())


def bin_events(events: EventSet, grid: SpatioTemporalGrid) -> BinnedCounts:
    """Count events per grid bin.

    Events outside the spatial or temporal extent are not counted; their
    number is reported in ``BinnedCounts.dropped``.
    """
    if not events.projected:
        events = project(events, grid.projection)
    it, iy, ix = grid.locate(events.x, events.y, events.t)
    ok = (it >= 0) & (iy >= 0) & (ix >= 0)
    flat = (it[ok] * grid.ny + iy[ok]) * grid.nx + ix[ok]
    counts = np.bincount(flat, minlength=grid.n_t * grid.n_cells).astype(np.int64)
    dropped = int(len(events) - np.count_nonzero(ok))
    if dropped:
        log.info("bin_events: %d events outside the grid extent", dropped)
    return BinnedCounts(grid, counts.reshape(grid.shape), dropped)


# --------------------------------------------------------------------------
# land mask


@dataclass(frozen=True, eq=False)
class LandMask:
    mask: np.ndarray

    @classmethod
    def all_land(cls, grid: SpatioTemporalGrid) -> LandMask:
        return cls(np.ones((grid.ny, grid.nx), dtype=bool))

    @property
    def n_masked(self) -> int:
        return int(np.count_nonzero(~self.mask))

    def check(self, grid: SpatioTemporalGrid) -> None:
        if self.mask.shape != (grid.ny, grid.nx):
            raise ShapeMismatch(f"land mask shape {self.mask.shape} != spatial grid {(grid.ny, grid.nx)}")


def load_land_mask(path, grid: SpatioTemporalGrid) -> LandMask:
    """Plain-text raster of 0/1, one line per grid row, first line southernmost."""
    if path is None or not Path(path).exists():
        log.info("no land mask at %s; treating every cell as land", path)
        return LandMask.all_land(grid)
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    try:
        mask = np.array([[int(v) for v in r] for r in rows], dtype=int)
    except ValueError as exc:
        raise ShapeMismatch(f"{path}: {exc}") from exc
    if mask.ndim != 2:
        raise ShapeMismatch(f"{path}: ragged rows")
    lm = LandMask(mask.astype(bool))
    lm.check(grid)
    return lm


def save_land_mask(mask: LandMask, path) -> None:
    Path(path).write_text("\n".join(" ".join(str(int(v)) for v in row) for row in mask.mask) + "\n")
