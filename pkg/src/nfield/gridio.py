"""Geographic grid and station data types, classical interpolation, and file formats.

Conventions
- **bbox**: ``(lat_min, lat_max, lon_min, lon_max)``, degrees.
- **Cell-centered grids**: a grid of resolution ``res`` over a bbox has cell
  centers at ``lat_min + (i + 0.5) * res``; the counts per axis are
  ``span / res`` and the spans must divide by ``res`` (to within 1e-9).
- **In-memory layout**: 2D arrays are ``[n_lat, n_lon]`` with row 0 the
  *southernmost* row and column 0 the westernmost (lat/lon both increasing
  with index).
- **On disk**: grid files store rows north-to-south (see `write_field`);
  readers and writers flip accordingly.
- Latitude/longitude are treated as a flat rectangle; no spherical metric.

All types are immutable after construction and all operations are pure
functions, safe for concurrent readers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID_MAGIC = "NFGRID"
GRID_VERSION = 1

Bbox = tuple[float, float, float, float]


class GridIOError(ValueError):
    """Validation or format error with a stable machine-readable code.

    Codes: ``bad_magic``, ``bad_version``, ``bad_header``, ``shape_mismatch``,
    ``non_finite``, ``bad_bbox``, ``bad_stats``, ``station_out_of_domain``,
    ``duplicate_station``, ``empty_stations``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _axis_count(span: float, resolution: float, name: str) -> int:
    if resolution <= 0:
        raise GridIOError("bad_bbox", f"resolution must be > 0, got {resolution}")
    n = span / resolution
    if abs(n - round(n)) > 1e-9:
        raise GridIOError(
            "bad_bbox",
            f"{name} span {span} is not divisible by resolution {resolution}",
        )
    return int(round(n))


def grid_shape(bbox: Bbox, resolution: float) -> tuple[int, int]:
    """Return (n_lat, n_lon) for a cell-centered grid over bbox."""
    lat_min, lat_max, lon_min, lon_max = bbox
    if not (lat_max > lat_min and lon_max > lon_min):
        raise GridIOError("bad_bbox", f"degenerate bbox {bbox}")
    n_lat = _axis_count(lat_max - lat_min, resolution, "latitude")
    n_lon = _axis_count(lon_max - lon_min, resolution, "longitude")
    return n_lat, n_lon


def grid_axes(bbox: Bbox, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Return 1D arrays of cell-center latitudes and longitudes."""
    n_lat, n_lon = grid_shape(bbox, resolution)
    lat = bbox[0] + (np.arange(n_lat) + 0.5) * resolution
    lon = bbox[2] + (np.arange(n_lon) + 0.5) * resolution
    return lat, lon


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GriddedField:
    """A single-variable scalar field on a cell-centered lat-lon grid."""

    values: np.ndarray  # [n_lat, n_lon], physical units
    bbox: Bbox
    resolution: float
    variable: str
    time: int  # epoch hours

    def __post_init__(self):
        n_lat, n_lon = grid_shape(self.bbox, self.resolution)
        if n_lat < 2 or n_lon < 2:
            raise GridIOError("bad_bbox", f"grid {n_lat}x{n_lon} smaller than 2x2")
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (n_lat, n_lon):
            raise GridIOError(
                "shape_mismatch",
                f"values shape {v.shape} != bbox/resolution shape {(n_lat, n_lon)}",
            )
        if not np.isfinite(v).all():
            raise GridIOError("non_finite", f"non-finite values in field '{self.variable}'")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def n_lat(self) -> int:
        return self.values.shape[0]

    @property
    def n_lon(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CoordinateGrid:
    """Cell-center coordinates of a grid, as 2D arrays matching the field layout."""

    lat: np.ndarray  # [n_lat, n_lon]
    lon: np.ndarray
    resolution: float

    def __post_init__(self):
        la = np.asarray(self.lat, dtype=np.float64)
        lo = np.asarray(self.lon, dtype=np.float64)
        if la.shape != lo.shape or la.ndim != 2:
            raise GridIOError("shape_mismatch", f"lat {la.shape} vs lon {lo.shape}")
        object.__setattr__(self, "lat", _freeze(la))
        object.__setattr__(self, "lon", _freeze(lo))


@dataclass(frozen=True)
class StationSet:
    """Off-grid point observations of one variable at a common timestamp layout."""

    ids: tuple[str, ...]
    lat: np.ndarray
    lon: np.ndarray
    elevation: np.ndarray  # meters
    values: np.ndarray  # variable units
    times: np.ndarray  # epoch hours, int64

    def __post_init__(self):
        n = len(self.ids)
        if n < 1:
            raise GridIOError("empty_stations", "a StationSet needs at least one station")
        if len(set(self.ids)) != n:
            dup = sorted({s for s in self.ids if self.ids.count(s) > 1})[0]
            raise GridIOError("duplicate_station", f"duplicate station id '{dup}'")
        for name in ("lat", "lon", "elevation", "values"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (n,):
                raise GridIOError("shape_mismatch", f"stations.{name} shape {a.shape} != ({n},)")
            if not np.isfinite(a).all():
                raise GridIOError("non_finite", f"non-finite stations.{name}")
            object.__setattr__(self, name, _freeze(a))
        t = np.asarray(self.times, dtype=np.int64)
        if t.shape != (n,):
            raise GridIOError("shape_mismatch", f"stations.times shape {t.shape} != ({n},)")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "ids", tuple(str(s) for s in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def ensure_inside(self, bbox: Bbox) -> None:
        """Raise unless every station lies strictly inside bbox."""
        lat_min, lat_max, lon_min, lon_max = bbox
        ok = (
            (self.lat > lat_min)
            & (self.lat < lat_max)
            & (self.lon > lon_min)
            & (self.lon < lon_max)
        )
        if not ok.all():
            i = int(np.argmin(ok))
            raise GridIOError(
                "station_out_of_domain",
                f"station '{self.ids[i]}' at ({self.lat[i]}, {self.lon[i]}) "
                f"is not strictly inside bbox {bbox}",
            )


@dataclass(frozen=True)
class TopographyGrid:
    """Gridded elevation (meters); may be finer than the field it accompanies."""

    elevation: np.ndarray  # [n_lat, n_lon]
    bbox: Bbox
    resolution: float

    def __post_init__(self):
        n_lat, n_lon = grid_shape(self.bbox, self.resolution)
        e = np.asarray(self.elevation, dtype=np.float64)
        if e.shape != (n_lat, n_lon):
            raise GridIOError(
                "shape_mismatch",
                f"elevation shape {e.shape} != bbox/resolution shape {(n_lat, n_lon)}",
            )
        if not np.isfinite(e).all():
            raise GridIOError("non_finite", "non-finite elevation")
        object.__setattr__(self, "elevation", _freeze(e))


@dataclass(frozen=True)
class NormStats:
    """Mean/std normalization parameters for one variable."""

    mean: float
    std: float
    variable: str

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise GridIOError("bad_stats", f"non-finite stats for '{self.variable}'")
        if self.std <= 0:
            raise GridIOError("bad_stats", f"std must be > 0, got {self.std}")


def make_coordinate_grid(bbox: Bbox, resolution: float) -> CoordinateGrid:
    """Build the cell-centered coordinate grid for bbox at the given resolution."""
    lat, lon = grid_axes(bbox, resolution)
    lon2d, lat2d = np.meshgrid(lon, lat)
    return CoordinateGrid(lat=lat2d, lon=lon2d, resolution=resolution)


def _as_points(points) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.ndim != 2 or p.shape[1] != 2:
        raise GridIOError("shape_mismatch", f"points must be (n, 2) (lat, lon), got {p.shape}")
    return p[:, 0], p[:, 1]


def sample_bilinear(
    values: np.ndarray,
    bbox: Bbox,
    resolution: float,
    lats: np.ndarray,
    lons: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation on a cell-centered grid at arbitrary points.

    Points outside the convex hull of cell centers are clamped to the hull.
    Returns (values, clamped_mask).
    """
    values = np.asarray(values, dtype=np.float64)
    n_lat, n_lon = values.shape
    # continuous index of the query in cell-center coordinates
    fi = (np.asarray(lats, dtype=np.float64) - bbox[0]) / resolution - 0.5
    fj = (np.asarray(lons, dtype=np.float64) - bbox[2]) / resolution - 0.5
    clamped = (fi < 0) | (fi > n_lat - 1) | (fj < 0) | (fj > n_lon - 1)
    fi = np.clip(fi, 0.0, n_lat - 1.0)
    fj = np.clip(fj, 0.0, n_lon - 1.0)
    i0 = np.minimum(fi.astype(np.int64), n_lat - 2)
    j0 = np.minimum(fj.astype(np.int64), n_lon - 2)
    di = fi - i0
    dj = fj - j0
    v00 = values[i0, j0]
    v01 = values[i0, j0 + 1]
    v10 = values[i0 + 1, j0]
    v11 = values[i0 + 1, j0 + 1]
    out = (
        v00 * (1 - di) * (1 - dj)
        + v01 * (1 - di) * dj
        + v10 * di * (1 - dj)
        + v11 * di * dj
    )
    return out, clamped


def sample_nearest(
    values: np.ndarray,
    bbox: Bbox,
    resolution: float,
    lats: np.ndarray,
    lons: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-cell-center sampling; exact halfway ties go to the smaller index."""
    values = np.asarray(values, dtype=np.float64)
    n_lat, n_lon = values.shape
    fi = (np.asarray(lats, dtype=np.float64) - bbox[0]) / resolution - 0.5
    fj = (np.asarray(lons, dtype=np.float64) - bbox[2]) / resolution - 0.5
    clamped = (fi < 0) | (fi > n_lat - 1) | (fj < 0) | (fj > n_lon - 1)
    # round half down so a tie picks the lexicographically smaller (row, col)
    i = np.clip(np.ceil(fi - 0.5).astype(np.int64), 0, n_lat - 1)
    j = np.clip(np.ceil(fj - 0.5).astype(np.int64), 0, n_lon - 1)
    return values[i, j], clamped


def _warnings_from_mask(clamped: np.ndarray, what: str) -> list[str]:
    return [
        f"{what} query {int(k)} outside the hull of cell centers; clamped"
        for k in np.nonzero(clamped)[0]
    ]


def bilinear_interp(
    field: GriddedField, points: Sequence[tuple[float, float]]
) -> tuple[np.ndarray, list[str]]:
    """Bilinear interpolation of a field at (lat, lon) points.

    Returns (values, warnings); out-of-hull points are clamped and flagged.
    """
    lats, lons = _as_points(points)
    out, clamped = sample_bilinear(field.values, field.bbox, field.resolution, lats, lons)
    return out, _warnings_from_mask(clamped, "bilinear")


def nearest_interp(
    field: GriddedField, points: Sequence[tuple[float, float]]
) -> tuple[np.ndarray, list[str]]:
    """Nearest-neighbor interpolation of a field at (lat, lon) points."""
    lats, lons = _as_points(points)
    out, clamped = sample_nearest(field.values, field.bbox, field.resolution, lats, lons)
    return out, _warnings_from_mask(clamped, "nearest")


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """(v - mean) / std."""
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Exact inverse of `normalize`."""
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------
#
# Grid file: 6-line ASCII header
#   NFGRID 1
#   var=<id>
#   time=<int hours>
#   bbox=<latmin> <latmax> <lonmin> <lonmax>
#   res=<degrees>
#   shape=<h> <w>
# followed by h*w little-endian 32-bit floats, row-major, north-to-south rows.


def _grid_payload(values: np.ndarray) -> bytes:
    return np.flipud(values).astype("<f4").tobytes()


def write_field(field: GriddedField, path: str | Path) -> None:
    _write_grid(
        path, field.values, field.bbox, field.resolution, field.variable, field.time
    )


def write_topography(topo: TopographyGrid, path: str | Path, variable: str = "dem_elev") -> None:
    _write_grid(path, topo.elevation, topo.bbox, topo.resolution, variable, 0)


def _write_grid(path, values, bbox, resolution, variable, time) -> None:
    h, w = values.shape
    b = [float(x) for x in bbox]
    header = (
        f"{GRID_MAGIC} {GRID_VERSION}\n"
        f"var={variable}\n"
        f"time={int(time)}\n"
        f"bbox={b[0]!r} {b[1]!r} {b[2]!r} {b[3]!r}\n"
        f"res={float(resolution)!r}\n"
        f"shape={h} {w}\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(_grid_payload(values))


def _read_grid(path) -> tuple[np.ndarray, Bbox, float, str, int]:
    with open(path, "rb") as f:
        raw = f.read()
    head_end = 0
    lines = []
    for _ in range(6):
        nl = raw.find(b"\n", head_end)
        if nl < 0:
            raise GridIOError("bad_header", f"truncated header in {path}")
        lines.append(raw[head_end:nl].decode("ascii", errors="replace"))
        head_end = nl + 1
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != GRID_MAGIC:
        raise GridIOError("bad_magic", f"not an {GRID_MAGIC} file: {path}")
    if magic[1] != str(GRID_VERSION):
        raise GridIOError("bad_version", f"unsupported version {magic[1]} in {path}")
    fields = {}
    for line in lines[1:]:
        if "=" not in line:
            raise GridIOError("bad_header", f"malformed header line {line!r} in {path}")
        k, v = line.split("=", 1)
        fields[k] = v
    try:
        variable = fields["var"]
        time = int(fields["time"])
        bbox = tuple(float(x) for x in fields["bbox"].split())
        resolution = float(fields["res"])
        h, w = (int(x) for x in fields["shape"].split())
    except (KeyError, ValueError) as e:
        raise GridIOError("bad_header", f"malformed header in {path}: {e}") from e
    if len(bbox) != 4:
        raise GridIOError("bad_header", f"bbox needs 4 numbers in {path}")
    payload = raw[head_end:]
    if len(payload) != h * w * 4:
        raise GridIOError(
            "shape_mismatch",
            f"{path}: header declares {h}x{w} ({h * w * 4} bytes) "
            f"but payload has {len(payload)} bytes",
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)
    if not np.isfinite(values).all():
        raise GridIOError("non_finite", f"non-finite payload in {path}")
    return np.flipud(values), bbox, resolution, variable, time


def read_field(path: str | Path) -> GriddedField:
    values, bbox, resolution, variable, time = _read_grid(path)
    return GriddedField(
        values=values, bbox=bbox, resolution=resolution, variable=variable, time=time
    )


def read_topography(path: str | Path) -> TopographyGrid:
    values, bbox, resolution, _, _ = _read_grid(path)
    return TopographyGrid(elevation=values, bbox=bbox, resolution=resolution)


STATION_COLUMNS = ["id", "lat", "lon", "elev_m", "value", "time"]


def write_stations(stations: StationSet, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATION_COLUMNS)
    for k, sid in enumerate(stations.ids):
        w.writerow(
            [
                sid,
                repr(float(stations.lat[k])),
                repr(float(stations.lon[k])),
                repr(float(stations.elevation[k])),
                repr(float(stations.values[k])),
                int(stations.times[k]),
            ]
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_stations(path: str | Path, bbox: Bbox | None = None) -> StationSet:
    """Read a station CSV; if bbox is given, enforce strict containment."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != STATION_COLUMNS:
            raise GridIOError(
                "bad_header",
                f"{path}: expected columns {STATION_COLUMNS}, got {reader.fieldnames}",
            )
        rows = list(reader)
    if not rows:
        raise GridIOError("empty_stations", f"no station rows in {path}")
    try:
        st = StationSet(
            ids=tuple(r["id"] for r in rows),
            lat=np.array([float(r["lat"]) for r in rows]),
            lon=np.array([float(r["lon"]) for r in rows]),
            elevation=np.array([float(r["elev_m"]) for r in rows]),
            values=np.array([float(r["value"]) for r in rows]),
            times=np.array([int(r["time"]) for r in rows], dtype=np.int64),
        )
    except ValueError as e:
        raise GridIOError("bad_header", f"{path}: {e}") from e
    if bbox is not None:
        st.ensure_inside(bbox)
    return st


def write_norm_stats(stats: Iterable[NormStats], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable", "mean", "std"])
    for s in stats:
        w.writerow([s.variable, repr(float(s.mean)), repr(float(s.std))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_norm_stats(path: str | Path) -> dict[str, NormStats]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["variable", "mean", "std"]:
            raise GridIOError("bad_header", f"{path}: bad norm-stats columns")
        out = {}
        for r in reader:
            try:
                s = NormStats(mean=float(r["mean"]), std=float(r["std"]), variable=r["variable"])
            except ValueError as e:
                raise GridIOError("bad_stats", f"{path}: {e}") from e
            out[s.variable] = s
    if not out:
        raise GridIOError("bad_stats", f"no stats rows in {path}")
    return out
