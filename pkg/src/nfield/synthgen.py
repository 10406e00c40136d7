"""Seeded synthetic scenarios with analytic ground truth.

A scenario defines, in closed form over a lat-lon box:

- an elevation model built from Gaussian hills (smooth, with exact gradients),
- a "weather" field: diurnal cycle + a smooth spatial component + a lapse-rate
  term tied to elevation,
- a systematic bias that is a deterministic function of topography
  (constant + elevation + slope terms),
- noisy point observations at off-grid stations.

Everything is a pure function of (seed, explicit scenario fields); noise
streams are keyed by (seed, sample index, station index) so generation order
never matters. The oracle is evaluable at any real-valued coordinate, which
makes it the ground truth for downscaling and bias-correction tests.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridio import (
    CoordinateGrid,
    GriddedField,
    NormStats,
    StationSet,
    TopographyGrid,
    grid_axes,
    grid_shape,
    make_coordinate_grid,
    read_field,
    read_stations,
    read_topography,
    write_field,
    write_norm_stats,
    write_stations,
    write_topography,
)

ADDITIVE = "additive_bias"
GUST = "multiplicative_gust"


def _stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Deterministic generator keyed by (seed, name, extra indices)."""
    key = (int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())) + tuple(
        int(x) for x in extra
    )
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class SyntheticScenario:
    """Fully seeded description of a synthetic data-generating process."""

    seed: int = 101
    bbox: tuple[float, float, float, float] = (35.0, 43.0, -110.0, -102.0)
    resolution: float = 0.25
    n_bumps: int = 8
    lapse_rate: float = -6.5  # variable units per km of elevation
    bias_coeffs: tuple[float, float, float] = (1.0, 1.8, 0.0015)
    obs_noise_std: float = 0.1
    diurnal_amp: float = 3.0
    variable_mode: str = ADDITIVE
    variable: str = "t2m"
    # terrain / weather shape ranges (drawn per bump from the seeded stream)
    bump_amp_range: tuple[float, float] = (150.0, 450.0)  # meters
    bump_sigma_range: tuple[float, float] = (0.55, 1.4)  # degrees
    weather_amp_range: tuple[float, float] = (-2.5, 2.5)
    weather_sigma_range: tuple[float, float] = (1.0, 2.5)
    # optional assimilation-style smoothing of the input field, in cells (off)
    input_blur_sigma: float = 0.0
    # the DEM file is written this many times finer than the field grid
    dem_upsample: int = 4

    def __post_init__(self):
        if self.n_bumps < 1:
            raise ValueError("n_bumps must be >= 1")
        if self.obs_noise_std < 0:
            raise ValueError("obs_noise_std must be >= 0")
        if self.variable_mode not in (ADDITIVE, GUST):
            raise ValueError(f"unknown variable_mode {self.variable_mode!r}")
        grid_shape(self.bbox, self.resolution)  # validates bbox/resolution

    @classmethod
    def desk_additive(cls, seed: int = 101) -> "SyntheticScenario":
        """32x32 desk-scale scenario with additive terrain-correlated bias."""
        return cls(seed=seed)

    @classmethod
    def desk_gust(cls, seed: int = 202) -> "SyntheticScenario":
        """Desk-scale dual-mode scenario: grid carries gust-like amplified values."""
        return cls(seed=seed, variable_mode=GUST, variable="gust", bias_coeffs=(0.0, 0.0, 0.0))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScenario":
        kw = dict(d)
        for k in ("bbox", "bias_coeffs", "bump_amp_range", "bump_sigma_range",
                  "weather_amp_range", "weather_sigma_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


class Oracle:
    """Closed-form evaluators derived from a scenario.

    All methods are vectorized over numpy arrays of coordinates and are
    infinitely smooth by construction (sums of Gaussians and sinusoids).
    """

    def __init__(self, scenario: SyntheticScenario):
        self.scenario = scenario
        lat_min, lat_max, lon_min, lon_max = scenario.bbox
        pad_lat = 0.05 * (lat_max - lat_min)
        pad_lon = 0.05 * (lon_max - lon_min)

        rng_t = _stream(scenario.seed, "terrain")
        n = scenario.n_bumps
        self.bump_lat = rng_t.uniform(lat_min + pad_lat, lat_max - pad_lat, n)
        self.bump_lon = rng_t.uniform(lon_min + pad_lon, lon_max - pad_lon, n)
        self.bump_amp = rng_t.uniform(*scenario.bump_amp_range, n)
        self.bump_sigma = rng_t.uniform(*scenario.bump_sigma_range, n)

        rng_w = _stream(scenario.seed, "weather")
        self.weather_lat = rng_w.uniform(lat_min + pad_lat, lat_max - pad_lat, n)
        self.weather_lon = rng_w.uniform(lon_min + pad_lon, lon_max - pad_lon, n)
        self.weather_amp = rng_w.uniform(*scenario.weather_amp_range, n)
        self.weather_sigma = rng_w.uniform(*scenario.weather_sigma_range, n)

    @staticmethod
    def _bump_sum(lats, lons, c_lat, c_lon, amp, sigma):
        la = np.asarray(lats, dtype=np.float64)[..., None]
        lo = np.asarray(lons, dtype=np.float64)[..., None]
        d2 = (la - c_lat) ** 2 + (lo - c_lon) ** 2
        return np.sum(amp * np.exp(-d2 / (2.0 * sigma**2)), axis=-1)

    def elev(self, lats, lons) -> np.ndarray:
        """Elevation in meters."""
        return self._bump_sum(
            lats, lons, self.bump_lat, self.bump_lon, self.bump_amp, self.bump_sigma
        )

    def elev_grad(self, lats, lons) -> tuple[np.ndarray, np.ndarray]:
        """Analytic (d elev / d lat, d elev / d lon), meters per degree."""
        la = np.asarray(lats, dtype=np.float64)[..., None]
        lo = np.asarray(lons, dtype=np.float64)[..., None]
        dla = la - self.bump_lat
        dlo = lo - self.bump_lon
        s2 = self.bump_sigma**2
        g = self.bump_amp * np.exp(-(dla**2 + dlo**2) / (2.0 * s2))
        return np.sum(-dla / s2 * g, axis=-1), np.sum(-dlo / s2 * g, axis=-1)

    def slope(self, lats, lons) -> np.ndarray:
        """Gradient magnitude of elevation, meters per degree."""
        gla, glo = self.elev_grad(lats, lons)
        return np.hypot(gla, glo)

    def smooth_field(self, lats, lons) -> np.ndarray:
        return self._bump_sum(
            lats,
            lons,
            self.weather_lat,
            self.weather_lon,
            self.weather_amp,
            self.weather_sigma,
        )

    def y_true(self, lats, lons, t_hours) -> np.ndarray:
        """The continuous true state at time t (hours)."""
        s = self.scenario
        diurnal = s.diurnal_amp * np.sin(2.0 * np.pi * t_hours / 24.0)
        return (
            diurnal
            + self.smooth_field(lats, lons)
            + s.lapse_rate * self.elev(lats, lons) / 1000.0
        )

    def bias(self, lats, lons) -> np.ndarray:
        b0, b1, b2 = self.scenario.bias_coeffs
        out = np.full(np.broadcast(np.asarray(lats), np.asarray(lons)).shape, b0, dtype=np.float64)
        if b1 != 0.0:
            out = out + b1 * self.elev(lats, lons) / 1000.0
        if b2 != 0.0:
            out = out + b2 * self.slope(lats, lons)
        return out

    def gust_factor(self, lats, lons) -> np.ndarray:
        return 1.3 + 0.2 * np.tanh(self.slope(lats, lons))


def build_oracle(scenario: SyntheticScenario) -> Oracle:
    return Oracle(scenario)


def _gaussian_blur(values: np.ndarray, sigma_cells: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding (sigma in cells)."""
    r = max(1, int(np.ceil(3.0 * sigma_cells)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma_cells**2))
    k /= k.sum()
    out = values
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, -1)
        padded = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(r, r)], mode="reflect")
        acc = np.zeros_like(moved)
        for o in range(2 * r + 1):
            acc += k[o] * padded[..., o : o + moved.shape[-1]]
        out = np.moveaxis(acc, -1, axis)
    return out


def generate_sample(
    scenario: SyntheticScenario,
    grid: CoordinateGrid,
    stations,
    t: int,
    oracle: Oracle | None = None,
) -> tuple[GriddedField, GriddedField, StationSet]:
    """Make one (input field, truth field, observations) triple at time t.

    `stations` is an (n, 2+) array or sequence of (lat, lon[, ...]) points;
    observation noise is drawn from a stream keyed by (seed, t, station index).
    """
    oracle = oracle or Oracle(scenario)
    st = np.asarray(stations, dtype=np.float64)
    st_lat, st_lon = st[:, 0], st[:, 1]

    y_grid = oracle.y_true(grid.lat, grid.lon, t)
    if scenario.variable_mode == ADDITIVE:
        x = y_grid + oracle.bias(grid.lat, grid.lon)
    else:
        x = oracle.gust_factor(grid.lat, grid.lon) * y_grid
    if scenario.input_blur_sigma > 0:
        x = _gaussian_blur(x, scenario.input_blur_sigma)

    lat_axis = grid.lat[:, 0]
    lon_axis = grid.lon[0, :]
    bbox = (
        lat_axis[0] - 0.5 * grid.resolution,
        lat_axis[-1] + 0.5 * grid.resolution,
        lon_axis[0] - 0.5 * grid.resolution,
        lon_axis[-1] + 0.5 * grid.resolution,
    )
    field = GriddedField(x, bbox, grid.resolution, scenario.variable, int(t))
    truth = GriddedField(y_grid, bbox, grid.resolution, scenario.variable, int(t))

    y_st = oracle.y_true(st_lat, st_lon, t)
    if scenario.obs_noise_std > 0:
        noise = np.array(
            [
                _stream(scenario.seed, "obs", t, i).normal(0.0, scenario.obs_noise_std)
                for i in range(len(st_lat))
            ]
        )
    else:
        noise = np.zeros_like(y_st)
    obs = StationSet(
        ids=tuple(f"s{i:03d}" for i in range(len(st_lat))),
        lat=st_lat,
        lon=st_lon,
        elevation=oracle.elev(st_lat, st_lon),
        values=y_st + noise,
        times=np.full(len(st_lat), int(t), dtype=np.int64),
    )
    obs.ensure_inside(bbox)
    return field, truth, obs


def sample_stations(
    scenario: SyntheticScenario, n: int, margin_cells: float = 1.0
) -> np.ndarray:
    """Draw n off-grid station locations; columns are (lat, lon, elevation_m).

    Points are uniform inside the bbox shrunk by `margin_cells` cells and are
    redrawn until at least 0.1 * resolution away from every cell center.
    """
    if n < 1:
        raise ValueError("need n >= 1 stations")
    oracle = Oracle(scenario)
    res = scenario.resolution
    lat_min, lat_max, lon_min, lon_max = scenario.bbox
    m = margin_cells * res
    rng = _stream(scenario.seed, "stations")

    def off_grid_dist(lat, lon):
        fi = (lat - lat_min) / res - 0.5
        fj = (lon - lon_min) / res - 0.5
        di = np.abs(fi - np.round(fi))
        dj = np.abs(fj - np.round(fj))
        return np.hypot(di, dj) * res

    lats = np.empty(n)
    lons = np.empty(n)
    for i in range(n):
        for attempt in range(1000):
            la = rng.uniform(lat_min + m, lat_max - m)
            lo = rng.uniform(lon_min + m, lon_max - m)
            if off_grid_dist(la, lo) >= 0.1 * res:
                lats[i], lons[i] = la, lo
                break
        else:
            raise RuntimeError(f"could not place station {i} off-grid in 1000 draws")
    return np.column_stack([lats, lons, oracle.elev(lats, lons)])


def generate_dataset(
    scenario: SyntheticScenario,
    n_samples: int,
    split_fractions: tuple[float, float, float],
    out_dir: str | Path,
    n_stations: int = 40,
    margin_cells: float = 1.0,
) -> dict:
    """Write a full on-disk dataset plus its manifest; returns the manifest.

    Samples are generated at t = 0, 1, 2, ... hours and split into contiguous
    train/val/test blocks in time order. Normalization stats come from the
    training block only.
    """
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split_fractions}")
    out = Path(out_dir)
    for sub in ("fields", "truth", "stations"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    oracle = Oracle(scenario)
    grid = make_coordinate_grid(scenario.bbox, scenario.resolution)
    stations = sample_stations(scenario, n_stations, margin_cells)

    n_train = int(round(split_fractions[0] * n_samples))
    n_val = int(round(split_fractions[1] * n_samples))
    n_test = n_samples - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"splits {n_train}/{n_val}/{n_test} need >= 1 sample each")

    dem_res = scenario.resolution / scenario.dem_upsample
    dem_lat, dem_lon = grid_axes(scenario.bbox, dem_res)
    dem_lon2, dem_lat2 = np.meshgrid(dem_lon, dem_lat)
    dem = TopographyGrid(oracle.elev(dem_lat2, dem_lon2), scenario.bbox, dem_res)
    write_topography(dem, out / "dem.nfg")

    total = 0.0
    total_sq = 0.0
    count = 0
    for t in range(n_samples):
        field, truth, obs = generate_sample(scenario, grid, stations, t, oracle)
        write_field(field, out / "fields" / f"s{t:05d}.nfg")
        write_field(truth, out / "truth" / f"s{t:05d}.nfg")
        write_stations(obs, out / "stations" / f"s{t:05d}.csv")
        if t < n_train:
            # accumulate on the f32-quantized payload actually stored on disk
            stored = field.values.astype("<f4").astype(np.float64)
            total += stored.sum()
            total_sq += (stored**2).sum()
            count += stored.size

    mean = total / count
    var = max(total_sq / count - mean**2, 1e-30)
    norm = NormStats(mean=float(mean), std=float(np.sqrt(var)), variable=scenario.variable)
    dem_stored = dem.elevation.astype("<f4").astype(np.float64)
    dem_norm = NormStats(
        mean=float(dem_stored.mean()),
        std=float(max(dem_stored.std(), 1e-12)),
        variable="dem_elev",
    )
    write_norm_stats([norm, dem_norm], out / "norm_stats.csv")

    manifest = {
        "version": 1,
        "scenario": scenario.to_dict(),
        "variable": scenario.variable,
        "bbox": list(scenario.bbox),
        "resolution": scenario.resolution,
        "n_samples": n_samples,
        "n_stations": n_stations,
        "splits": {
            "train": [0, n_train],
            "val": [n_train, n_train + n_val],
            "test": [n_train + n_val, n_samples],
        },
        "dem": "dem.nfg",
        "fields_dir": "fields",
        "truth_dir": "truth",
        "stations_dir": "stations",
        "sample_pattern": "s{:05d}",
        "norm": {
            norm.variable: {"mean": norm.mean, "std": norm.std},
            dem_norm.variable: {"mean": dem_norm.mean, "std": dem_norm.std},
        },
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


class Dataset:
    """Read-side view of a generated dataset directory."""

    def __init__(self, manifest_path: str | Path):
        self.root = Path(manifest_path).parent
        self.manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        self.scenario = SyntheticScenario.from_dict(self.manifest["scenario"])
        self.variable = self.manifest["variable"]
        self.bbox = tuple(self.manifest["bbox"])
        self.resolution = float(self.manifest["resolution"])
        self.norm = {
            k: NormStats(mean=v["mean"], std=v["std"], variable=k)
            for k, v in self.manifest["norm"].items()
        }
        self.dem = read_topography(self.root / self.manifest["dem"])
        self._cache: dict[int, tuple] = {}
        self._oracle: Oracle | None = None

    @property
    def oracle(self) -> Oracle:
        if self._oracle is None:
            self._oracle = Oracle(self.scenario)
        return self._oracle

    def split_indices(self, split: str) -> range:
        lo, hi = self.manifest["splits"][split]
        return range(lo, hi)

    def load_sample(self, i: int, with_truth: bool = False):
        """Return (field, stations) or (field, truth, stations) for sample i."""
        key = (i, with_truth)
        if key not in self._cache:
            pat = self.manifest["sample_pattern"].format(i)
            field = read_field(self.root / self.manifest["fields_dir"] / f"{pat}.nfg")
            stations = read_stations(
                self.root / self.manifest["stations_dir"] / f"{pat}.csv", bbox=self.bbox
            )
            if with_truth:
                truth = read_field(self.root / self.manifest["truth_dir"] / f"{pat}.nfg")
                self._cache[key] = (field, truth, stations)
            else:
                self._cache[key] = (field, stations)
        return self._cache[key]
