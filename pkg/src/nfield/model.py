"""The full field-conditioned neural interpolator and its baseline variants.

Three variants share one query-batch format and one embedding stack:

- ``kani``: convolutional encoder -> weight generator -> reconstructor whose
  first two dense maps use *generated* per-field weights, with a spline-edge
  (KAN) stack after dimensionality reduction.
- ``hyper_mlp``: same hypernetwork, the spline stack replaced by two
  dense+relu layers whose width is chosen to match the spline stack's
  parameter budget (the fair-capacity baseline).
- ``pure_mlp``: embeddings -> neck -> two dense+relu layers -> head, no
  encoder or generated weights.

Every variant ends in a zero-initializable output head added to the raw
state channel, so an untrained model is the identity on its input.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Value, load_checkpoint, save_checkpoint
from .gridio import (
    CoordinateGrid,
    GriddedField,
    NormStats,
    StationSet,
    TopographyGrid,
    grid_shape,
    make_coordinate_grid,
    sample_bilinear,
)
from .kanlayer import KanLayerParams, SplineConfig, init_kan_layer, kan_layer_forward

VARIANTS = ("kani", "hyper_mlp", "pure_mlp")

MODE_TRAIN = "train"
MODE_CORRECT = "correct"
MODE_DOWNSCALE = "downscale"
MODE_POINTS = "points"


@dataclass(frozen=True)
class AblationFlags:
    """Auxiliary-input channels to zero out, at train and inference alike."""

    disable_date: bool = False
    disable_topo: bool = False
    disable_resolution: bool = False

    def any(self) -> bool:
        return self.disable_date or self.disable_topo or self.disable_resolution

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationFlags":
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "kani"
    embed_dim: int = 64  # C
    hidden_dim: int = 128  # H and C'
    reduce_dim: int = 64  # C''
    kan_layers: int = 2  # L
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    feature_channels: int = 128  # c
    gen_channels: int = 8  # conv1d channels inside the weight generator
    spline_degree: int = 3
    spline_grid: int = 5
    zero_init_head: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("embed_dim", "hidden_dim", "reduce_dim", "kan_layers",
                     "feature_channels", "gen_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels needs exactly 4 entries")
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))

    @property
    def spline(self) -> SplineConfig:
        return SplineConfig(degree=self.spline_degree, grid_size=self.spline_grid)

    @property
    def mlp_hidden(self) -> int:
        # width chosen so the two dense layers carry at least as many
        # parameters as the spline stack they replace
        return self.reduce_dim * (self.spline_grid + self.spline_degree + 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = dict(d)
        if "encoder_channels" in kw:
            kw["encoder_channels"] = tuple(kw["encoder_channels"])
        return cls(**kw)


_CONFIG_BOOL = {"true": True, "false": False, "1": True, "0": False}


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blanks ignored."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValueError(f"config line {ln}: empty key")
        out[k] = v
    return out


def _coerce(raw: str, annotation, sample):
    if isinstance(sample, bool):
        try:
            return _CONFIG_BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {raw!r}") from None
    if isinstance(sample, int):
        return int(raw)
    if isinstance(sample, float):
        return float(raw)
    if isinstance(sample, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = sample[0] if sample else 0.0
        return tuple(int(p) if isinstance(elem, int) else float(p) for p in parts)
    return raw


def config_from_mapping(cls, mapping: dict[str, str], defaults=None):
    """Build a dataclass from string key/values, coercing per field defaults."""
    base = defaults if defaults is not None else cls()
    kw = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in mapping.items():
        if key not in fields:
            continue
        kw[key] = _coerce(raw, fields[key].type, getattr(base, key))
    merged = dataclasses.asdict(base)
    merged.update(kw)
    known = set(fields)
    merged = {k: v for k, v in merged.items() if k in known}
    if hasattr(cls, "from_dict"):
        return cls.from_dict(merged)
    return cls(**merged)


@dataclass(frozen=True)
class ModelMeta:
    """Everything inference needs besides the weights."""

    variable: str
    bbox: tuple
    train_resolution: float
    train_shape: tuple[int, int]  # (n_lat, n_lon)
    norm_mean: float
    norm_std: float
    dem_mean: float
    dem_std: float
    ablation: AblationFlags = dc_field(default_factory=AblationFlags)
    init_seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = self.ablation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelMeta":
        kw = dict(d)
        kw["bbox"] = tuple(kw["bbox"])
        kw["train_shape"] = tuple(kw["train_shape"])
        kw["ablation"] = AblationFlags.from_dict(kw["ablation"])
        return cls(**kw)


@dataclass(frozen=True)
class QueryBatch:
    """Per-point features; grid rows first, then station/point rows."""

    coords: np.ndarray  # [N, 2], lat/lon normalized to [-1, 1] over the bbox
    date: np.ndarray  # [N, 4], sin/cos of hour-of-day and day-of-year
    topo: np.ndarray  # [N, 1], normalized elevation
    res: np.ndarray  # [N, 1], query resolution / training resolution
    state: np.ndarray  # [N, 1], normalized interpolated/gridded field value
    n_grid: int

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def n_station(self) -> int:
        return len(self) - self.n_grid

    def tobytes(self) -> bytes:
        return b"".join(
            a.tobytes()
            for a in (self.coords, self.date, self.topo, self.res, self.state)
        ) + self.n_grid.to_bytes(8, "little")

    def take_grid_subset(self, rows: np.ndarray) -> "QueryBatch":
        """Keep only the given grid rows (plus all station rows)."""
        idx = np.concatenate([rows, np.arange(self.n_grid, len(self))])
        return QueryBatch(
            coords=self.coords[idx],
            date=self.date[idx],
            topo=self.topo[idx],
            res=self.res[idx],
            state=self.state[idx],
            n_grid=len(rows),
        )

    def with_ablation(self, flags: AblationFlags) -> "QueryBatch":
        if not flags.any():
            return self
        return QueryBatch(
            coords=self.coords,
            date=np.zeros_like(self.date) if flags.disable_date else self.date,
            topo=np.zeros_like(self.topo) if flags.disable_topo else self.topo,
            res=np.zeros_like(self.res) if flags.disable_resolution else self.res,
            state=self.state,
            n_grid=self.n_grid,
        )


def date_features(t_hours: int) -> np.ndarray:
    hour = t_hours % 24
    doy = (t_hours // 24) % 365
    return np.array(
        [
            np.sin(2 * np.pi * hour / 24.0),
            np.cos(2 * np.pi * hour / 24.0),
            np.sin(2 * np.pi * doy / 365.0),
            np.cos(2 * np.pi * doy / 365.0),
        ]
    )


def _norm_coords(lats, lons, bbox) -> np.ndarray:
    lat_min, lat_max, lon_min, lon_max = bbox
    la = 2.0 * (np.asarray(lats) - lat_min) / (lat_max - lat_min) - 1.0
    lo = 2.0 * (np.asarray(lons) - lon_min) / (lon_max - lon_min) - 1.0
    return np.column_stack([la, lo])


def build_query_batch(
    field: GriddedField,
    stations: StationSet | None,
    topo: TopographyGrid,
    time: int,
    mode: str,
    *,
    norm: NormStats,
    dem_norm: NormStats,
    train_resolution: float,
    query_grid: CoordinateGrid | None = None,
    query_points: np.ndarray | None = None,
    channel_resolution: str = "zero",
) -> QueryBatch:
    """Assemble the per-point feature rows for one sample and one query mode.

    Modes: ``train`` (grid rows then station rows), ``correct`` (original grid),
    ``downscale`` (a finer `query_grid`), ``points`` (arbitrary off-grid rows,
    resolution channel 0). `channel_resolution` picks what the resolution
    channel carries for grid-shaped queries: ``zero`` for bias-corrected
    output, ``native`` for input-distribution reconstruction.
    """
    if channel_resolution not in ("zero", "native"):
        raise ValueError(f"channel_resolution must be zero|native, got {channel_resolution!r}")
    bbox = field.bbox
    grid_rows: list[np.ndarray] = []

    def dem_at(lats, lons):
        vals, _ = sample_bilinear(topo.elevation, topo.bbox, topo.resolution, lats, lons)
        return (vals - dem_norm.mean) / dem_norm.std

    def station_rows():
        stations.ensure_inside(bbox)
        st_state, _ = sample_bilinear(
            field.values, bbox, field.resolution, stations.lat, stations.lon
        )
        return (
            _norm_coords(stations.lat, stations.lon, bbox),
            ((stations.elevation - dem_norm.mean) / dem_norm.std)[:, None],
            np.zeros((len(stations), 1)),
            ((st_state - norm.mean) / norm.std)[:, None],
        )

    if mode in (MODE_TRAIN, MODE_CORRECT):
        grid = make_coordinate_grid(bbox, field.resolution)
        lats, lons = grid.lat.ravel(), grid.lon.ravel()
        coords = _norm_coords(lats, lons, bbox)
        topo_col = dem_at(lats, lons)[:, None]
        state = ((field.values.ravel() - norm.mean) / norm.std)[:, None]
        if mode == MODE_TRAIN:
            res_val = field.resolution / train_resolution
        else:
            res_val = 0.0 if channel_resolution == "zero" else field.resolution / train_resolution
        res = np.full((len(lats), 1), res_val)
        n_grid = len(lats)
        if mode == MODE_TRAIN:
            if stations is None:
                raise ValueError("train mode needs stations")
            sc, st_topo, st_res, st_state = station_rows()
            coords = np.concatenate([coords, sc])
            topo_col = np.concatenate([topo_col, st_topo])
            res = np.concatenate([res, st_res])
            state = np.concatenate([state, st_state])
    elif mode == MODE_DOWNSCALE:
        if query_grid is None:
            raise ValueError("downscale mode needs query_grid")
        lats, lons = query_grid.lat.ravel(), query_grid.lon.ravel()
        coords = _norm_coords(lats, lons, bbox)
        topo_col = dem_at(lats, lons)[:, None]
        vals, _ = sample_bilinear(field.values, bbox, field.resolution, lats, lons)
        state = ((vals - norm.mean) / norm.std)[:, None]
        res_val = 0.0 if channel_resolution == "zero" else query_grid.resolution / train_resolution
        res = np.full((len(lats), 1), res_val)
        n_grid = len(lats)
    elif mode == MODE_POINTS:
        if query_points is None and stations is not None:
            query_points = np.column_stack([stations.lat, stations.lon, stations.elevation])
        if query_points is None:
            raise ValueError("points mode needs query_points or stations")
        pts = np.asarray(query_points, dtype=np.float64)
        lats, lons = pts[:, 0], pts[:, 1]
        coords = _norm_coords(lats, lons, bbox)
        if pts.shape[1] >= 3:
            topo_col = ((pts[:, 2] - dem_norm.mean) / dem_norm.std)[:, None]
        else:
            topo_col = dem_at(lats, lons)[:, None]
        vals, _ = sample_bilinear(field.values, bbox, field.resolution, lats, lons)
        state = ((vals - norm.mean) / norm.std)[:, None]
        res = np.zeros((len(lats), 1))
        n_grid = 0
    else:
        raise ValueError(f"unknown query mode {mode!r}")

    date = np.broadcast_to(date_features(time), (len(coords), 4)).copy()
    return QueryBatch(
        coords=coords, date=date, topo=topo_col, res=res, state=state, n_grid=n_grid
    )


def stack_batches(batches: list[QueryBatch]) -> dict[str, np.ndarray]:
    """Stack same-length batches into [B, N, k] arrays."""
    n = len(batches[0])
    if any(len(b) != n for b in batches):
        raise ValueError("all stacked query batches must have equal row counts")
    return {
        "coords": np.stack([b.coords for b in batches]),
        "date": np.stack([b.date for b in batches]),
        "topo": np.stack([b.topo for b in batches]),
        "res": np.stack([b.res for b in batches]),
        "state": np.stack([b.state for b in batches]),
    }


class Model:
    """A built variant: config + meta + ordered trainable parameters."""

    def __init__(self, config: ModelConfig, meta: ModelMeta, params: dict[str, Value]):
        self.config = config
        self.meta = meta
        self.params = params

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, meta: ModelMeta) -> "Model":
        rng = np.random.default_rng(
            np.random.SeedSequence((int(meta.init_seed) & 0xFFFFFFFFFFFFFFFF,
                                    zlib.crc32(b"model-init")))
        )
        params: dict[str, Value] = {}

        def dense(name, n_out, n_in, zero=False):
            bound = 1.0 / np.sqrt(n_in)
            w = np.zeros((n_out, n_in)) if zero else rng.uniform(-bound, bound, (n_out, n_in))
            params[f"{name}.w"] = Value(w)
            params[f"{name}.b"] = Value(np.zeros(n_out))

        def conv(name, c_out, c_in, k, zero=False, one_d=False):
            shape = (c_out, c_in, k) if one_d else (c_out, c_in, k, k)
            fan_in = c_in * (k if one_d else k * k)
            bound = 1.0 / np.sqrt(fan_in)
            w = np.zeros(shape) if zero else rng.uniform(-bound, bound, shape)
            params[f"{name}.w"] = Value(w)
            params[f"{name}.b"] = Value(np.zeros(c_out))

        c = config
        if c.variant in ("kani", "hyper_mlp"):
            ch = c.encoder_channels
            conv("encoder.stem", ch[0], 1, 3)
            conv("encoder.down1", ch[1], ch[0], 3)
            conv("encoder.down2", ch[2], ch[1], 3)
            conv("encoder.down3", ch[3], ch[2], 3)
            conv("encoder.down4", ch[3], ch[3], 3)
            fused = ch[3] + ch[3] + ch[2] + ch[1]
            conv("encoder.fuse", c.feature_channels, fused, 1)
            conv("encoder.feat", c.feature_channels, c.feature_channels, 3)
            h16, w16 = meta.train_shape[0] // 16, meta.train_shape[1] // 16
            d = h16 * w16
            for i, target in (("1", c.hidden_dim * c.embed_dim),
                              ("2", c.hidden_dim * c.hidden_dim)):
                conv(f"gen.w{i}.conv", c.gen_channels, c.feature_channels, 3, one_d=True)
                dense(f"gen.w{i}.dense", target, c.gen_channels * d)
        for name, width in (("coords", 2), ("date", 4), ("topo", 1), ("res", 1), ("state", 1)):
            dense(f"embed.{name}", c.embed_dim, width)
        if c.variant in ("kani", "hyper_mlp"):
            params["rec.ln1.gain"] = Value(np.ones(c.hidden_dim))
            params["rec.ln1.bias"] = Value(np.zeros(c.hidden_dim))
            params["rec.ln2.gain"] = Value(np.ones(c.hidden_dim))
            params["rec.ln2.bias"] = Value(np.zeros(c.hidden_dim))
            dense("rec.reduce", c.reduce_dim, c.hidden_dim)
            if c.variant == "kani":
                for layer in range(c.kan_layers):
                    coeffs, base = init_kan_layer(c.reduce_dim, c.reduce_dim, c.spline, rng)
                    params[f"kan.{layer}.spline_coeffs"] = Value(coeffs)
                    params[f"kan.{layer}.base_weights"] = Value(base)
            else:
                dense("mlp.0", c.mlp_hidden, c.reduce_dim)
                dense("mlp.1", c.reduce_dim, c.mlp_hidden)
            dense("head", 1, c.reduce_dim, zero=c.zero_init_head)
        else:
            dense("neck", c.hidden_dim, c.embed_dim)
            dense("body.0", c.hidden_dim, c.hidden_dim)
            dense("body.1", c.hidden_dim, c.hidden_dim)
            dense("head", 1, c.hidden_dim, zero=c.zero_init_head)
        return cls(config, meta, params)

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def normalize_field(self, f: GriddedField) -> np.ndarray:
        return (f.values - self.meta.norm_mean) / self.meta.norm_std

    def encode_field(self, x: "Value | np.ndarray") -> Value:
        """[B, 1, h, w] normalized field -> flattened feature map [B, c, d]."""
        xv = x if isinstance(x, Value) else Value(x)
        B, _, h, w = xv.data.shape
        if h % 16 or w % 16:
            raise ValueError(f"encoder needs h, w divisible by 16, got {h}x{w}")
        p = self.params
        e0 = dc.relu(dc.conv2d(xv, p["encoder.stem.w"], p["encoder.stem.b"]))
        e1 = dc.relu(dc.conv2d(e0, p["encoder.down1.w"], p["encoder.down1.b"], stride=2))
        e2 = dc.relu(dc.conv2d(e1, p["encoder.down2.w"], p["encoder.down2.b"], stride=2))
        e3 = dc.relu(dc.conv2d(e2, p["encoder.down3.w"], p["encoder.down3.b"], stride=2))
        e4 = dc.relu(dc.conv2d(e3, p["encoder.down4.w"], p["encoder.down4.b"], stride=2))
        skips = dc.concat(
            [e4, dc.avg_pool2d(e3, 2), dc.avg_pool2d(e2, 4), dc.avg_pool2d(e1, 8)],
            axis=1,
        )
        fused = dc.relu(dc.conv2d(skips, p["encoder.fuse.w"], p["encoder.fuse.b"]))
        a = dc.conv2d(fused, p["encoder.feat.w"], p["encoder.feat.b"])
        return dc.reshape(a, (B, self.config.feature_channels, (h // 16) * (w // 16)))

    def generate_weights(self, a: Value) -> tuple[Value, Value]:
        """Feature map [B, c, d] -> per-sample dense maps w1 [B,H,C], w2 [B,H,H]."""
        p = self.params
        c = self.config
        B = a.data.shape[0]
        out = []
        for i, (rows, cols) in (("1", (c.hidden_dim, c.embed_dim)),
                                ("2", (c.hidden_dim, c.hidden_dim))):
            g = dc.relu(dc.conv1d(a, p[f"gen.w{i}.conv.w"], p[f"gen.w{i}.conv.b"]))
            flat = dc.reshape(g, (B, -1))
            wi = dc.linear(flat, p[f"gen.w{i}.dense.w"], p[f"gen.w{i}.dense.b"])
            out.append(dc.reshape(wi, (B, rows, cols)))
        return out[0], out[1]

    def _embed_sum(self, stacked: dict[str, np.ndarray]) -> Value:
        p = self.params
        B, N, _ = stacked["coords"].shape
        flat = {k: v.reshape(B * N, v.shape[-1]) for k, v in stacked.items()}
        z = dc.linear(flat["coords"], p["embed.coords.w"], p["embed.coords.b"])
        z = dc.add(z, dc.linear(flat["date"], p["embed.date.w"], p["embed.date.b"]))
        z = dc.add(z, dc.linear(flat["topo"], p["embed.topo.w"], p["embed.topo.b"]))
        z = dc.add(z, dc.linear(flat["res"], p["embed.res.w"], p["embed.res.b"]))
        u = dc.add(z, dc.linear(flat["state"], p["embed.state.w"], p["embed.state.b"]))
        return u  # [B*N, C]

    def reconstruct(self, stacked: dict[str, np.ndarray], w1: Value, w2: Value) -> Value:
        """Per-point decode with generated weights; returns predictions [B, N]."""
        p = self.params
        c = self.config
        B, N, _ = stacked["coords"].shape
        u = self._embed_sum(stacked)
        u3 = dc.reshape(u, (B, N, c.embed_dim))
        h = dc.matmul(u3, dc.transpose(w1, (0, 2, 1)))  # [B, N, H]
        h = dc.relu(dc.layer_norm(h, p["rec.ln1.gain"], p["rec.ln1.bias"]))
        h = dc.matmul(h, dc.transpose(w2, (0, 2, 1)))  # [B, N, H]
        h = dc.relu(dc.layer_norm(h, p["rec.ln2.gain"], p["rec.ln2.bias"]))
        flat = dc.reshape(h, (B * N, c.hidden_dim))
        red = dc.linear(flat, p["rec.reduce.w"], p["rec.reduce.b"])
        if c.variant == "kani":
            for layer in range(c.kan_layers):
                lp = KanLayerParams(
                    p[f"kan.{layer}.spline_coeffs"], p[f"kan.{layer}.base_weights"], c.spline
                )
                red = kan_layer_forward(red, lp)
        else:
            red = dc.relu(dc.linear(red, p["mlp.0.w"], p["mlp.0.b"]))
            red = dc.relu(dc.linear(red, p["mlp.1.w"], p["mlp.1.b"]))
        out = dc.linear(red, p["head.w"], p["head.b"])
        pred = dc.add(out, stacked["state"].reshape(B * N, 1))
        return dc.reshape(pred, (B, N))

    def pure_mlp_forward(self, stacked: dict[str, np.ndarray]) -> Value:
        p = self.params
        c = self.config
        B, N, _ = stacked["coords"].shape
        u = self._embed_sum(stacked)
        h = dc.relu(dc.linear(u, p["neck.w"], p["neck.b"]))
        h = dc.relu(dc.linear(h, p["body.0.w"], p["body.0.b"]))
        h = dc.relu(dc.linear(h, p["body.1.w"], p["body.1.b"]))
        out = dc.linear(h, p["head.w"], p["head.b"])
        pred = dc.add(out, stacked["state"].reshape(B * N, 1))
        return dc.reshape(pred, (B, N))

    def forward_graph(self, fields_norm: "Value | None", batches: list[QueryBatch]) -> Value:
        """Differentiable joint forward for a batch of samples -> [B, N] normalized."""
        batches = [b.with_ablation(self.meta.ablation) for b in batches]
        stacked = stack_batches(batches)
        if self.config.variant == "pure_mlp":
            return self.pure_mlp_forward(stacked)
        a = self.encode_field(fields_norm)
        w1, w2 = self.generate_weights(a)
        return self.reconstruct(stacked, w1, w2)

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def predict(
        self,
        field: GriddedField,
        topo: TopographyGrid,
        stations: StationSet | None = None,
        mode: str = MODE_CORRECT,
        query_grid: CoordinateGrid | None = None,
        query_points: np.ndarray | None = None,
        channel_resolution: str = "zero",
        batch: QueryBatch | None = None,
    ) -> np.ndarray:
        """Denormalized predictions for one sample under the given query mode."""
        if batch is None:
            batch = self.build_batch(
                field, topo, stations, mode=mode, query_grid=query_grid,
                query_points=query_points, channel_resolution=channel_resolution,
            )
        fields = None
        if self.config.variant != "pure_mlp":
            fields = Value(self.normalize_field(field)[None, None, :, :])
        pred = self.forward_graph(fields, [batch])
        return pred.data[0] * self.meta.norm_std + self.meta.norm_mean

    def predict_many(self, fields: list[GriddedField], topo: TopographyGrid,
                     batches: list[QueryBatch]) -> np.ndarray:
        """Denormalized predictions for same-shape samples, one forward pass."""
        fv = None
        if self.config.variant != "pure_mlp":
            fv = Value(np.stack([self.normalize_field(f)[None] for f in fields]))
        pred = self.forward_graph(fv, batches)
        return pred.data * self.meta.norm_std + self.meta.norm_mean

    def build_batch(self, field, topo, stations=None, mode=MODE_CORRECT,
                    query_grid=None, query_points=None, channel_resolution="zero") -> QueryBatch:
        return build_query_batch(
            field, stations, topo, field.time, mode,
            norm=NormStats(self.meta.norm_mean, self.meta.norm_std, self.meta.variable),
            dem_norm=NormStats(self.meta.dem_mean, self.meta.dem_std, "dem_elev"),
            train_resolution=self.meta.train_resolution,
            query_grid=query_grid, query_points=query_points,
            channel_resolution=channel_resolution,
        )

    # ------------------------------------------------------------------
    # accounting and persistence
    # ------------------------------------------------------------------

    def param_count(self) -> tuple[int, dict[str, int]]:
        """Total parameter count and a per-component breakdown."""
        by_component: dict[str, int] = {}
        for name, v in self.params.items():
            comp = name.split(".", 1)[0]
            by_component[comp] = by_component.get(comp, 0) + v.data.size
        return sum(by_component.values()), by_component

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, out_dir: str | Path, checkpoint_name: str = "final.nfckpt") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        card = {"config": self.config.to_dict(), "meta": self.meta.to_dict()}
        (out / "model.json").write_text(
            json.dumps(card, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        save_checkpoint(self.state_arrays(), out / checkpoint_name)

    @classmethod
    def load(cls, run_dir: str | Path, checkpoint_name: str = "best.nfckpt") -> "Model":
        run = Path(run_dir)
        card = json.loads((run / "model.json").read_text(encoding="utf-8"))
        config = ModelConfig.from_dict(card["config"])
        meta = ModelMeta.from_dict(card["meta"])
        model = cls.build(config, meta)
        ckpt = run / checkpoint_name
        if not ckpt.exists():
            ckpt = run / "final.nfckpt"
        loaded = load_checkpoint(ckpt)
        if list(loaded) != list(model.params):
            raise ValueError(
                f"checkpoint parameter list does not match the configured model "
                f"({len(loaded)} vs {len(model.params)} tensors)"
            )
        for name, arr in loaded.items():
            if model.params[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for '{name}'")
            model.params[name].data = arr
        return model


def meta_from_dataset(ds, ablation: AblationFlags = AblationFlags(), init_seed: int = 0) -> ModelMeta:
    """Model metadata for training on a generated dataset."""
    var = ds.variable
    shape = grid_shape(ds.bbox, ds.resolution)
    return ModelMeta(
        variable=var,
        bbox=tuple(ds.bbox),
        train_resolution=ds.resolution,
        train_shape=shape,
        norm_mean=ds.norm[var].mean,
        norm_std=ds.norm[var].std,
        dem_mean=ds.norm["dem_elev"].mean,
        dem_std=ds.norm["dem_elev"].std,
        ablation=ablation,
        init_seed=init_seed,
    )
