import numpy as np
import pytest

from nfield.gridio import (
    CoordinateGrid,
    GriddedField,
    GridIOError,
    NormStats,
    StationSet,
    bilinear_interp,
    denormalize,
    grid_axes,
    make_coordinate_grid,
    nearest_interp,
    normalize,
    read_field,
    read_norm_stats,
    read_stations,
    write_field,
    write_norm_stats,
    write_stations,
)


def make_field(values, bbox=(0.0, 1.0, 0.0, 1.0), resolution=0.5, var="t2m", time=0):
    return GriddedField(
        values=np.asarray(values, dtype=float),
        bbox=bbox,
        resolution=resolution,
        variable=var,
        time=time,
    )


# --------------------------------------------------------------------------
# independent brute-force interpolation oracles
# --------------------------------------------------------------------------


def brute_bilinear(values, bbox, res, lat, lon):
    n_lat, n_lon = values.shape
    lat_c = bbox[0] + (np.arange(n_lat) + 0.5) * res
    lon_c = bbox[2] + (np.arange(n_lon) + 0.5) * res
    lat = min(max(lat, lat_c[0]), lat_c[-1])
    lon = min(max(lon, lon_c[0]), lon_c[-1])
    i0 = 0
    while i0 < n_lat - 2 and lat_c[i0 + 1] < lat:
        i0 += 1
    j0 = 0
    while j0 < n_lon - 2 and lon_c[j0 + 1] < lon:
        j0 += 1
    ti = (lat - lat_c[i0]) / res
    tj = (lon - lon_c[j0]) / res
    return (
        values[i0, j0] * (1 - ti) * (1 - tj)
        + values[i0, j0 + 1] * (1 - ti) * tj
        + values[i0 + 1, j0] * ti * (1 - tj)
        + values[i0 + 1, j0 + 1] * ti * tj
    )


def brute_nearest(values, bbox, res, lat, lon):
    n_lat, n_lon = values.shape
    lat_c = bbox[0] + (np.arange(n_lat) + 0.5) * res
    lon_c = bbox[2] + (np.arange(n_lon) + 0.5) * res
    best = None
    best_d = np.inf
    for i in range(n_lat):
        for j in range(n_lon):
            d = (lat - lat_c[i]) ** 2 + (lon - lon_c[j]) ** 2
            if d < best_d - 1e-15 or (abs(d - best_d) <= 1e-15 and best is None):
                best_d = d
                best = (i, j)
    return values[best]


# --------------------------------------------------------------------------
# coordinate grids
# --------------------------------------------------------------------------


def test_grid_320x320():
    grid = make_coordinate_grid((30.0, 40.0, -110.0, -100.0), 0.03125)
    assert grid.lat.shape == (320, 320)
    assert grid.lon.shape == (320, 320)


def test_grid_2x2_centers():
    grid = make_coordinate_grid((0.0, 1.0, 0.0, 1.0), 0.5)
    assert grid.lat.shape == (2, 2)
    np.testing.assert_allclose(grid.lat[:, 0], [0.25, 0.75])
    np.testing.assert_allclose(grid.lon[0, :], [0.25, 0.75])


def test_grid_halving_resolution_doubles_axes():
    g1 = make_coordinate_grid((30.0, 40.0, -110.0, -100.0), 0.03125)
    g2 = make_coordinate_grid((30.0, 40.0, -110.0, -100.0), 0.015625)
    assert g2.lat.shape == (2 * g1.lat.shape[0], 2 * g1.lat.shape[1])


def test_grid_rejects_non_divisible_span():
    with pytest.raises(GridIOError, match="not divisible"):
        make_coordinate_grid((0.0, 1.0, 0.0, 1.0), 0.3)


def test_grid_cell_centered_progressions():
    grid = make_coordinate_grid((10.0, 12.0, 4.0, 7.0), 0.25)
    dlat = np.diff(grid.lat[:, 0])
    dlon = np.diff(grid.lon[0, :])
    np.testing.assert_allclose(dlat, 0.25)
    np.testing.assert_allclose(dlon, 0.25)


# --------------------------------------------------------------------------
# interpolation
# --------------------------------------------------------------------------


def test_bilinear_exact_at_cell_centers():
    rng = np.random.default_rng(0)
    f = make_field(rng.normal(size=(4, 4)), bbox=(0, 2, 0, 2), resolution=0.5)
    lat, lon = grid_axes(f.bbox, f.resolution)
    pts = [(lat[i], lon[j]) for i in range(4) for j in range(4)]
    out, warn = bilinear_interp(f, pts)
    assert warn == []
    np.testing.assert_allclose(out, f.values.ravel(), atol=1e-12)


def test_bilinear_constant_field():
    f = make_field(np.full((3, 3), 7.25), bbox=(0, 1.5, 0, 1.5))
    out, _ = bilinear_interp(f, [(0.3, 0.9), (1.0, 1.0), (0.75, 0.75)])
    np.testing.assert_allclose(out, 7.25, atol=1e-12)


def test_bilinear_2x2_centroid():
    # centers at 0.25/0.75; centroid (0.5, 0.5) averages all four values
    f = make_field([[1.0, 2.0], [3.0, 4.0]])
    out, _ = bilinear_interp(f, [(0.5, 0.5)])
    assert out[0] == pytest.approx(2.5, abs=1e-12)


def test_bilinear_affine_reproduction():
    a, b, c = 0.7, -1.3, 4.0
    bbox = (0.0, 2.0, 0.0, 2.0)
    grid = make_coordinate_grid(bbox, 0.25)
    f = make_field(a * grid.lat + b * grid.lon + c, bbox=bbox, resolution=0.25)
    rng = np.random.default_rng(1)
    lats = rng.uniform(0.2, 1.8, size=50)
    lons = rng.uniform(0.2, 1.8, size=50)
    out, _ = bilinear_interp(f, np.column_stack([lats, lons]))
    np.testing.assert_allclose(out, a * lats + b * lons + c, atol=1e-10)


def test_bilinear_within_local_bounds():
    rng = np.random.default_rng(2)
    f = make_field(rng.normal(size=(6, 6)), bbox=(0, 3, 0, 3))
    lats = rng.uniform(0.3, 2.7, size=200)
    lons = rng.uniform(0.3, 2.7, size=200)
    out, _ = bilinear_interp(f, np.column_stack([lats, lons]))
    assert out.min() >= f.values.min() - 1e-12
    assert out.max() <= f.values.max() + 1e-12


def test_bilinear_out_of_hull_clamps_and_warns():
    f = make_field([[1.0, 2.0], [3.0, 4.0]])
    out, warn = bilinear_interp(f, [(0.0, 0.0), (0.5, 0.5)])
    assert len(warn) == 1 and "query 0" in warn[0]
    assert out[0] == pytest.approx(1.0)


def test_nearest_at_center_and_basic():
    f = make_field([[1.0, 2.0], [3.0, 4.0]])
    out, _ = nearest_interp(f, [(0.25, 0.25), (0.3, 0.35)])
    assert out[0] == 1.0
    assert out[1] == 1.0


def test_nearest_tie_breaks_to_smaller_index():
    f = make_field([[1.0, 2.0], [3.0, 4.0]])
    # (0.25, 0.5) is equidistant between centers (0,0) and (0,1) -> (0,0)
    out, _ = nearest_interp(f, [(0.25, 0.5)])
    assert out[0] == 1.0
    # equidistant along latitude -> smaller row
    out, _ = nearest_interp(f, [(0.5, 0.25)])
    assert out[0] == 1.0
    # four-way tie at the centroid -> (0,0)
    out, _ = nearest_interp(f, [(0.5, 0.5)])
    assert out[0] == 1.0


def test_nearest_bilinear_agree_at_centers():
    rng = np.random.default_rng(3)
    f = make_field(rng.normal(size=(5, 4)), bbox=(0, 2.5, 0, 2.0))
    lat, lon = grid_axes(f.bbox, f.resolution)
    pts = [(lat[i], lon[j]) for i in range(5) for j in range(4)]
    b, _ = bilinear_interp(f, pts)
    n, _ = nearest_interp(f, pts)
    np.testing.assert_array_equal(b, n)


@pytest.mark.parametrize("seed", range(8))
def test_interp_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    bbox = (10.0, 12.0, -5.0, -3.0)
    res = 0.25
    f = make_field(rng.normal(size=(8, 8)), bbox=bbox, resolution=res)
    lats = rng.uniform(bbox[0], bbox[1], size=25)
    lons = rng.uniform(bbox[2], bbox[3], size=25)
    got_b, _ = bilinear_interp(f, np.column_stack([lats, lons]))
    got_n, _ = nearest_interp(f, np.column_stack([lats, lons]))
    for k in range(25):
        assert got_b[k] == pytest.approx(
            brute_bilinear(f.values, bbox, res, lats[k], lons[k]), abs=1e-12
        )
        assert got_n[k] == brute_nearest(f.values, bbox, res, lats[k], lons[k])


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def test_normalize_basics():
    s = NormStats(mean=280.0, std=10.0, variable="t2m")
    assert normalize(np.array(280.0), s) == 0.0
    assert normalize(np.array(290.0), s) == 1.0


def test_normalize_round_trip():
    s = NormStats(mean=3.7, std=2.1, variable="x")
    v = np.linspace(-50, 400, 77)
    back = denormalize(normalize(v, s), s)
    np.testing.assert_allclose(back, v, rtol=1e-6)


def test_normstats_rejects_bad_std():
    with pytest.raises(GridIOError, match="bad_stats"):
        NormStats(mean=0.0, std=0.0, variable="x")
    with pytest.raises(GridIOError, match="bad_stats"):
        NormStats(mean=0.0, std=-1.0, variable="x")


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def test_field_round_trip_bytes(tmp_path):
    f = make_field([[1.0, 2.0], [3.0, 4.0]], var="t2m", time=17)
    p1 = tmp_path / "a.nfg"
    p2 = tmp_path / "b.nfg"
    write_field(f, p1)
    g = read_field(p1)
    write_field(g, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert g.variable == "t2m" and g.time == 17
    np.testing.assert_array_equal(g.values, f.values)


def test_field_shape_mismatch(tmp_path):
    f = make_field(np.arange(4.0).reshape(2, 2))
    p = tmp_path / "a.nfg"
    write_field(f, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])  # drop one float
    with pytest.raises(GridIOError) as e:
        read_field(p)
    assert e.value.code == "shape_mismatch"


def test_field_bad_magic_and_version(tmp_path):
    f = make_field(np.arange(4.0).reshape(2, 2))
    p = tmp_path / "a.nfg"
    write_field(f, p)
    raw = p.read_bytes()
    p.write_bytes(b"XXGRID" + raw[6:])
    with pytest.raises(GridIOError) as e:
        read_field(p)
    assert e.value.code == "bad_magic"
    p.write_bytes(raw.replace(b"NFGRID 1", b"NFGRID 9", 1))
    with pytest.raises(GridIOError) as e:
        read_field(p)
    assert e.value.code == "bad_version"


def test_field_non_finite_payload(tmp_path):
    f = make_field(np.arange(4.0).reshape(2, 2))
    p = tmp_path / "a.nfg"
    write_field(f, p)
    raw = bytearray(p.read_bytes())
    raw[-8:-4] = np.array([np.inf], "<f4").tobytes()
    p.write_bytes(bytes(raw))
    with pytest.raises(GridIOError) as e:
        read_field(p)
    assert e.value.code == "non_finite"


def test_field_file_rows_north_to_south(tmp_path):
    f = make_field([[1.0, 2.0], [3.0, 4.0]])  # row 0 = south
    p = tmp_path / "a.nfg"
    write_field(f, p)
    payload = p.read_bytes().split(b"shape=2 2\n", 1)[1]
    first_row = np.frombuffer(payload[:8], "<f4")
    np.testing.assert_array_equal(first_row, [3.0, 4.0])  # north row first


def make_stations(n=3, bbox=(0.0, 1.0, 0.0, 1.0)):
    rng = np.random.default_rng(7)
    return StationSet(
        ids=tuple(f"s{k:03d}" for k in range(n)),
        lat=rng.uniform(bbox[0] + 0.1, bbox[1] - 0.1, n),
        lon=rng.uniform(bbox[2] + 0.1, bbox[3] - 0.1, n),
        elevation=rng.uniform(0, 2000, n),
        values=rng.normal(size=n),
        times=np.full(n, 5, dtype=np.int64),
    )


def test_stations_round_trip(tmp_path):
    st = make_stations()
    p1 = tmp_path / "s.csv"
    p2 = tmp_path / "s2.csv"
    write_stations(st, p1)
    back = read_stations(p1, bbox=(0.0, 1.0, 0.0, 1.0))
    write_stations(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(back.lat, st.lat)
    np.testing.assert_array_equal(back.values, st.values)


def test_stations_out_of_domain_names_id(tmp_path):
    st = StationSet(
        ids=("inside", "outside"),
        lat=np.array([0.5, 1.5]),
        lon=np.array([0.5, 0.5]),
        elevation=np.zeros(2),
        values=np.zeros(2),
        times=np.zeros(2, dtype=np.int64),
    )
    p = tmp_path / "s.csv"
    write_stations(st, p)
    with pytest.raises(GridIOError, match="outside"):
        read_stations(p, bbox=(0.0, 1.0, 0.0, 1.0))
    # without a bbox the reader does not enforce containment
    assert len(read_stations(p)) == 2


def test_stations_duplicate_ids_rejected():
    with pytest.raises(GridIOError, match="duplicate"):
        StationSet(
            ids=("a", "a"),
            lat=np.array([0.4, 0.5]),
            lon=np.array([0.4, 0.5]),
            elevation=np.zeros(2),
            values=np.zeros(2),
            times=np.zeros(2, dtype=np.int64),
        )


def test_norm_stats_file_round_trip(tmp_path):
    p = tmp_path / "norm.csv"
    write_norm_stats(
        [NormStats(1.5, 2.25, "t2m"), NormStats(800.0, 450.0, "dem_elev")], p
    )
    stats = read_norm_stats(p)
    assert stats["t2m"].mean == 1.5 and stats["t2m"].std == 2.25
    assert stats["dem_elev"].variable == "dem_elev"


def test_field_invariants():
    with pytest.raises(GridIOError):
        make_field(np.ones((3, 2)))  # wrong shape for bbox/res
    with pytest.raises(GridIOError):
        make_field([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(GridIOError):
        GriddedField(np.ones((1, 2)), (0, 0.5, 0, 1.0), 0.5, "x", 0)  # < 2 rows


def test_coordinate_grid_matches_field_layout():
    grid = make_coordinate_grid((0.0, 1.0, 0.0, 2.0), 0.5)
    assert isinstance(grid, CoordinateGrid)
    assert grid.lat.shape == (2, 4)
    assert grid.lat[0, 0] == 0.25 and grid.lon[0, 0] == 0.25
    assert grid.lat[1, 3] == 0.75 and grid.lon[1, 3] == 1.75
