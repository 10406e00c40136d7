import numpy as np
import pytest

from nfield.gridio import make_coordinate_grid
from nfield.synthgen import (
    Dataset,
    Oracle,
    SyntheticScenario,
    build_oracle,
    generate_dataset,
    generate_sample,
    sample_stations,
)


def tiny_scenario(**over):
    kw = dict(
        seed=9,
        bbox=(40.0, 42.0, 5.0, 7.0),
        resolution=0.25,
        n_bumps=3,
    )
    kw.update(over)
    return SyntheticScenario(**kw)


def test_zero_bias_coeffs():
    o = build_oracle(tiny_scenario(bias_coeffs=(0.0, 0.0, 0.0)))
    lats = np.linspace(40.1, 41.9, 13)
    lons = np.linspace(5.1, 6.9, 13)
    np.testing.assert_array_equal(o.bias(lats, lons), 0.0)


def test_single_bump_peak_and_slope():
    o = build_oracle(tiny_scenario(n_bumps=1))
    c_lat, c_lon = o.bump_lat[0], o.bump_lon[0]
    assert o.elev(c_lat, c_lon) == pytest.approx(o.bump_amp[0], rel=1e-12)
    assert o.slope(c_lat, c_lon) == pytest.approx(0.0, abs=1e-9)


def test_elev_grad_matches_finite_differences():
    o = build_oracle(tiny_scenario())
    rng = np.random.default_rng(0)
    lats = rng.uniform(40.2, 41.8, 20)
    lons = rng.uniform(5.2, 6.8, 20)
    gla, glo = o.elev_grad(lats, lons)
    h = 1e-6
    num_la = (o.elev(lats + h, lons) - o.elev(lats - h, lons)) / (2 * h)
    num_lo = (o.elev(lats, lons + h) - o.elev(lats, lons - h)) / (2 * h)
    np.testing.assert_allclose(gla, num_la, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(glo, num_lo, rtol=1e-6, atol=1e-6)


def test_obs_noise_zero_gives_exact_truth():
    sc = tiny_scenario(obs_noise_std=0.0)
    o = build_oracle(sc)
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    st = sample_stations(sc, 5)
    _, _, obs = generate_sample(sc, grid, st, t=3, oracle=o)
    np.testing.assert_array_equal(obs.values, o.y_true(st[:, 0], st[:, 1], 3))


def test_constant_bias_mode():
    sc = tiny_scenario(bias_coeffs=(2.0, 0.0, 0.0))
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    st = sample_stations(sc, 4)
    field, truth, _ = generate_sample(sc, grid, st, t=0)
    np.testing.assert_allclose(field.values - truth.values, 2.0, atol=1e-12)


def test_terrain_bias_matches_oracle():
    sc = tiny_scenario(bias_coeffs=(0.5, 1.2, 0.002))
    o = build_oracle(sc)
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    st = sample_stations(sc, 4)
    field, truth, _ = generate_sample(sc, grid, st, t=7, oracle=o)
    expected = (
        0.5
        + 1.2 * o.elev(grid.lat, grid.lon) / 1000.0
        + 0.002 * o.slope(grid.lat, grid.lon)
    )
    np.testing.assert_allclose(field.values - truth.values, expected, atol=1e-10)


def test_additive_systematic_error_time_invariant():
    sc = tiny_scenario()
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    st = sample_stations(sc, 4)
    f0, t0, _ = generate_sample(sc, grid, st, t=0)
    f9, t9, _ = generate_sample(sc, grid, st, t=9)
    np.testing.assert_allclose(
        f0.values - t0.values, f9.values - t9.values, atol=1e-12
    )


def test_gust_mode_multiplicative():
    sc = tiny_scenario(variable_mode="multiplicative_gust", variable="gust")
    o = build_oracle(sc)
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    st = sample_stations(sc, 4)
    field, truth, _ = generate_sample(sc, grid, st, t=5, oracle=o)
    g = 1.3 + 0.2 * np.tanh(o.slope(grid.lat, grid.lon))
    np.testing.assert_allclose(field.values, g * truth.values, atol=1e-12)


def test_sample_stations_deterministic_and_off_grid():
    sc = tiny_scenario()
    a = sample_stations(sc, 12)
    b = sample_stations(sc, 12)
    np.testing.assert_array_equal(a, b)
    res = sc.resolution
    fi = (a[:, 0] - sc.bbox[0]) / res - 0.5
    fj = (a[:, 1] - sc.bbox[2]) / res - 0.5
    d = np.hypot(fi - np.round(fi), fj - np.round(fj)) * res
    assert (d >= 0.1 * res - 1e-12).all()
    # strictly inside the bbox shrunk by one cell
    assert (a[:, 0] > sc.bbox[0] + res).all() and (a[:, 0] < sc.bbox[1] - res).all()


def test_sample_stations_single():
    a = sample_stations(tiny_scenario(), 1)
    assert a.shape == (1, 3)


def test_station_noise_unbiased():
    sc = tiny_scenario(obs_noise_std=0.3)
    o = build_oracle(sc)
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    st = sample_stations(sc, 25)
    gaps = []
    for t in range(0, 400):
        _, _, obs = generate_sample(sc, grid, st, t=t, oracle=o)
        gaps.append(obs.values - o.y_true(st[:, 0], st[:, 1], t))
    gaps = np.concatenate(gaps)
    assert len(gaps) == 10000
    assert abs(gaps.mean()) <= 3.0 * sc.obs_noise_std / np.sqrt(len(gaps))


def test_sample_determinism():
    sc = tiny_scenario()
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    st = sample_stations(sc, 6)
    f1, t1, o1 = generate_sample(sc, grid, st, t=4)
    f2, t2, o2 = generate_sample(sc, grid, st, t=4)
    np.testing.assert_array_equal(f1.values, f2.values)
    np.testing.assert_array_equal(o1.values, o2.values)


def test_truth_block_average_consistency():
    # the default scenario is smooth enough that truth at r/2, block-averaged
    # 2x2, stays within 0.05 of truth generated directly at r
    sc = SyntheticScenario.desk_additive()
    o = build_oracle(sc)
    grid_r = make_coordinate_grid(sc.bbox, sc.resolution)
    grid_half = make_coordinate_grid(sc.bbox, sc.resolution / 2)
    t = 11
    coarse = o.y_true(grid_r.lat, grid_r.lon, t)
    fine = o.y_true(grid_half.lat, grid_half.lon, t)
    h, w = coarse.shape
    block = fine.reshape(h, 2, w, 2).mean(axis=(1, 3))
    assert np.abs(block - coarse).max() <= 0.05


def test_generate_dataset_layout_and_determinism(tmp_path):
    sc = tiny_scenario()
    m1 = generate_dataset(sc, 20, (0.7, 0.1, 0.2), tmp_path / "d1", n_stations=5)
    m2 = generate_dataset(sc, 20, (0.7, 0.1, 0.2), tmp_path / "d2", n_stations=5)
    assert m1["splits"] == {"train": [0, 14], "val": [14, 16], "test": [16, 20]}
    assert m1["norm"] == m2["norm"]
    assert (tmp_path / "d1" / "manifest.json").read_bytes() == (
        tmp_path / "d2" / "manifest.json"
    ).read_bytes()
    assert (tmp_path / "d1" / "fields" / "s00007.nfg").read_bytes() == (
        tmp_path / "d2" / "fields" / "s00007.nfg"
    ).read_bytes()
    assert (tmp_path / "d1" / "norm_stats.csv").read_bytes() == (
        tmp_path / "d2" / "norm_stats.csv"
    ).read_bytes()


def test_dataset_mean_input_minus_truth_matches_oracle_bias(tmp_path):
    sc = tiny_scenario(bias_coeffs=(0.7, 1.0, 0.001))
    generate_dataset(sc, 12, (0.5, 0.25, 0.25), tmp_path / "d", n_stations=4)
    ds = Dataset(tmp_path / "d" / "manifest.json")
    grid = make_coordinate_grid(sc.bbox, sc.resolution)
    gaps = []
    for i in range(12):
        field, truth, _ = ds.load_sample(i, with_truth=True)
        gaps.append(field.values - truth.values)
    oracle_mean = build_oracle(sc).bias(grid.lat, grid.lon).mean()
    assert np.mean(gaps) == pytest.approx(oracle_mean, abs=1e-6)


def test_dataset_loader_round_trip(tmp_path):
    sc = tiny_scenario()
    generate_dataset(sc, 10, (0.6, 0.2, 0.2), tmp_path / "d", n_stations=3)
    ds = Dataset(tmp_path / "d" / "manifest.json")
    assert ds.variable == "t2m"
    assert list(ds.split_indices("test")) == [8, 9]
    field, stations = ds.load_sample(2)
    assert field.time == 2
    assert len(stations) == 3
    assert ds.dem.resolution == sc.resolution / sc.dem_upsample
    assert ds.norm["t2m"].std > 0


def test_split_fractions_validated(tmp_path):
    with pytest.raises(ValueError, match="sum to 1"):
        generate_dataset(tiny_scenario(), 10, (0.5, 0.2, 0.2), tmp_path / "x")


def test_scenario_round_trip_dict():
    sc = SyntheticScenario.desk_gust(seed=77)
    back = SyntheticScenario.from_dict(sc.to_dict())
    assert back == sc


def test_scenario_validation():
    with pytest.raises(ValueError):
        tiny_scenario(n_bumps=0)
    with pytest.raises(ValueError):
        tiny_scenario(obs_noise_std=-0.1)
    with pytest.raises(ValueError):
        tiny_scenario(variable_mode="nope")
