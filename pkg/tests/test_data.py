import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weathertokens import data as D
from weathertokens.errors import ConfigError, CorruptionError, DataError, DegenerateError, FormatError


def _series(start="2020-03-01T00:00", t=45, channels=("u10", "v10"), hw=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    return D.GridSeries(D.to_epoch_hour(start), rng.standard_normal((t, len(channels), *hw)), channels)


# time helpers

def test_epoch_hours():
    h = D.to_epoch_hour("2020-01-01T00:00:00Z")
    assert h == 438288
    assert D.iso_hour(h + 27) == "2020-01-02T03:00:00Z"
    assert D.year_of(h - 1) == 2019
    assert D.hour_of_day(h + 27) == 3
    with pytest.raises(ValueError):
        D.to_epoch_hour("2020-01-01T00:30:00Z")


# WGRD

def test_grid_round_trip(tmp_path):
    s = _series()
    path = tmp_path / "a.wgrd"
    D.write_grid_file(s, path)
    back = D.load_grid_file(path)
    assert back.start_hour == s.start_hour and back.channels == s.channels
    assert back.fields.tobytes() == s.fields.tobytes()
    assert back.units == ("m/s", "m/s")


def test_grid_layout(tmp_path):
    s = D.GridSeries(5, np.arange(2 * 3 * 2 * 1, dtype=np.float32).reshape(2, 3, 2, 1), ("radiation", "cloud", "temperature"))
    path = tmp_path / "s.wgrd"
    D.write_grid_file(s, path)
    raw = path.read_bytes()
    assert raw[:4] == b"WGRD"
    assert np.frombuffer(raw[4:6], "<u2")[0] == 1
    assert np.frombuffer(raw[6:8], "<u2")[0] == 3
    assert tuple(np.frombuffer(raw[8:20], "<u4")) == (2, 2, 1)
    assert np.frombuffer(raw[20:28], "<u8")[0] == 5
    assert raw[28:44] == b"radiation" + b"\0" * 7
    np.testing.assert_array_equal(np.frombuffer(raw[76:], "<f4"), np.arange(12))
    assert len(raw) == 28 + 48 + 48


def test_grid_bad_magic(tmp_path):
    path = tmp_path / "a.wgrd"
    D.write_grid_file(_series(), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XGRD"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        D.load_grid_file(path)


def test_grid_bad_version(tmp_path):
    path = tmp_path / "a.wgrd"
    D.write_grid_file(_series(), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        D.load_grid_file(path)


def test_grid_short_payload(tmp_path):
    path = tmp_path / "a.wgrd"
    D.write_grid_file(_series(), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptionError):
        D.load_grid_file(path)


def test_grid_extent_overflow_and_trailing(tmp_path):
    path = tmp_path / "a.wgrd"
    D.write_grid_file(_series(t=2), path)
    raw = bytearray(path.read_bytes())
    raw[8:12] = (2**31).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        D.load_grid_file(path)
    D.write_grid_file(_series(t=2), path)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CorruptionError):
        D.load_grid_file(path)


def test_grid_series_validation():
    with pytest.raises(DataError):
        D.GridSeries(0, np.zeros((2, 3, 4, 4)), ("u10", "v10"))
    with pytest.raises(ConfigError):
        D.GridSeries(0, np.zeros((2, 1, 4, 4)), ("foo",)).variables


# normalisation statistics

def test_stats_constant_channel():
    s = D.GridSeries(D.to_epoch_hour("2018-01-01T00:00"), np.full((4, 2, 3, 3), 5.0), ("u10", "v10"))
    with pytest.raises(DegenerateError):
        D.compute_norm_stats([s])


def test_stats_population_convention():
    f = np.zeros((2, 2, 2, 2))
    f[0], f[1] = 1.0, 3.0
    s = D.GridSeries(D.to_epoch_hour("2018-06-01T00:00"), f, ("u10", "v10"))
    stats = D.compute_norm_stats([s])
    np.testing.assert_allclose(stats.mean, [2, 2])
    np.testing.assert_allclose(stats.std, [1, 1])


def test_stats_need_training_frames():
    with pytest.raises(ConfigError):
        D.compute_norm_stats([_series("2024-02-01T00:00")])


def test_stats_leakage_invariant():
    train = _series("2021-12-31T12:00", t=30, seed=1)  # straddles into 2022
    val, test = _series("2023-01-01T00:00", seed=2), _series("2024-01-01T00:00", seed=3)
    base = D.compute_norm_stats([train])
    perturbed = [D.GridSeries(s.start_hour, s.fields * 7 + 100, s.channels) for s in (val, test)]
    assert D.compute_norm_stats([train, val, test]).to_text() == base.to_text()
    assert D.compute_norm_stats([*perturbed, train]).to_text() == base.to_text()


def test_stats_exclude_frames_after_2022():
    boundary = D.to_epoch_hour("2023-01-01T00:00")
    s = _series("2022-12-31T20:00", t=8, seed=4)
    stats = D.compute_norm_stats([s])
    expect = s.fields[:4].astype(np.float64)
    np.testing.assert_allclose(stats.mean, expect.mean(axis=(0, 2, 3)), rtol=1e-12)
    assert stats.period_end == boundary - 1


def test_stats_text_round_trip(tmp_path):
    stats = D.compute_norm_stats([_series("2019-01-01T00:00")])
    path = tmp_path / "stats.txt"
    stats.save(path)
    back = D.NormalizationStats.load(path)
    assert back.to_text() == stats.to_text()
    np.testing.assert_array_equal(back.mean, stats.mean)
    assert back.channels == ("u10", "v10") and back.convention == "population"
    assert "u10" in path.read_text()


def test_normalize_examples():
    stats = D.NormalizationStats(("u10", "v10"), np.array([1.0, -2.0]), np.array([2.0, 0.5]), 0, 1)
    x = np.stack([np.full((3, 3), 1.0), np.full((3, 3), -1.5)])[None]
    out = D.normalize_fields(x, stats)
    np.testing.assert_allclose(out[0, 0], 0.0)
    np.testing.assert_allclose(out[0, 1], 1.0)
    with pytest.raises(ConfigError):
        D.normalize_fields(x, stats, ("radiation", "cloud"))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50))
def test_normalize_round_trip(seed, scale):
    s = _series(t=3, hw=(4, 4), seed=seed)
    fields = s.fields * np.float32(scale)
    stats = D.NormalizationStats(s.channels, np.array([3.0, -1.0]), np.array([scale, 2 * scale]), 0, 1)
    back = D.denormalize_fields(D.normalize_fields(fields, stats), stats)
    np.testing.assert_allclose(back, fields, atol=1e-5 * max(1.0, scale))


# capacity and targets

def test_capacity_midpoint_and_anchor():
    cap = D.interpolate_capacity([("2020-01-01T00:00", 1000.0), ("2021-01-01T00:00", 1100.0)])
    a, b = cap.anchor_hours
    assert (b - a) % 2 == 0
    assert cap.at((a + b) // 2) == pytest.approx(1050.0, abs=1e-9)
    assert cap.at(a) == 1000.0 and cap.at(b) == 1100.0
    assert cap.at(b + 5000) == 1100.0
    assert cap.hourly.size == b - a + 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1.0, 5000.0), min_size=2, max_size=6), st.integers(0, 10**6))
def test_capacity_between_anchors(values, probe):
    anchors = [(f"{2017 + i}-01-01T00:00", v) for i, v in enumerate(values)]
    cap = D.interpolate_capacity(anchors)
    h = cap.anchor_hours[0] + probe % (cap.anchor_hours[-1] - cap.anchor_hours[0])
    k = np.searchsorted(cap.anchor_hours, h, side="right") - 1
    lo, hi = sorted(cap.anchor_mw[k:k + 2])
    assert lo - 1e-9 <= cap.at(h) <= hi + 1e-9


def test_capacity_errors():
    with pytest.raises(DataError):
        D.interpolate_capacity([("2020-01-01T00:00", 1000.0)])
    with pytest.raises(DataError):
        D.interpolate_capacity([("2020-01-01T00:00", 1000.0), ("2021-01-01T00:00", 0.0)])
    with pytest.raises(DataError):
        D.interpolate_capacity([("2021-01-01T00:00", 1000.0), ("2020-01-01T00:00", 900.0)])
    cap = D.interpolate_capacity([("2020-01-01T00:00", 1000.0), ("2021-01-01T00:00", 1100.0)])
    with pytest.raises(DataError, match="2019-12-31T23:00:00Z"):
        cap.at([cap.anchor_hours[0] - 1], strict=True)


def test_normalize_target_examples(caplog):
    frac, n = D.normalize_target([500.0, 0.0], [1000.0, 1000.0])
    np.testing.assert_array_equal(frac, [0.5, 0.0])
    assert n == 0
    with caplog.at_level(logging.WARNING):
        frac, n = D.normalize_target([1010.0], [1000.0])
    assert frac[0] == 1.0 and n == 1
    assert "clipped" in caplog.text
    with pytest.raises(DataError):
        D.normalize_target([1.0], [0.0])


# CSV

def _write(path, text):
    path.write_text(text)
    return path


def test_csv_import(tmp_path):
    p = _write(tmp_path / "p.csv", "timestamp_utc,value_mw\n2020-01-01T00:00:00Z,10.5\n2020-01-01T01:00:00Z,11\n")
    s = D.import_entsoe_csv(p)
    assert len(s) == 2
    np.testing.assert_array_equal(s.values, [10.5, 11.0])


def test_csv_duplicate(tmp_path):
    p = _write(tmp_path / "p.csv", "timestamp_utc,value_mw\n2020-01-01T00:00:00Z,1\n2020-01-01T00:00:00Z,2\n")
    with pytest.raises(DataError, match="2020-01-01T00:00:00Z"):
        D.import_entsoe_csv(p)


def test_csv_negative_and_unparsable(tmp_path):
    p = _write(tmp_path / "p.csv", "timestamp_utc,value_mw\n2020-01-01T00:00:00Z,-1\n")
    with pytest.raises(DataError, match="negative"):
        D.import_entsoe_csv(p)
    p = _write(tmp_path / "q.csv", "timestamp_utc,value_mw\n2020-01-01T00:00:00Z,1\n2020-01-01T01:00:00Z,1,000\n")
    with pytest.raises(DataError, match="line 3"):
        D.import_entsoe_csv(p)
    p = _write(tmp_path / "r.csv", "time,mw\n")
    with pytest.raises(DataError, match="header"):
        D.import_entsoe_csv(p)


def test_csv_round_trip(tmp_path):
    hours = np.arange(100, 110)
    D.write_entsoe_csv(tmp_path / "x.csv", hours, np.linspace(0, 9, 10))
    s = D.import_entsoe_csv(tmp_path / "x.csv", "forecast")
    np.testing.assert_array_equal(s.hours, hours)
    np.testing.assert_allclose(s.values, np.linspace(0, 9, 10))


# samples

def _block(days, start="2020-05-01T00:00", seed=0):
    return _series(start, t=24 * (days + 1), hw=(4, 4), seed=seed)


def _production(series, skip=()):
    hours = np.array([h for h in series.times if h not in set(skip)])
    return D.HourlySeries(hours, np.full(hours.size, 400.0))


CAP = D.interpolate_capacity([("2017-01-01T00:00", 800.0), ("2025-01-01T00:00", 800.0)])


def test_three_days_three_samples():
    block = _block(3)
    samples, report = D.assemble_samples([block], _production(block), CAP)
    assert len(samples) == 3 and not report.dropped
    first = samples[0]
    assert D.iso_hour(first.hours[0]) == "2020-05-01T03:00:00Z"
    assert D.iso_hour(first.hours[-1]) == "2020-05-02T23:00:00Z"
    assert first.weather.shape == (45, 2, 4, 4)
    np.testing.assert_array_equal(first.weather, block.fields[3:48])
    np.testing.assert_allclose(first.target, 0.5)
    assert len(samples) * 45 == sum(s.target.size for s in samples)


def test_missing_hour_drops_sample(caplog):
    block = _block(3)
    gap = D.to_epoch_hour("2020-05-02T02:00")  # day 2 before its own window, inside day 1's
    gap2 = D.to_epoch_hour("2020-05-03T10:00")  # inside windows of day 2 and day 3
    with caplog.at_level(logging.INFO):
        samples, report = D.assemble_samples([block], _production(block, skip=[gap2]), CAP)
    assert len(samples) == 1 and len(report.dropped) == 2
    assert "dropping sample" in caplog.text
    samples, report = D.assemble_samples([block], _production(block, skip=[gap]), CAP)
    assert [D.iso_hour(s.start_hour) for s in samples] == ["2020-05-02T03:00:00Z", "2020-05-03T03:00:00Z"]
    assert report.dropped[0][0] == D.to_epoch_hour("2020-05-01T03:00")


def test_windows_never_cross_block_gaps():
    a = _block(1, "2020-05-01T00:00")
    b = _block(1, "2020-05-05T00:00", seed=1)
    prod = D.HourlySeries(np.concatenate([a.times, b.times]), np.full(2 * a.times.size, 100.0))
    samples, _ = D.assemble_samples([b, a], prod, CAP)
    assert [D.iso_hour(s.start_hour) for s in samples] == ["2020-05-01T03:00:00Z", "2020-05-05T03:00:00Z"]


def test_configurable_start_hour_and_normalisation():
    block = _block(2)
    stats = D.NormalizationStats(block.channels, np.array([1.0, 1.0]), np.array([2.0, 2.0]), 0, 1)
    samples, _ = D.assemble_samples([block], _production(block), CAP, start_hour=6, stats=stats)
    assert D.hour_of_day(samples[0].start_hour) == 6
    np.testing.assert_allclose(samples[0].weather, (block.fields[6:51] - 1) / 2, atol=1e-6)


def _sample(ts):
    return D.ForecastSample(D.to_epoch_hour(ts), np.zeros((1, 1, 1, 1)), np.zeros(1), np.zeros(1), np.ones(1))


def test_split_boundaries():
    split = D.split_by_year([_sample("2022-12-31T03:00"), _sample("2023-01-01T03:00"),
                             _sample("2023-12-31T03:00"), _sample("2024-01-01T03:00"), _sample("2016-12-31T03:00")])
    assert split.counts() == {"train": 1, "validation": 2, "test": 1, "unassigned": 1}
    assert split.train[0].year == 2022 and split.test[0].year == 2024
    only_test = D.split_by_year([_sample("2024-03-01T03:00")])
    assert not only_test.train and not only_test.validation


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(400_000, 490_000), max_size=40))
def test_split_is_partition(hours):
    samples = [D.ForecastSample(h, np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1)) for h in hours]
    split = D.split_by_year(samples)
    parts = split.train + split.validation + split.test + split.unassigned
    assert sorted(id(s) for s in parts) == sorted(id(s) for s in samples)
    assert all(2017 <= s.year <= 2022 for s in split.train)
    assert all(s.year == 2023 for s in split.validation)
    assert all(s.year == 2024 for s in split.test)


def test_load_dataset_dir(tmp_path):
    block = _block(2)
    D.write_grid_file(block, tmp_path / "a.wgrd")
    D.write_entsoe_csv(tmp_path / "production.csv", block.times, np.full(block.times.size, 10.0))
    D.write_entsoe_csv(tmp_path / "capacity.csv", CAP.anchor_hours, CAP.anchor_mw)
    ds = D.load_dataset_dir(tmp_path)
    assert ds.variables == "wind" and len(ds.grids) == 1
    (tmp_path / "capacity.csv").unlink()
    with pytest.raises(DataError):
        D.load_dataset_dir(tmp_path)
