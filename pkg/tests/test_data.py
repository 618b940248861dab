from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memforecast.data import (
    Normalizer, SeriesTable, WindowSpec, calendar_features, count_windows, iter_windows, load_csv, similarity,
    split, synth_components, synth_generate, write_csv,
)
from memforecast.errors import ConfigurationError, IngestionError

ETT_HEADER = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT"


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def small_table(n=10, d=2):
    t0 = datetime(2021, 3, 1)
    return SeriesTable(tuple(t0 + timedelta(hours=k) for k in range(n)),
                       np.arange(n * d, dtype=float).reshape(n, d), tuple(f"f{k}" for k in range(d)), d - 1)


# ---------------------------------------------------------------- load_csv

def test_load_three_rows(tmp_path):
    p = write(tmp_path, "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n")
    tab = load_csv(p, "date", "b")
    assert len(tab) == 3
    assert tab.feature_names == ("a", "b")
    assert tab.target_index == 1
    np.testing.assert_array_equal(tab.values, [[1, 2], [3, 4], [5, 6]])


def test_load_shuffled_rows_equals_sorted(tmp_path):
    rows = ["2020-01-01 00:00:00,1", "2020-01-01 01:00:00,2", "2020-01-01 02:00:00,3", "2020-01-01 03:00:00,4"]
    a = load_csv(write(tmp_path, "date,v\n" + "\n".join(rows) + "\n", "a.csv"), "date", "v")
    shuffled = [rows[2], rows[0], rows[3], rows[1]]
    b = load_csv(write(tmp_path, "date,v\n" + "\n".join(shuffled) + "\n", "b.csv"), "date", "v")
    assert a.timestamps == b.timestamps
    np.testing.assert_array_equal(a.values, b.values)


def test_load_ett_format(tmp_path):
    lines = [ETT_HEADER]
    for k in range(5):
        ts = datetime(2016, 7, 1) + timedelta(hours=k)
        lines.append(ts.isoformat(sep=" ") + "," + ",".join(str(k + j * 0.5) for j in range(7)))
    tab = load_csv(write(tmp_path, "\n".join(lines) + "\n"), "date", "OT")
    assert tab.n_features == 7
    assert tab.target_name == "OT"
    assert tab.target_index == 6


def test_load_iso8601_with_t(tmp_path):
    tab = load_csv(write(tmp_path, "date,v\n2020-01-01T00:00:00,1\n2020-01-01T01:00:00,2\n"), "date", "v")
    assert tab.timestamps[1] == datetime(2020, 1, 1, 1)


@pytest.mark.parametrize("body, match", [
    ("date,v\n2020-01-01 00:00:00,1\nnot-a-date,2\n", "row 3.*datetime"),
    ("date,v\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,abc\n", "row 3.*non-numeric"),
    ("date,v\n2020-01-01 00:00:00,1\n2020-01-01 00:00:00,2\n", "duplicate timestamp.*row 3"),
    ("date,v\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,\n", "row 3"),
])
def test_load_errors_carry_row_numbers(tmp_path, body, match):
    with pytest.raises(IngestionError, match=match):
        load_csv(write(tmp_path, body), "date", "v")


def test_load_missing_target(tmp_path):
    with pytest.raises(IngestionError, match="target"):
        load_csv(write(tmp_path, "date,v\n2020-01-01 00:00:00,1\n"), "date", "OT")


def test_irregular_spacing_rejected():
    ts = (datetime(2020, 1, 1), datetime(2020, 1, 1, 1), datetime(2020, 1, 1, 3))
    with pytest.raises(IngestionError, match="irregular"):
        SeriesTable(ts, np.zeros((3, 1)), ("v",), 0)


def test_csv_roundtrip_is_exact(tmp_path):
    tab = synth_generate(50, 3, seed=4)
    p = tmp_path / "s.csv"
    write_csv(tab, p)
    back = load_csv(p, "date", "target")
    assert back.timestamps == tab.timestamps
    assert np.array_equal(back.values, tab.values)


# ---------------------------------------------------------------- split

def test_split_six_two_two():
    parts = split(small_table(10), (0.6, 0.2, 0.2))
    assert [len(p) for p in parts] == [6, 2, 2]


def test_split_seven_one_two():
    parts = split(small_table(10), (0.7, 0.1, 0.2))
    assert [len(p) for p in parts] == [7, 1, 2]


@given(st.integers(20, 500), st.sampled_from([(0.6, 0.2, 0.2), (0.7, 0.1, 0.2), (0.5, 0.25, 0.25)]))
def test_split_partitions_table(n, ratios):
    tab = small_table(n)
    parts = split(tab, ratios)
    np.testing.assert_array_equal(np.concatenate([p.values for p in parts]), tab.values)
    assert sum(len(p) for p in parts) == n
    assert parts[0].timestamps[-1] < parts[1].timestamps[0] < parts[2].timestamps[0]


def test_split_rejects_short_segments_and_bad_ratios():
    with pytest.raises(ConfigurationError):
        split(small_table(10), (0.6, 0.2, 0.2), min_len=3)
    with pytest.raises(ConfigurationError):
        split(small_table(10), (0.6, 0.3, 0.2))


# ---------------------------------------------------------------- normalizer

def test_normalizer_roundtrip_and_train_only_fit():
    tab = synth_generate(300, 3, seed=2)
    train, val, _ = split(tab)
    norm = Normalizer.fit(train)
    np.testing.assert_allclose(norm.normalize(train.values).mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(norm.denormalize(norm.normalize(val.values)), val.values, atol=1e-9)
    assert not np.allclose(Normalizer.fit(tab).means, norm.means)


def test_normalizer_floors_std():
    tab = SeriesTable(small_table(5).timestamps, np.ones((5, 1)), ("c",), 0)
    norm = Normalizer.fit(tab)
    assert norm.stds[0] == pytest.approx(1e-8)
    assert np.all(np.isfinite(norm.normalize(tab.values)))


# ---------------------------------------------------------------- windows

def enumerate_starts(n, spec):
    return [s for s in range(0, n, spec.stride) if s + spec.window_size <= n]


def test_count_windows_stride_one():
    assert count_windows(100, WindowSpec(6, 6, 4, 1)) == 91


def test_count_windows_stride_two_uses_enumeration():
    # (N - S_w + 1) / S_s = 45.5, but starts 0, 2, ..., 90 give 46 windows
    spec = WindowSpec(6, 6, 4, 2)
    assert len(enumerate_starts(100, spec)) == 46
    assert count_windows(100, spec) == 46


def test_count_windows_too_short_is_zero():
    assert count_windows(5, WindowSpec(4, 4, 2)) == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 120), st.integers(1, 30), st.integers(1, 20), st.integers(1, 7))
def test_count_matches_enumeration_and_iteration(n, ls, lp, stride):
    spec = WindowSpec(ls, max(1, ls // 2), lp, stride)
    tab = small_table(n, 1)
    assert count_windows(n, spec) == len(enumerate_starts(n, spec)) == sum(1 for _ in iter_windows(tab, spec))


def test_window_contents_and_boundaries():
    tab = small_table(40, 2)
    spec = WindowSpec(8, 4, 3)
    ws = list(iter_windows(tab, spec))
    for w in ws:
        np.testing.assert_array_equal(w.dec_input, w.enc_input[-4:])
        assert w.dec_marks.shape == (4 + 3, 4)
        assert w.enc_marks.shape == (8, 4)
    np.testing.assert_array_equal(ws[1].enc_input[:-1], ws[0].enc_input[1:])
    np.testing.assert_array_equal(ws[-1].target[-1], tab.values[-1])
    assert [w.start for w in ws] == list(range(len(ws)))


def test_window_marks_cover_future_timestamps():
    tab = small_table(30, 1)
    w = next(iter_windows(tab, WindowSpec(6, 3, 2)))
    expected = [calendar_features(tab.timestamps[k]) for k in range(3, 8)]
    assert [tuple(r) for r in w.dec_marks] == expected


def test_window_normalizer_applied():
    tab = small_table(30, 2)
    norm = Normalizer.fit(tab)
    w = next(iter_windows(tab, WindowSpec(5, 5, 2), norm))
    np.testing.assert_allclose(w.enc_input, norm.normalize(tab.values[:5]))


def test_encoder_overlap_fraction_168():
    tab = small_table(200, 1)
    a, b = list(iter_windows(tab, WindowSpec(168, 168, 2)))[:2]
    shared = sum(1 for r in a.enc_input[:, 0] if r in set(b.enc_input[:, 0]))
    assert shared / 168 == pytest.approx(167 / 168)
    assert round(shared / 168, 3) == 0.994


# ---------------------------------------------------------------- similarity

def test_similarity_reported_values():
    assert similarity(2, 1) == 0.5
    assert similarity(168, 1) == 167 / 168
    assert similarity(10, 10) == 0.0
    assert similarity(10, 25) == 0.0


@given(st.integers(1, 400), st.integers(1, 400), st.integers(1, 400))
def test_similarity_monotone(ls, s1, s2):
    lo, hi = sorted((s1, s2))
    assert similarity(ls, hi) <= similarity(ls, lo)
    assert similarity(ls, lo) <= similarity(ls + 1, lo)


# ---------------------------------------------------------------- calendar

def test_calendar_new_year_2020():
    assert calendar_features(datetime(2020, 1, 1, 0)) == (1, 1, 2, 0)  # a Wednesday


def test_calendar_midnight_rollover():
    a = calendar_features(datetime(2020, 1, 1, 23))
    b = calendar_features(datetime(2020, 1, 1, 23) + timedelta(hours=1))
    assert b[1] == a[1] + 1 and b[3] == 0 and a[3] == 23


@given(st.datetimes(min_value=datetime(1990, 1, 1), max_value=datetime(2100, 1, 1)))
def test_calendar_ranges(ts):
    f = calendar_features(ts)
    assert len(f) == 4
    assert 1 <= f[0] <= 12 and 1 <= f[1] <= 31 and 0 <= f[2] <= 6 and 0 <= f[3] <= 23


# ---------------------------------------------------------------- synthetic data

def test_synth_deterministic():
    a, b = synth_generate(500, 3, seed=9), synth_generate(500, 3, seed=9)
    assert a.timestamps == b.timestamps and np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, synth_generate(500, 3, seed=10).values)


def test_synth_noiseless_is_periodic_plus_trend():
    n = 1000
    tab = synth_generate(n, 3, seed=1, noise=0.0)
    parts = synth_components(n, 3, seed=1)
    detrended = tab.values - parts["trend"]
    np.testing.assert_allclose(detrended[168:], detrended[:-168], atol=1e-9)


def test_synth_daily_autocorrelation():
    daily = synth_components(2000, 3, seed=0)["daily"]
    for k in range(3):
        x = daily[:, k] - daily[:, k].mean()
        r = np.dot(x[24:], x[:-24]) / np.sqrt(np.dot(x[24:], x[24:]) * np.dot(x[:-24], x[:-24]))
        assert r > 0.99


def test_synth_channels_are_coupled():
    tab = synth_generate(2000, 3, seed=0, noise=0.0)
    corr = np.corrcoef(tab.values.T)
    assert np.max(np.abs(corr[np.triu_indices(3, 1)])) > 0.1
