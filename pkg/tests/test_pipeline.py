import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from copulamon.errors import ConfigError, CoverageError, DataFormatError
from copulamon.pipeline import (ScadaTable, WindowSpec, check_coverage, clip_to_boundary, normalize_power,
                                parse_scada, remove_outliers, segment, segment_count, speed_bin_index,
                                window_labels)
from copulamon.spline_basis import SplineBasisSpec

HEADER = "timestamp,wind_speed_ms,power_kw\n"


def table(v, p):
    v = np.asarray(v, dtype=float)
    ts = np.datetime64("2021-01-01T00:00:00") + np.arange(v.size) * np.timedelta64(600, "s")
    return ScadaTable(ts, v, np.asarray(p, dtype=float))


def test_empty_body():
    t = parse_scada(HEADER)
    assert len(t) == 0 and t.skipped == 0


def test_one_valid_row():
    t = parse_scada(HEADER + "2021-01-01T00:10:00,7.5,1200\n")
    assert len(t) == 1
    rec = t.records()[0]
    assert rec.v == 7.5 and rec.p == 1200.0
    assert t.power_unit == "kw"


def test_non_numeric_speed_skipped():
    t = parse_scada(HEADER + "2021-01-01T00:10:00,fast,1200\n2021-01-01T00:20:00,8,1300\n")
    assert len(t) == 1 and t.skipped == 1


def test_malformed_rows_counted():
    body = ("2021-01-01T00:10:00,7,1\n"
            "not-a-date,7,1\n"
            "2021-01-01T00:30:00,nan,1\n"
            "2021-01-01T00:40:00,-1,1\n"
            "2021-01-01T00:50:00,7\n"
            "\n"
            "2021-01-01T01:00:00,7,2\n")
    t = parse_scada(io.StringIO(HEADER + body))
    assert len(t) == 2 and t.skipped == 4


def test_missing_column_named():
    with pytest.raises(DataFormatError, match="wind_speed_ms"):
        parse_scada("timestamp,speed,power_kw\n")
    with pytest.raises(DataFormatError, match="power_kw or power_norm"):
        parse_scada("timestamp,wind_speed_ms,p\n")
    with pytest.raises(DataFormatError):
        parse_scada("")


def test_sorted_by_timestamp():
    body = "2021-01-01T00:30:00,3,3\n2021-01-01T00:10:00,1,1\n2021-01-01T00:20:00,2,2\n"
    t = parse_scada(HEADER.replace("power_kw", "power_norm") + body)
    np.testing.assert_array_equal(t.v, [1, 2, 3])
    assert t.power_unit == "norm"


def test_csv_roundtrip():
    t = table([1.0, 2.5, 7.25], [0.0, 0.1, 0.5])
    buf = io.StringIO()
    t.to_csv(buf)
    back = parse_scada(buf.getvalue())
    np.testing.assert_array_equal(back.v, t.v)
    np.testing.assert_array_equal(back.p, t.p)
    np.testing.assert_array_equal(back.timestamp, t.timestamp)


def test_normalize_power():
    t = table([5.0, 6.0], [2000.0, 0.0])
    n = normalize_power(t, 2000.0)
    np.testing.assert_array_equal(n.p, [1.0, 0.0])
    np.testing.assert_array_equal(normalize_power(n, 1.0).p, n.p)
    for bad in (0.0, -5.0):
        with pytest.raises(ConfigError):
            normalize_power(t, bad)


def test_bins():
    idx = speed_bin_index([4.99, 5.0, 5.3, 12.9, 12.99, 13.0])
    np.testing.assert_array_equal(idx, [-1, 0, 3, 79, 79, -1])
    assert len(set(speed_bin_index(np.arange(50, 130) / 10))) == 80


def test_outlier_threshold_value():
    # 50 records at 0.4 and 50 at 0.6: mean 0.5, sd 0.1 in bin [7.0, 7.1)
    t = table(np.full(100, 7.05), np.r_[np.full(50, 0.4), np.full(50, 0.6)])
    res = remove_outliers(t)
    (b,) = res.bins
    assert b.mu == pytest.approx(0.5) and b.sigma == pytest.approx(0.1)
    assert b.threshold == pytest.approx(0.5 - 0.1 * 2.3263479, abs=1e-6)
    assert b.threshold == pytest.approx(0.2674, abs=1e-4)


def test_low_record_removed():
    p = np.r_[np.full(50, 0.4), np.full(50, 0.6), 0.10]
    res = remove_outliers(table(np.full(101, 7.05), p))
    np.testing.assert_array_equal(res.removed_index, [100])
    assert len(res.kept) == 100 and res.removed.p[0] == 0.10


def test_direction_flag():
    p = np.r_[np.full(50, 0.4), np.full(50, 0.6), 0.95]
    t = table(np.full(101, 7.05), p)
    assert len(remove_outliers(t, "below").removed) == 0
    # literal reading: everything above the 1% quantile goes
    above = remove_outliers(t, "above")
    (b,) = above.bins
    np.testing.assert_array_equal(above.removed_index, np.nonzero(p > b.threshold)[0])
    assert len(above.kept) == 0
    with pytest.raises(ConfigError):
        remove_outliers(t, "sideways")


def test_degenerate_bin_and_out_of_range():
    t = table([8.0] * 10 + [4.0, 13.5], [0.3] * 10 + [-1.0, -1.0])
    res = remove_outliers(t)
    assert len(res.removed) == 0
    assert res.bins[0].sigma == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_never_removes_at_or_above_mean(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(3, 15, 400)
    p = rng.uniform(0, 1, 400) ** rng.uniform(0.2, 3)
    t = table(v, p)
    res = remove_outliers(t)
    mu = {round(b.lo, 6): b.mu for b in res.bins}
    for i in res.removed_index:
        lo = round(5.0 + 0.1 * speed_bin_index(t.v[i]), 6)
        assert t.p[i] < mu[lo]


def test_clip_to_boundary():
    t = table([0.0, 10.0, 25.0, 25.1], [0, 0, 0, 0])
    np.testing.assert_array_equal(clip_to_boundary(t, SplineBasisSpec()).v, [0.0, 10.0, 25.0])


def test_segment_count_examples():
    assert segment_count(2000, WindowSpec(500, 250)) == 7
    assert segment_count(499, WindowSpec(500, 250)) == 0
    assert segment_count(500, WindowSpec(500, 250)) == 1


def test_non_overlapping_tiling():
    t = table(np.arange(30.0), np.zeros(30))
    segs = list(segment(t, WindowSpec(10, 10)))
    np.testing.assert_array_equal(np.concatenate([s.xs for s in segs]), np.arange(30.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 300), st.integers(1, 40), st.data())
def test_segment_invariants(n, n_w, data):
    n_u = data.draw(st.integers(1, n_w))
    t = table(np.arange(float(n)), np.zeros(n))
    stream = segment(t, WindowSpec(n_w, n_u))
    segs = list(stream)
    assert len(segs) == (0 if n < n_w else (n - n_w) // n_u + 1)
    for k, s in enumerate(segs):
        assert s.xs.size == n_w
        np.testing.assert_array_equal(s.xs, np.arange(k * n_u, k * n_u + n_w))
        assert s.start == k * n_u


def test_window_spec_validation():
    with pytest.raises(ConfigError):
        WindowSpec(10, 11)
    with pytest.raises(ConfigError):
        WindowSpec(10, 0)
    with pytest.raises(ConfigError):
        WindowSpec(10.0, 5)


def test_window_labels():
    lab = np.zeros(2000, dtype=bool)
    lab[1100:] = True
    w = window_labels(lab, WindowSpec(500, 250))
    np.testing.assert_array_equal(w, [False, False, False, True, True, True, True])


def test_coverage_gap_named():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 25, 5000)
    v = v[(v < 10) | (v >= 11)]
    with pytest.raises(CoverageError, match=r"\[10, 11\)") as err:
        check_coverage(v, SplineBasisSpec())
    assert err.value.empty_intervals == [(10.0, 11.0)]
    check_coverage(rng.uniform(0, 25, 5000), SplineBasisSpec())
