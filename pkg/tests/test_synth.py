import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from copulamon.errors import DomainError
from copulamon.spline_basis import SplineBasisSpec
from copulamon.synth import (CurveParams, DegradationScenario, WindProcess, generate_scada, true_curve)


def test_wcdf_formula_value():
    assert float(true_curve(8.0, CurveParams(c=8, k=2))) == pytest.approx(1 - np.exp(-1), abs=1e-15)
    assert float(true_curve(8.0, CurveParams(c=8, k=2))) == pytest.approx(0.6321, abs=1e-4)


def test_cut_in_and_rated():
    np.testing.assert_array_equal(true_curve([0.0, 2.99, 14.01, 25.0]), [0, 0, 1, 1])


@settings(max_examples=50)
@given(st.floats(0.5, 20), st.floats(0.5, 6))
def test_truth_monotone(c, k):
    v = np.linspace(0, 25, 2001)
    assert np.all(np.diff(true_curve(v, CurveParams(c=c, k=k))) >= 0)


def test_validation():
    with pytest.raises(DomainError):
        true_curve([-1.0])
    with pytest.raises(DomainError):
        DegradationScenario(tau=-1)
    with pytest.raises(DomainError):
        DegradationScenario(tau=1, drop=1.0)
    with pytest.raises(DomainError):
        DegradationScenario(tau=1, xi=(0.1,))
    with pytest.raises(DomainError):
        CurveParams(c=0)


def test_seeded_determinism():
    sc = DegradationScenario(tau=3)
    a = generate_scada(sc, 6, 50, seed=7)
    b = generate_scada(sc, 6, 50, seed=7)
    c = generate_scada(sc, 6, 50, seed=8)
    assert a.table.v.tobytes() == b.table.v.tobytes()
    assert a.table.p.tobytes() == b.table.p.tobytes()
    assert a.table.v.tobytes() != c.table.v.tobytes()


def test_labels_consistent():
    d = generate_scada(DegradationScenario(tau=3), 6, 40, seed=1)
    np.testing.assert_array_equal(d.block, np.repeat(np.arange(6), 40))
    np.testing.assert_array_equal(d.degraded, d.block >= 3)
    assert np.all(np.diff(d.table.timestamp) == np.timedelta64(600, "s"))


def test_null_scenario_identical_distributions():
    sc = DegradationScenario(tau=2, drop=0.0, noise_sd=0.0)
    d = generate_scada(sc, 4, 100, seed=2)
    np.testing.assert_array_equal(d.table.p, true_curve(d.table.v))


def test_noiseless_on_shifted_curve():
    d = generate_scada(DegradationScenario(tau=1, drop=0.1, noise_sd=0.0), 3, 100, seed=2)
    expect = np.where(d.degraded, 0.9, 1.0) * true_curve(d.table.v)
    np.testing.assert_allclose(d.table.p, expect, rtol=0, atol=1e-15)


def test_ten_percent_drop_bin_average():
    sc = DegradationScenario(tau=1, drop=0.1)
    d = generate_scada(sc, 2, 10_000, seed=11)
    v, p = d.table.v, d.table.p
    bins = np.arange(5, 13.5, 0.5)
    ratios = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        pre = p[~d.degraded & (v >= lo) & (v < hi)]
        post = p[d.degraded & (v >= lo) & (v < hi)]
        # compare against the truth at matched speeds to remove binning error
        tv_pre = true_curve(v[~d.degraded & (v >= lo) & (v < hi)]).mean()
        tv_post = true_curve(v[d.degraded & (v >= lo) & (v < hi)]).mean()
        ratios.append((post.mean() / tv_post) / (pre.mean() / tv_pre))
    assert np.mean(ratios) == pytest.approx(0.9, abs=0.01)


def test_truncated_wind_ranges():
    wind = WindProcess(segment_ranges=((0, 8), (6, 25)))
    d = generate_scada(DegradationScenario(tau=9, wind=wind), 4, 500, seed=0)
    for k in range(4):
        v = d.table.v[d.block == k]
        lo, hi = wind.range_for(k)
        assert v.min() >= lo and v.max() <= hi
    with pytest.raises(DomainError):
        WindProcess(segment_ranges=((5, 5),)).sample(np.random.default_rng(0), 3)


def test_per_coefficient_shift():
    spec = SplineBasisSpec()
    xi = np.zeros(spec.n_basis)
    xi[0] = 0.05
    sc = DegradationScenario(tau=1, noise_sd=0.0, xi=tuple(xi), spec=spec)
    d = generate_scada(sc, 2, 50, seed=3)
    diff = true_curve(d.table.v) - d.table.p
    np.testing.assert_allclose(diff, np.where(d.degraded, 0.05, 0.0), atol=1e-12)


def test_start_block_continues_stream():
    sc = DegradationScenario(tau=3)
    d = generate_scada(sc, 2, 10, seed=0, start_block=2)
    np.testing.assert_array_equal(d.degraded, np.repeat([False, True], 10))
    assert d.table.timestamp[0] == np.datetime64("2020-01-01T00:00:00") + 20 * np.timedelta64(600, "s")
