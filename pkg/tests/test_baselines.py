import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from copulamon.baselines import (GprHyper, GprReference, HotellingReference, LlrConfig, WcdfParams, fit_wcdf,
                                 gpr_fit, gpr_grid_search, gpr_t2, hotelling_t2, llr_glr, local_linear, wcdf)
from copulamon.errors import DomainError, FitError, NumericError
from copulamon.synth import true_curve


def wcdf_data(rng, c, k, n=300, noise=0.0):
    x = rng.uniform(0, 25, n)
    return x, wcdf(x, WcdfParams(c, k)) + noise * rng.standard_normal(n)


@pytest.mark.parametrize("c,k", [(8.0, 2.0), (9.0, 3.0), (6.5, 1.5)])
def test_wcdf_recovers_noiseless(rng, c, k):
    p = fit_wcdf(wcdf_data(rng, c, k))
    assert abs(p.c - c) < 1e-3 and abs(p.k - k) < 1e-3


def test_wcdf_stepwise_and_exclusion(rng):
    np.testing.assert_array_equal(wcdf([0.0, 2.9, 14.5, 30.0], WcdfParams(8, 2)), [0, 0, 1, 1])
    x, y = wcdf_data(rng, 8.0, 2.0)
    junk = y.copy()
    junk[x <= 3.0] = 0.7  # below cut-in: ignored by the fit
    a, b = fit_wcdf((x, y)), fit_wcdf((x, junk))
    assert a == b
    assert fit_wcdf((x, y)) == a


def test_wcdf_errors():
    with pytest.raises(FitError):
        fit_wcdf((np.full(20, 2.0), np.zeros(20)))
    with pytest.raises(DomainError):
        WcdfParams(0.0, 1.0)


def test_hotelling_trivial():
    assert hotelling_t2([WcdfParams(8, 2)], [8, 2], np.eye(2))[0] == 0.0
    np.testing.assert_allclose(hotelling_t2([[3.0], [-1.0]], [1.0], [[1.0]]), [4.0, 4.0])
    with pytest.raises(NumericError):
        hotelling_t2([[1.0, 1.0]], [0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(DomainError):
        HotellingReference.from_params([WcdfParams(8, 2)] * 2)


def test_hotelling_percentile_matches_chi2():
    rng = np.random.default_rng(21)
    fits = [fit_wcdf(wcdf_data(rng, 9.0, 3.0, n=200, noise=0.03)) for _ in range(3000)]
    ref = HotellingReference.from_params(fits[:1500])
    t2 = hotelling_t2(fits[1500:], ref.mean, ref.cov)
    q = np.quantile(t2, 0.99)
    assert q == pytest.approx(stats.chi2.ppf(0.99, 2), rel=0.15)


def test_gpr_interpolation_limit():
    x = np.linspace(3, 14, 12)
    y = true_curve(x)
    m = gpr_fit((x, y), GprHyper(length=2.0, amplitude=0.5, noise=1e-10))
    mean, _ = m.predict(x)
    np.testing.assert_allclose(mean, y, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gpr_variance_below_prior(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 25, 30)
    h = GprHyper(rng.uniform(0.5, 4), rng.uniform(0.2, 1), rng.uniform(1e-4, 1e-2))
    m = gpr_fit((x, true_curve(x)), h)
    _, var = m.predict(rng.uniform(0, 25, 40), full_cov=False)
    assert np.all(var <= h.amplitude**2 + 1e-12)
    _, cov = m.predict(rng.uniform(0, 25, 40))
    assert np.all(np.diag(cov) <= h.amplitude**2 + 1e-12)


def test_gpr_t2_zero_at_prediction(rng):
    x = rng.uniform(0, 25, 40)
    ref = GprReference((gpr_fit((x, true_curve(x))),))
    xq = rng.uniform(0, 25, 20)
    mean, _ = ref.predict(xq)
    assert gpr_t2(ref, (xq, mean)) == pytest.approx(0.0, abs=1e-20)
    assert gpr_t2(ref, (xq, mean + 0.05)) > 0


def test_gpr_grid_search_picks_best(rng):
    x = rng.uniform(0, 25, 60)
    y = true_curve(x) + 0.01 * rng.standard_normal(60)
    grid = {"length": (0.5, 2.0), "amplitude": (0.6,), "noise": (1e-4, 1e-2)}
    best = gpr_grid_search((x, y), grid)
    vals = {(l, n): gpr_fit((x, y), GprHyper(l, 0.6, n)).log_marginal_likelihood()
            for l in grid["length"] for n in grid["noise"]}
    assert max(vals, key=vals.get) == (best.length, best.noise)
    with pytest.raises(DomainError):
        gpr_fit((np.array([]), np.array([])))


def test_gpr_in_control_false_alarm_fraction():
    rng = np.random.default_rng(5)
    seg = lambda n: (lambda x: (x, true_curve(x) + 0.03 * rng.standard_normal(n)))(rng.uniform(0, 25, n))
    h = GprHyper(2.0, 0.6, 0.03**2)
    ref = GprReference(tuple(gpr_fit(seg(80), h) for _ in range(5)))
    calib = [gpr_t2(ref, seg(40)) for _ in range(1500)]
    limit = np.quantile(calib, 0.95)
    held = np.array([gpr_t2(ref, seg(40)) for _ in range(1500)])
    frac = np.mean(held > limit)
    se = np.sqrt(0.05 * 0.95 / held.size) + np.sqrt(0.05 * 0.95 / len(calib))
    assert abs(frac - 0.05) < 3 * se


def test_local_linear_exact_on_lines(rng):
    x = rng.uniform(0, 25, 50)
    y = 0.3 + 0.04 * x
    xe = np.linspace(1, 24, 30)
    np.testing.assert_allclose(local_linear(xe, x, y, 0.5), 0.3 + 0.04 * xe, atol=1e-10)


def test_local_linear_widens():
    x = np.array([0.0, 0.1, 20.0, 20.1])
    out = local_linear([10.0], x, 2 * x, 0.01)
    assert out[0] == pytest.approx(20.0)
    with pytest.raises(DomainError):
        local_linear([1.0], [1.0], [1.0], 1.0)


def test_llr_zero_on_g0_line(rng):
    grid = np.linspace(0, 25, 251)
    cfg = LlrConfig(grid, 0.1 + 0.03 * grid, 0.01, 0.5)
    x = rng.uniform(0, 25, 200)
    assert abs(llr_glr((x, 0.1 + 0.03 * x), cfg)) < 1e-16 * 200 / 0.01 + 1e-12


def test_llr_shift_exact_for_line(rng):
    grid = np.linspace(0, 25, 251)
    cfg = LlrConfig(grid, 0.1 + 0.03 * grid, 0.01, 0.5)
    x = rng.uniform(0, 25, 200)
    delta = 0.05
    assert llr_glr((x, 0.1 + 0.03 * x + delta), cfg) == pytest.approx(200 * delta**2 / 0.01, rel=1e-9)


def test_llr_shift_on_power_curve(rng):
    grid = np.linspace(0, 25, 2501)
    cfg = LlrConfig(grid, true_curve(grid), 0.001, 0.2)
    x = rng.uniform(0, 25, 2000)
    delta = 0.05
    lr = llr_glr((x, true_curve(x) + delta), cfg)
    assert lr == pytest.approx(2000 * delta**2 / 0.001, rel=0.05)


def test_llr_variance_scaling(rng):
    x = rng.uniform(0, 25, 300)
    y = true_curve(x) + 0.03 * rng.standard_normal(300)
    cfg = LlrConfig.from_reference((x, y))
    seg = (x, 0.95 * y)
    double = LlrConfig(cfg.grid, cfg.g0, 2 * cfg.sigma0_sq, cfg.bandwidth)
    assert llr_glr(seg, double) == pytest.approx(llr_glr(seg, cfg) / 2, rel=1e-12)
    with pytest.raises(DomainError):
        LlrConfig(cfg.grid, cfg.g0, 0.0)
