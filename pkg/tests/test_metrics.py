import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from copulamon.errors import DomainError
from copulamon.metrics import detection_score, first_alarm_delay, fit_score


def test_perfect_fit():
    s = fit_score([1.0, 2.0], [1.0, 2.0])
    assert (s.rmse, s.mae, s.mape) == (0.0, 0.0, 0.0)


def test_single_point():
    s = fit_score([0.0], [3.0])
    assert s.rmse == 3.0 and s.mae == 3.0 and s.mape == 1.0


def test_against_loop(rng):
    pred, actual = rng.normal(size=200), rng.normal(size=200)
    actual[::17] = 0.0
    sq = ab = pe = 0.0
    cnt = 0
    for a, b in zip(pred, actual):
        sq += (a - b) ** 2
        ab += abs(a - b)
        if b != 0:
            pe += abs((a - b) / b)
            cnt += 1
    s = fit_score(pred, actual)
    assert abs(s.rmse - math.sqrt(sq / 200)) < 1e-12
    assert abs(s.mae - ab / 200) < 1e-12
    assert abs(s.mape - pe / cnt) < 1e-12


def test_fit_errors():
    with pytest.raises(DomainError):
        fit_score([1.0], [1.0, 2.0])
    with pytest.raises(DomainError):
        fit_score([], [])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
def test_rmse_at_least_mae(pairs):
    p, a = np.array(pairs).T
    s = fit_score(p, a)
    assert s.rmse >= s.mae * (1 - 1e-12) and min(s.rmse, s.mae, s.mape) >= 0


def test_perfect_detection():
    s = detection_score([0, 1, 1], [0, 1, 1])
    assert (s.precision, s.recall, s.f1) == (1.0, 1.0, 1.0)


def test_no_alarms():
    s = detection_score([0, 0, 0], [0, 1, 1])
    assert s.recall == 0.0 and s.precision == 0.0 and s.undefined


def test_table_value():
    # 22 of 26 degraded segments flagged, no false alarms
    truth = np.r_[np.zeros(10, bool), np.ones(26, bool)]
    alarms = truth.copy()
    alarms[10:14] = False
    s = detection_score(alarms, truth)
    assert s.recall == pytest.approx(0.846, abs=5e-4)
    assert s.precision == 1.0
    assert s.f1 == pytest.approx(0.917, abs=5e-4)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), max_size=40), st.randoms())
def test_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = detection_score([x for x, _ in pairs], [y for _, y in pairs])
    b = detection_score([x for x, _ in shuffled], [y for _, y in shuffled])
    assert a == b
    if a.precision > 0 and a.recall > 0:
        assert a.f1 == pytest.approx(2 * a.precision * a.recall / (a.precision + a.recall))


def test_first_alarm_delay():
    truth = [0, 0, 1, 1, 1]
    assert first_alarm_delay([0, 0, 1, 1, 1], truth) == 0
    assert first_alarm_delay([1, 0, 0, 0, 1], truth) == 2
    assert first_alarm_delay([1, 0, 0, 0, 0], truth) is None
    assert first_alarm_delay([1, 1], [0, 0]) is None
    with pytest.raises(DomainError):
        detection_score([1], [1, 0])
