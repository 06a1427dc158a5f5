import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pimrl.metrics import MetricsReport, hct, hct_first_failure, mae, passing, pcc, report, rmse

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([3.0, 4.0], [0.0, 0.0]) == math.sqrt(12.5)


def test_mae_examples():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([3.0, -4.0], [0.0, 0.0]) == 3.5


def test_shape_mismatch():
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])


def test_pcc_examples():
    a = np.random.default_rng(0).normal(size=(2, 8, 8))
    assert pcc(a, a) == pytest.approx(1.0, abs=1e-15)
    assert pcc(a, -a) == pytest.approx(-1.0, abs=1e-15)
    assert pcc(a, a + 3.0) == pytest.approx(1.0, abs=1e-12)
    assert math.isnan(pcc(np.ones(5), a.ravel()[:5]))


def test_hct_examples():
    f = np.random.default_rng(1).normal(size=(10, 2, 4, 4))
    assert hct(f, f, 0.15) == pytest.approx(1.5, abs=1e-15)
    assert hct(-f, f, 0.15) == 0.0
    alt = np.where(np.arange(10)[:, None, None, None] % 2 == 0, f, -f)
    assert hct(alt, f, 0.5) == 2.5
    assert hct_first_failure(alt, f, 0.5) == 0.5


def test_constant_frames_fail_threshold():
    f = np.random.default_rng(2).normal(size=(3, 4))
    p = f.copy()
    p[1] = 1.0
    assert passing(p, f).tolist() == [True, False, True]


@given(arrays(float, (4, 6), elements=finite), arrays(float, (4, 6), elements=finite))
def test_mae_le_rmse_and_shift_invariance(a, b):
    assert mae(a, b) <= rmse(a, b) * (1 + 1e-12) + 1e-300
    s = np.roll(a, 2, axis=1), np.roll(b, 2, axis=1)
    assert rmse(*s) == pytest.approx(rmse(a, b), rel=1e-12, abs=1e-300)


@given(st.integers(0, 12), st.integers(0, 1000))
def test_hct_counts_passing_frames(n_fail, seed):
    f = np.random.default_rng(seed).normal(size=(12, 9))
    p = f.copy()
    p[:n_fail] *= -1
    assert hct(p, f, 0.25) == 0.25 * (12 - n_fail)
    assert 0.0 <= hct(p, f, 0.25) <= 12 * 0.25


def test_report_aggregates_and_roundtrip():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(6, 2, 5, 5))
    p = t + 0.1 * rng.normal(size=t.shape)
    p[2] = 0.0
    r = report(p, t, 0.5)
    assert abs(r.rmse - np.mean(r.rmse_per_frame)) < 1e-12
    assert abs(r.mae - np.mean(r.mae_per_frame)) < 1e-12
    d = r.to_dict()
    assert d["pcc_per_frame"][2] is None
    back = MetricsReport.from_dict(d)
    assert math.isnan(back.pcc_per_frame[2]) and back.rmse == r.rmse
