import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tt2vfin.correlation import autocorrelation, correlation_report, cross_correlation
from tt2vfin.errors import NumericError, UsageError
from tt2vfin.ingest import align_group, fill_missing
from tt2vfin.synthetic import series_from_closes


def double_loop(x, y, K):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sx = (sum((a - mx) ** 2 for a in x) / n) ** 0.5
    sy = (sum((b - my) ** 2 for b in y) / n) ** 0.5
    out = []
    for k in range(-K, K + 1):
        s, cnt = 0.0, 0
        for t in range(n):
            if 0 <= t + k < n:
                s += (x[t] - mx) * (y[t + k] - my)
                cnt += 1
        out.append(s / cnt / (sx * sy))
    return np.array(out)


def test_matches_double_loop_oracle():
    r = np.random.default_rng(0)
    for _ in range(10):
        x, y = r.standard_normal(80), r.standard_normal(80)
        np.testing.assert_allclose(cross_correlation(x, y, 5).values, double_loop(x, y, 5),
                                   rtol=0, atol=1e-12)


def test_lag_zero_autocorrelation_is_one():
    x = np.random.default_rng(1).uniform(0, 5, 50)
    assert autocorrelation(x, 10).at(0) == pytest.approx(1.0, abs=1e-12)


def test_anticorrelated():
    x = np.random.default_rng(2).standard_normal(40)
    assert cross_correlation(x, -x, 3).at(0) == pytest.approx(-1.0, abs=1e-12)


def test_errors():
    with pytest.raises(NumericError):
        cross_correlation(np.ones(10), np.arange(10.0), 2)
    with pytest.raises(UsageError):
        cross_correlation(np.arange(5.0), np.arange(5.0), 5)


series = hnp.arrays(np.float64, st.integers(8, 60), elements=st.floats(-100, 100))


@settings(max_examples=100, deadline=None)
@given(series, st.data())
def test_symmetry(x, data):
    y = data.draw(hnp.arrays(np.float64, x.size, elements=st.floats(-100, 100)))
    if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
        return
    K = data.draw(st.integers(0, x.size - 1))
    a = cross_correlation(x, y, K).values
    b = cross_correlation(y, x, K).values
    np.testing.assert_allclose(a, b[::-1], rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(series, st.floats(0.01, 100), st.floats(-100, 100))
def test_affine_invariance_and_sign(x, a, b):
    if np.ptp(x) < 1e-3:
        return
    y = np.roll(x, 1)
    base = cross_correlation(x, y, 3).values
    np.testing.assert_allclose(cross_correlation(a * x + b, y, 3).values, base, atol=1e-12)
    np.testing.assert_allclose(cross_correlation(-a * x + b, y, 3).values, -base, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(series, series)
def test_lag_zero_bounded(x, y):
    n = min(x.size, y.size)
    x, y = x[:n], y[:n]
    if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
        return
    assert abs(cross_correlation(x, y, 0).at(0)) <= 1 + 1e-9


def test_extreme_lag_can_leave_unit_range():
    x = np.array([1.0, 0.0, 0.0, 0.0])
    assert cross_correlation(x, x[::-1], 3).at(3) == pytest.approx(3.0)


@pytest.mark.parametrize("d", [1, 3, 7])
def test_shift_peaks_at_positive_delay(d):
    z = np.random.default_rng(d).standard_normal(300 + d)
    x = z[d:]
    y = z[:-d]  # y[t] = x[t - d]
    curve = cross_correlation(x, y, 10)
    assert curve.lags[np.argmax(curve.values)] == d


# -- report ------------------------------------------------------------------

def _walk(seed, n=300):
    return 30 * np.exp(np.cumsum(np.random.default_rng(seed).normal(0, 0.02, n)))


def _group(**cols):
    return fill_missing(align_group([series_from_closes(t, c) for t, c in cols.items()]))


def test_report_single_ticker(tmp_path):
    rep = correlation_report(_group(A=_walk(0)), "A", 5)
    assert len(rep.curves) == 1 and rep.summary() == []
    names = sorted(p.name for p in rep.write(tmp_path))
    assert names == ["xcorr_A_A.csv", "xcorr_summary.csv"]
    with open(tmp_path / "xcorr_A_A.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["lag"]) for r in rows] == list(range(-5, 6))
    assert float(rows[5]["rho"]) == pytest.approx(1.0)


def test_report_duplicate_partner_matches_autocorrelation():
    z = _walk(1)
    rep = correlation_report(_group(A=z, B=z.copy()), "A", 8)
    np.testing.assert_array_equal(rep.curves[0].values, rep.curves[1].values)
    rep2 = correlation_report(_group(A=z), "A", 8, partners=["A"])
    np.testing.assert_array_equal(rep2.curves[0].values, rep2.curves[1].values)


@pytest.mark.parametrize("representation", ["normalized", "close"])
def test_report_noisy_copy_highly_correlated(representation):
    x = _walk(2)
    y = x * (1 + np.random.default_rng(3).normal(0, 1e-4, x.size))
    rep = correlation_report(_group(A=x, B=y), "A", 5, representation)
    assert rep.summary()[0][2] > 0.95


def test_report_uses_common_dates():
    x = _walk(4, 300)
    d = series_from_closes("A", x).dates
    a = series_from_closes("A", x, d)
    b = series_from_closes("B", x[100:] * 2, d[100:])
    rep = correlation_report(fill_missing(align_group([a, b])), "A", 4, "close")
    assert rep.summary()[0][2] == pytest.approx(1.0, abs=1e-12)
