"""Lagged auto- and cross-correlation for choosing correlated stock groups.

Sign convention: ``rho_xy(k)`` pairs ``x[t]`` with ``y[t + k]``. If ``y`` is
``x`` delayed by ``d`` steps (``y[t] = x[t - d]``) the curve peaks at
``k = +d``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._accel import kernels
from .errors import NumericError, UsageError
from .features import DEFAULT_MA_WINDOW, moving_average, pct_change
from .ingest import AlignedGroup


@dataclass(frozen=True)
class CorrelationCurve:
    base: str
    other: str
    lags: np.ndarray
    values: np.ndarray

    def at(self, lag: int) -> float:
        return float(self.values[lag - self.lags[0]])


def cross_correlation(x, y, max_lag: int, base: str = "x", other: str = "y") -> CorrelationCurve:
    """Normalised lagged cross-correlation for lags ``-max_lag..max_lag``.

    Each lag averages the centred cross products over its valid overlap,
    ``(1 / N_k) * sum_t (x_t - mean x)(y_{t+k} - mean y) / (std x * std y)``,
    with means and population standard deviations taken over the full series.
    Lag 0 is bounded by 1 in magnitude. At lags close to N the overlap is short
    and its average cross product can exceed the full-series variance, so
    values outside [-1, 1] are possible there.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise UsageError(f"series must be 1-D and equal length, got {x.shape} and {y.shape}")
    n = x.size
    if max_lag < 0 or max_lag >= n:
        raise UsageError(f"max_lag must satisfy 0 <= K < N (K={max_lag}, N={n})")
    if np.isnan(x).any() or np.isnan(y).any():
        raise NumericError("correlation input contains NaN")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.mean(xc * xc))
    sy = np.sqrt(np.mean(yc * yc))
    if sx == 0 or sy == 0:
        raise NumericError("zero-variance series has undefined correlation")
    values = kernels.lagged_cov(xc, yc, int(max_lag)) / (sx * sy)
    return CorrelationCurve(base, other, np.arange(-max_lag, max_lag + 1), values)


def autocorrelation(x, max_lag: int, name: str = "x") -> CorrelationCurve:
    return cross_correlation(x, x, max_lag, name, name)


@dataclass(frozen=True)
class CorrelationReport:
    base: str
    representation: str
    curves: tuple[CorrelationCurve, ...]   # base autocorrelation first

    def summary(self) -> list[tuple[str, str, float]]:
        """``(base, other, rho at lag 0)`` for every partner, base excluded."""
        return [(c.base, c.other, c.at(0)) for c in self.curves[1:]]

    def write(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for c in self.curves:
            p = directory / f"xcorr_{c.base}_{c.other}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["lag", "rho"])
                for k, r in zip(c.lags, c.values):
                    w.writerow([int(k), repr(float(r))])
            paths.append(p)
        p = directory / "xcorr_summary.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["base", "other", "rho_lag0"])
            for b, o, r in self.summary():
                w.writerow([b, o, repr(r)])
        paths.append(p)
        return paths


def _representation(group: AlignedGroup, ticker: str, which: str, ma_window: int):
    first = group.first_valid(ticker)
    d = group.dates[first:]
    z = group.column(ticker)[first:]
    if which == "close":
        return d, z
    # normalisation is affine, so correlating pct changes equals correlating
    # the normalised series
    return d[ma_window:], pct_change(moving_average(z, ma_window))


def correlation_report(group: AlignedGroup, base: str, max_lag: int,
                       representation: str = "normalized",
                       ma_window: int = DEFAULT_MA_WINDOW,
                       partners: Sequence[str] | None = None) -> CorrelationReport:
    """Base autocorrelation plus one cross-correlation curve per partner.

    ``representation`` is ``"normalized"`` (the preprocessed model input) or
    ``"close"`` (raw filled closes). Pairs are correlated over the dates where
    both series exist.
    """
    if representation not in ("normalized", "close"):
        raise UsageError(f"unknown representation {representation!r}")
    if base not in group.tickers:
        raise UsageError(f"base {base!r} not in group {list(group.tickers)}")
    if not group.filled:
        raise UsageError("group must be filled before correlation analysis")
    partners = [t for t in group.tickers if t != base] if partners is None else list(partners)
    bd, bx = _representation(group, base, representation, ma_window)
    curves = [autocorrelation(bx, max_lag, base)]
    for t in partners:
        od, ox = _representation(group, t, representation, ma_window)
        common, bi, oi = np.intersect1d(bd, od, assume_unique=True, return_indices=True)
        curves.append(cross_correlation(bx[bi], ox[oi], max_lag, base, t))
    return CorrelationReport(base, representation, tuple(curves))
