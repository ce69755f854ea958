"""Synthetic price histories for tests, benchmarks and demos."""
from __future__ import annotations

import numpy as np

from .ingest import PriceRecord, PriceSeries
from .numerics import make_rng


def business_days(n: int, start: str = "2000-01-03") -> np.ndarray:
    return np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")


def series_from_closes(ticker: str, closes, dates=None) -> PriceSeries:
    closes = np.asarray(closes, dtype=np.float64)
    if dates is None:
        dates = business_days(closes.size)
    recs = tuple(
        PriceRecord(d.item(), c, c, c, c, c, 1000.0)
        for d, c in zip(np.asarray(dates, dtype="datetime64[D]"), closes)
    )
    return PriceSeries(ticker, recs)


def sine_closes(n: int = 2000, period: float = 50.0, level: float = 10.0,
                amplitude: float = 1.0) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    return level + amplitude * np.sin(2 * np.pi * t / period)


def sine_series(n: int = 2000, period: float = 50.0, ticker: str = "SINE") -> PriceSeries:
    return series_from_closes(ticker, sine_closes(n, period))


def latent_pair(n: int = 1000, seed: int = 0, noise: float = 0.5, level: float = 20.0,
                tickers: tuple[str, str] = ("AAA", "BBB")) -> tuple[PriceSeries, PriceSeries]:
    """Two price series sharing a smooth latent signal plus independent noise.

    The latent signal mixes two sinusoids (periods 50 and 23); each ticker adds
    its own Gaussian noise of standard deviation ``noise``.
    """
    rng = make_rng(seed, 7)
    t = np.arange(n, dtype=np.float64)
    latent = level + 1.5 * np.sin(2 * np.pi * t / 50.0) + 0.8 * np.sin(2 * np.pi * t / 23.0 + 1.0)
    a = latent + noise * rng.standard_normal(n)
    b = latent + noise * rng.standard_normal(n)
    return series_from_closes(tickers[0], a), series_from_closes(tickers[1], b)
