"""Daily price ingestion in the Yahoo Finance CSV layout, calendar alignment
and chronological splitting."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from datetime import date
from fractions import Fraction
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .errors import IngestionError, UsageError

CSV_HEADER = ("Date", "Open", "High", "Low", "Close", "Adj Close", "Volume")
_NUMERIC = CSV_HEADER[1:]


@dataclass(frozen=True)
class PriceRecord:
    date: date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float


@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    records: tuple[PriceRecord, ...]

    def __len__(self):
        return len(self.records)

    @property
    def dates(self) -> np.ndarray:
        return np.array([r.date for r in self.records], dtype="datetime64[D]")

    def column(self, name: str = "close") -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)


@dataclass(frozen=True)
class AlignedGroup:
    """Close-price columns on the union calendar of all members."""

    dates: np.ndarray          # datetime64[D], strictly increasing
    tickers: tuple[str, ...]
    closes: np.ndarray         # [n_dates, n_tickers], NaN where absent
    filled: bool = False

    def column(self, ticker: str) -> np.ndarray:
        try:
            return self.closes[:, self.tickers.index(ticker)]
        except ValueError:
            raise UsageError(f"ticker {ticker!r} not in group {list(self.tickers)}") from None

    def first_valid(self, ticker: str) -> int:
        col = self.column(ticker)
        valid = np.flatnonzero(~np.isnan(col))
        if valid.size == 0:
            raise UsageError(f"ticker {ticker!r} has no observations")
        return int(valid[0])


def _parse_float(text: str, row: int, name: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IngestionError(f"unparsable number {text!r}", row=row, field=name) from None


def parse_csv(stream: TextIO | str, ticker: str = "") -> PriceSeries:
    """Parse one ticker's history; ``stream`` is a file object or CSV text.

    Rows are sorted by date. Empty numeric fields become NaN; a NaN close marks
    a missing observation that alignment treats as a gap.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestionError("empty file", row=1) from None
    header = tuple(h.strip() for h in header)
    missing = [c for c in CSV_HEADER if c not in header]
    if missing:
        raise IngestionError(f"missing column {missing[0]!r}", row=1, field=missing[0])
    if header != CSV_HEADER:
        raise IngestionError(f"header must be exactly {','.join(CSV_HEADER)}", row=1)

    records = []
    seen: dict[date, int] = {}
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise IngestionError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", row=rowno)
        try:
            day = date.fromisoformat(row[0].strip())
        except ValueError:
            raise IngestionError(f"bad date {row[0]!r}", row=rowno, field="Date") from None
        if day in seen:
            raise IngestionError(f"duplicate date {day.isoformat()} (first at row {seen[day]})",
                                 row=rowno, field="Date")
        seen[day] = rowno
        vals = [_parse_float(v, rowno, n) for v, n in zip(row[1:], _NUMERIC)]
        close = vals[3]
        if not math.isnan(close) and close <= 0:
            raise IngestionError(f"close must be positive, got {close}", row=rowno, field="Close")
        if not math.isnan(vals[5]) and vals[5] < 0:
            raise IngestionError("negative volume", row=rowno, field="Volume")
        records.append(PriceRecord(day, *vals))
    if not records:
        raise IngestionError("no data rows", row=2)
    records.sort(key=lambda r: r.date)
    return PriceSeries(ticker, tuple(records))


def load_csv(path: str | Path, ticker: str | None = None) -> PriceSeries:
    path = Path(path)
    with open(path, newline="") as fh:
        return parse_csv(fh, ticker or path.stem)


def write_csv(series: PriceSeries, path: str | Path) -> None:
    def fmt(v):
        return "" if math.isnan(v) else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in series.records:
            w.writerow([r.date.isoformat(), fmt(r.open), fmt(r.high), fmt(r.low),
                        fmt(r.close), fmt(r.adj_close), fmt(r.volume)])


def align_group(series: Sequence[PriceSeries], column: str = "close") -> AlignedGroup:
    """Place each member's ``column`` on the sorted union of all dates."""
    if not series:
        raise UsageError("align_group needs at least one series")
    tickers = tuple(s.ticker for s in series)
    if len(set(tickers)) != len(tickers):
        raise UsageError(f"duplicate tickers in group: {list(tickers)}")
    calendar = np.unique(np.concatenate([s.dates for s in series]))
    closes = np.full((calendar.size, len(series)), np.nan)
    for j, s in enumerate(series):
        idx = np.searchsorted(calendar, s.dates)
        closes[idx, j] = s.column(column)
    return AlignedGroup(calendar, tickers, closes, filled=False)


def forward_fill(col: np.ndarray) -> np.ndarray:
    """Carry the last observation forward; leading NaNs stay NaN."""
    col = np.asarray(col, dtype=np.float64)
    valid = ~np.isnan(col)
    idx = np.where(valid, np.arange(col.size), 0)
    np.maximum.accumulate(idx, out=idx)
    out = col[idx]
    if valid.any():
        out[: np.argmax(valid)] = np.nan
    return out


def fill_missing(group: AlignedGroup) -> AlignedGroup:
    closes = np.column_stack([forward_fill(group.closes[:, j]) for j in range(len(group.tickers))])
    return replace(group, closes=closes.reshape(group.closes.shape), filled=True)


def chronological_split(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[range, range, range]:
    """Contiguous train/val/test ranges; cuts at floor(r1*n) and floor((r1+r2)*n)."""
    if n < 10:
        raise UsageError(f"need at least 10 points to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise UsageError("ratios must be three nonnegative fractions")
    fr = [Fraction(str(r)) for r in ratios]
    if sum(fr) != 1:
        raise UsageError("ratios must sum to 1")
    a = math.floor(fr[0] * n)
    b = math.floor((fr[0] + fr[1]) * n)
    return range(0, a), range(a, b), range(b, n)
