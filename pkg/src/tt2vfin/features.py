"""Reversible preprocessing of close prices into model inputs.

Forward chain per ticker::

    close z --moving average--> v --next-day pct change--> y --min-max--> x

and across a group the per-ticker ``x`` columns are combined with a NaN-aware
geometric mean (GMNN). The inverse chain (clip + denormalise, reverse pct
change, reverse moving average) maps predicted ``x`` back to close prices using
the target ticker's own fitted bounds and price history.
"""
from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from ._accel import kernels
from .errors import AggregationError, NumericError, UsageError
from .ingest import AlignedGroup, chronological_split

DEFAULT_MA_WINDOW = 14


class Bounds(NamedTuple):
    lo: float
    hi: float


def moving_average(z, window: int = DEFAULT_MA_WINDOW) -> np.ndarray:
    """Trailing mean; ``out[i] = mean(z[i : i + window])``, length n - window + 1."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    if window < 1:
        raise UsageError("moving-average window must be >= 1")
    if z.ndim != 1 or z.size < window:
        raise UsageError(f"series of length {z.size} is shorter than window {window}")
    if np.isnan(z).any():
        raise NumericError("moving_average input contains NaN")
    return kernels.rolling_mean(z, window)


def pct_change(v) -> np.ndarray:
    """Next-day relative change ``(v[t+1] - v[t]) / v[t]``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        raise UsageError("pct_change needs at least two values")
    if not np.all(v > 0):
        raise NumericError("pct_change needs strictly positive values")
    return (v[1:] - v[:-1]) / v[:-1]


def fit_bounds(y) -> Bounds:
    y = np.asarray(y, dtype=np.float64)
    y = y[~np.isnan(y)]
    if y.size == 0:
        raise UsageError("cannot fit normalisation bounds on an empty range")
    lo, hi = float(y.min()), float(y.max())
    if not hi > lo:
        raise NumericError(f"degenerate normalisation bounds: min == max == {lo}")
    return Bounds(lo, hi)


def minmax_transform(y, bounds: Bounds) -> np.ndarray:
    lo, hi = bounds
    return (np.asarray(y, dtype=np.float64) - lo) / (hi - lo)


def minmax_fit_transform(y, fit_range: range | slice | None = None) -> tuple[np.ndarray, Bounds]:
    """Scale so the fit range spans [0, 1]; values outside it are not clipped."""
    y = np.asarray(y, dtype=np.float64)
    sel = y if fit_range is None else y[_as_slice(fit_range)]
    bounds = fit_bounds(sel)
    return minmax_transform(y, bounds), bounds


def _as_slice(r):
    if isinstance(r, range):
        return slice(r.start, r.stop)
    return r


def gmnn_aggregate(columns, dates=None) -> np.ndarray:
    """Per-row geometric mean over the non-NaN entries.

    A row with no valid entry raises :class:`AggregationError`; ``dates``
    (when given) is used to name the offending row.
    """
    m = np.asarray(columns, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    valid = ~np.isnan(m)
    if np.any(m[valid] < 0):
        raise NumericError("GMNN needs nonnegative values")
    empty = np.flatnonzero(~valid.any(axis=1))
    if empty.size:
        at = dates[empty[0]] if dates is not None else f"index {empty[0]}"
        raise AggregationError(f"no valid value to aggregate at {at}")
    if m.shape[1] == 1:
        return m[:, 0].copy()
    return kernels.gmnn_rows(np.ascontiguousarray(m))


@dataclass(frozen=True)
class SupervisedWindows:
    inputs: np.ndarray         # [n, W]
    targets: np.ndarray        # [n]
    target_index: np.ndarray   # [n] index of each target in the source series
    window: int

    def __len__(self):
        return self.targets.size

    def select(self, index_range: range) -> "SupervisedWindows":
        """Windows whose target index falls in ``index_range``."""
        keep = (self.target_index >= index_range.start) & (self.target_index < index_range.stop)
        return SupervisedWindows(self.inputs[keep], self.targets[keep],
                                 self.target_index[keep], self.window)


def make_windows(x, window: int) -> SupervisedWindows:
    """Row i is ``x[i : i + window]`` and its target is ``x[i + window]``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if window < 1:
        raise UsageError("window must be >= 1")
    if x.size < window + 1:
        raise UsageError(f"series of length {x.size} too short for window {window}")
    inputs = np.lib.stride_tricks.sliding_window_view(x, window)[:-1].copy()
    idx = np.arange(window, x.size)
    return SupervisedWindows(inputs, x[window:].copy(), idx, window)


def split_windows(windows: SupervisedWindows, ranges: Sequence[range]):
    return tuple(windows.select(r) for r in ranges)


# --------------------------------------------------------------------------
# inverse path

def denormalize_clip(x_hat, bounds: Bounds):
    lo, hi = bounds
    return np.clip(np.asarray(x_hat, dtype=np.float64), 0.0, 1.0) * (hi - lo) + lo


def reverse_pct_change(y_hat, v_prev):
    v_prev = np.asarray(v_prev, dtype=np.float64)
    if np.any(v_prev <= 0):
        raise NumericError("reverse_pct_change needs a positive previous average")
    return v_prev * (1.0 + np.asarray(y_hat, dtype=np.float64))


def reverse_moving_average(v_hat: float, history, window: int) -> float:
    """Close implied by average ``v_hat`` given the previous ``window - 1`` closes."""
    history = np.asarray(history, dtype=np.float64)
    if history.shape != (window - 1,):
        raise UsageError(f"need exactly {window - 1} trailing closes, got {history.size}")
    return window * float(v_hat) - float(history.sum())


@dataclass
class FeaturePipelineState:
    """Fitted transform parameters and the price history needed to invert."""

    ticker: str
    ma_window: int
    bounds: Bounds
    dates: np.ndarray = field(repr=False)     # ticker calendar from its first record
    closes: np.ndarray = field(repr=False)    # filled closes on ``dates``
    ma: np.ndarray = field(repr=False)        # moving average on ``dates``; NaN for the first W-1

    def index_of(self, dates) -> np.ndarray:
        dates = np.asarray(dates, dtype="datetime64[D]")
        idx = np.searchsorted(self.dates, dates)
        ok = (idx < self.dates.size)
        ok[ok] = self.dates[idx[ok]] == dates[ok]
        if not ok.all():
            raise UsageError(f"{self.ticker}: date {dates[~ok][0]} not in history")
        return idx


def postprocess_for_target(pred_dates, x_hat, state: FeaturePipelineState,
                           mode: str = "teacher") -> np.ndarray:
    """Recover close prices from predicted normalised values.

    ``teacher`` uses the true average and closes up to the day before each
    prediction. ``autoregressive`` feeds earlier reconstructed closes and
    averages back in as history for later predictions.
    """
    if mode not in ("teacher", "autoregressive"):
        raise UsageError(f"unknown inversion mode {mode!r}")
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=np.float64))
    idx = state.index_of(np.atleast_1d(pred_dates))
    if idx.size != x_hat.size:
        raise UsageError("pred_dates and x_hat differ in length")
    w = state.ma_window
    if idx.size and idx.min() < w:
        raise UsageError(f"{state.ticker}: prediction needs {w} prior closes")
    y_hat = denormalize_clip(x_hat, state.bounds)
    z = state.closes.copy()
    v = state.ma.copy()
    out = np.empty(idx.size)
    order = np.argsort(idx, kind="stable")
    for j in order:
        i = idx[j]
        v_hat = float(reverse_pct_change(y_hat[j], v[i - 1]))
        out[j] = reverse_moving_average(v_hat, z[i - w + 1:i], w)
        if mode == "autoregressive":
            v[i] = v_hat
            z[i] = out[j]
    return out


# --------------------------------------------------------------------------
# group pipeline

@dataclass
class GroupFeatures:
    dates: np.ndarray                       # aggregate calendar
    aggregate: np.ndarray                   # model input series
    columns: dict[str, np.ndarray]          # per-ticker x on ``dates`` (NaN where absent)
    states: dict[str, FeaturePipelineState]
    split: tuple[range, range, range]       # index ranges on ``dates``
    stages: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def windows(self, window: int) -> tuple[SupervisedWindows, SupervisedWindows, SupervisedWindows]:
        return split_windows(make_windows(self.aggregate, window), self.split)


def _ticker_stages(group: AlignedGroup, ticker: str, ma_window: int):
    first = group.first_valid(ticker)
    d = group.dates[first:]
    z = group.column(ticker)[first:].copy()
    if np.isnan(z).any():
        raise UsageError(f"{ticker}: interior gaps remain; fill the group first")
    if z.size < ma_window + 2:
        raise UsageError(f"{ticker}: only {z.size} closes, need more than {ma_window + 1}")
    v = moving_average(z, ma_window)
    y = pct_change(v)
    ma_full = np.full(z.size, np.nan)
    ma_full[ma_window - 1:] = v
    return d, z, ma_full, y


def build_group_features(group: AlignedGroup, members: Sequence[str] | None = None,
                         ma_window: int = DEFAULT_MA_WINDOW,
                         ratios: Sequence[float] = (0.8, 0.1, 0.1),
                         fit_on: str = "train") -> GroupFeatures:
    """Run the forward chain for ``members`` and aggregate them.

    The train/val/test cut dates come from the calendar of *all* tickers in
    ``group`` so single-ticker and multi-ticker inputs drawn from the same group
    are scored on the same test days. Normalisation bounds are fitted on the
    train range only (``fit_on="train"``) or on the full series (``"all"``).
    A single member's column is used as is. With two or more members, negative
    normalised values (possible outside the train range) are floored at 0
    before GMNN.
    """
    if not group.filled:
        raise UsageError("group must be filled before feature construction")
    members = list(group.tickers if members is None else members)
    if not members:
        raise UsageError("no member tickers selected")
    if fit_on not in ("train", "all"):
        raise UsageError("fit_on must be 'train' or 'all'")

    per = {t: _ticker_stages(group, t, ma_window) for t in members}
    # y for a ticker starts ma_window rows after its first record
    start = min(group.first_valid(t) + ma_window for t in group.tickers)
    full_dates = group.dates[start:]
    tr, va, te = chronological_split(full_dates.size, ratios)
    val_cut, test_cut = full_dates[va.start], full_dates[te.start]

    mstart = min(group.first_valid(t) + ma_window for t in members)
    dates = group.dates[mstart:]
    columns: dict[str, np.ndarray] = {}
    states: dict[str, FeaturePipelineState] = {}
    stages: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for t in members:
        d, z, ma_full, y = per[t]
        y_dates = d[ma_window:]
        fit_sel = y if fit_on == "all" else y[y_dates < val_cut]
        if fit_sel.size < 2:
            raise UsageError(f"{t}: too little history inside the train range")
        bounds = fit_bounds(fit_sel)
        x = minmax_transform(y, bounds)
        col = np.full(dates.size, np.nan)
        col[np.searchsorted(dates, y_dates)] = x
        columns[t] = col
        states[t] = FeaturePipelineState(t, ma_window, bounds, d, z, ma_full)
        stages[f"fill_{t}"] = (d, z)
        stages[f"ma_{t}"] = (d[ma_window - 1:], ma_full[ma_window - 1:])
        stages[f"pct_{t}"] = (y_dates, y)
        stages[f"norm_{t}"] = (y_dates, x)

    if len(members) == 1:
        aggregate = columns[members[0]].copy()
    else:
        mat = np.column_stack([columns[t] for t in members])
        mat = np.where(np.isnan(mat), np.nan, np.maximum(mat, 0.0))
        aggregate = gmnn_aggregate(mat, dates)
    stages["gmnn_" + "_".join(members)] = (dates, aggregate)

    a = int(np.searchsorted(dates, val_cut))
    b = int(np.searchsorted(dates, test_cut))
    split = (range(0, a), range(a, b), range(b, dates.size))
    if min(len(r) for r in split) == 0:
        raise UsageError("a split range is empty for the selected members")
    return GroupFeatures(dates, aggregate, columns, states, split, stages)


# --------------------------------------------------------------------------
# persistence

def write_series_csv(path: str | Path, dates, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "value"])
        for d, v in zip(np.asarray(dates, dtype="datetime64[D]"), values):
            w.writerow([str(d), repr(float(v))])


def read_series_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([r["date"] for r in rows], dtype="datetime64[D]"),
            np.array([float(r["value"]) for r in rows]))


def write_stages(features: GroupFeatures, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(features.stages):
        p = directory / f"{name}.csv"
        write_series_csv(p, *features.stages[name])
        paths.append(p)
    return paths


def save_states(states: Mapping[str, FeaturePipelineState], path: str | Path) -> None:
    cp = configparser.ConfigParser()
    for t in sorted(states):
        s = states[t]
        cp[t] = {"ticker": t, "ma_window": str(s.ma_window),
                 "min": repr(s.bounds.lo), "max": repr(s.bounds.hi)}
    with open(path, "w") as fh:
        cp.write(fh)


def load_states(path: str | Path) -> dict[str, tuple[int, Bounds]]:
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    return {cp[s]["ticker"]: (int(cp[s]["ma_window"]),
                              Bounds(float(cp[s]["min"]), float(cp[s]["max"])))
            for s in cp.sections()}
