"""Hot row-wise kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``TT2VFIN_NUMBA`` is not set to
a false value (``0``, ``false``, ``no``, ``off``). Both implementations are
always importable as :data:`numpy_kernels` and :data:`numba_kernels` so tests
and the benchmark can compare them side by side.

All kernels take C-contiguous float64 arrays. Row kernels operate on 2-D
arrays and treat each row independently; callers reshape higher-rank tensors.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None
_FLAG = os.environ.get("TT2VFIN_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


# --------------------------------------------------------------------------
# numpy reference path

def _softmax_rows_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_backward_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def _layer_norm_rows_np(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv[:, 0]


def _layer_norm_rows_backward_np(dxhat, xhat, inv):
    n = dxhat.shape[1]
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    return (inv[:, None] / n) * (n * dxhat - s1 - xhat * s2)


def _rolling_mean_np(z, w):
    return np.lib.stride_tricks.sliding_window_view(z, w).mean(axis=1)


def _gmnn_rows_np(m):
    # scale each row by its largest entry: equal entries give a ratio product
    # of exactly 1, and long rows cannot under/overflow the running product
    mask = ~np.isnan(m)
    counts = mask.sum(axis=1)
    ref = np.where(mask, m, -np.inf).max(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(mask, m / ref[:, None], 1.0)
        out = ref * ratios.prod(axis=1) ** (1.0 / counts)
    out[ref == 0] = 0.0
    out[counts == 0] = np.nan
    return out


def _lagged_cov_np(xc, yc, max_lag):
    """Mean lagged cross-product sum over valid overlap for lags -K..K."""
    n = xc.shape[0]
    out = np.empty(2 * max_lag + 1)
    for j, k in enumerate(range(-max_lag, max_lag + 1)):
        if k >= 0:
            s = np.dot(xc[: n - k], yc[k:])
        else:
            s = np.dot(xc[-k:], yc[: n + k])
        out[j] = s / (n - abs(k))
    return out


numpy_kernels = SimpleNamespace(
    name="numpy",
    softmax_rows=_softmax_rows_np,
    softmax_rows_backward=_softmax_rows_backward_np,
    layer_norm_rows=_layer_norm_rows_np,
    layer_norm_rows_backward=_layer_norm_rows_backward_np,
    rolling_mean=_rolling_mean_np,
    gmnn_rows=_gmnn_rows_np,
    lagged_cov=_lagged_cov_np,
)


# --------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def _softmax_rows_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                e = np.exp(x[r, c] - m)
                out[r, c] = e
                s += e
            for c in range(cols):
                out[r, c] /= s
        return out

    @njit
    def _softmax_rows_backward_nb(y, dy):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for c in range(cols):
                s += dy[r, c] * y[r, c]
            for c in range(cols):
                out[r, c] = y[r, c] * (dy[r, c] - s)
        return out

    @njit
    def _layer_norm_rows_nb(x, eps):
        rows, cols = x.shape
        xhat = np.empty_like(x)
        inv = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for c in range(cols):
                mu += x[r, c]
            mu /= cols
            var = 0.0
            for c in range(cols):
                d = x[r, c] - mu
                var += d * d
            var /= cols
            iv = 1.0 / np.sqrt(var + eps)
            inv[r] = iv
            for c in range(cols):
                xhat[r, c] = (x[r, c] - mu) * iv
        return xhat, inv

    @njit
    def _layer_norm_rows_backward_nb(dxhat, xhat, inv):
        rows, cols = dxhat.shape
        out = np.empty_like(dxhat)
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for c in range(cols):
                s1 += dxhat[r, c]
                s2 += dxhat[r, c] * xhat[r, c]
            f = inv[r] / cols
            for c in range(cols):
                out[r, c] = f * (cols * dxhat[r, c] - s1 - xhat[r, c] * s2)
        return out

    @njit
    def _rolling_mean_nb(z, w):
        n = z.shape[0] - w + 1
        out = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(w):
                s += z[i + j]
            out[i] = s / w
        return out

    @njit
    def _gmnn_rows_nb(m):
        rows, cols = m.shape
        out = np.empty(rows)
        for r in range(rows):
            ref = -np.inf
            cnt = 0
            for c in range(cols):
                v = m[r, c]
                if not np.isnan(v):
                    cnt += 1
                    if v > ref:
                        ref = v
            if cnt == 0:
                out[r] = np.nan
            elif ref == 0.0:
                out[r] = 0.0
            else:
                p = 1.0
                for c in range(cols):
                    v = m[r, c]
                    if not np.isnan(v):
                        p *= v / ref
                out[r] = ref * p ** (1.0 / cnt)
        return out

    @njit
    def _lagged_cov_nb(xc, yc, max_lag):
        n = xc.shape[0]
        out = np.empty(2 * max_lag + 1)
        for j in range(2 * max_lag + 1):
            k = j - max_lag
            s = 0.0
            if k >= 0:
                for t in range(n - k):
                    s += xc[t] * yc[t + k]
            else:
                for t in range(-k, n):
                    s += xc[t] * yc[t + k]
            out[j] = s / (n - abs(k))
        return out

    numba_kernels = SimpleNamespace(
        name="numba",
        softmax_rows=_softmax_rows_nb,
        softmax_rows_backward=_softmax_rows_backward_nb,
        layer_norm_rows=_layer_norm_rows_nb,
        layer_norm_rows_backward=_layer_norm_rows_backward_nb,
        rolling_mean=_rolling_mean_nb,
        gmnn_rows=_gmnn_rows_nb,
        lagged_cov=_lagged_cov_nb,
    )
else:  # pragma: no cover
    numba_kernels = None

kernels = numba_kernels if USE_NUMBA else numpy_kernels
