"""Dense float64 arrays with tape-based reverse-mode differentiation.

Usage::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)      # {w: array([2., 2., 2.])}

Operations executed while no tape is active (or whose inputs are all
untracked) are plain numpy computations with no recording overhead.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ._accel import kernels
from .errors import DimensionError, NumericError, UsageError

_TAPES: list["Tape"] = []


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, stream)``.

    Distinct streams of one seed are independent, so initialisation, batch
    shuffling and dropout never share random draws.
    """
    if seed < 0 or stream < 0:
        raise UsageError("seed and stream must be nonnegative")
    return np.random.Generator(np.random.Philox(key=(int(stream) << 64) | int(seed)))


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of the
    computation graph; :meth:`backward` replays them in reverse.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and (t.requires_grad or id(t) in self._tracked)

    def record(self, out: Tensor, parents: tuple, backward: Callable):
        self._nodes.append((out, parents, backward))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` for every learnable leaf on the tape."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise UsageError("backward() needs a scalar loss tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self._nodes):
            for p in parents:
                if isinstance(p, Tensor) and p.requires_grad:
                    leaves.setdefault(id(p), p)
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not self.is_tracked(p):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if loss.requires_grad:
            leaves.setdefault(id(loss), loss)
        result = {}
        for key, t in leaves.items():
            g = grads.get(key)
            result[t] = np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape)
        return result

    def gradient(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Named gradients for ``params``; unused parameters get zeros."""
        g = self.backward(loss)
        return {name: g.get(t, np.zeros_like(t.data)) for name, t in params.items()}


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


# --------------------------------------------------------------------------
# helpers

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents, fn) -> Tensor:
    out = Tensor(out_data)
    if _TAPES:
        tape = _TAPES[-1]
        if any(tape.is_tracked(p) for p in parents):
            tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("division by zero")
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# --------------------------------------------------------------------------
# shape

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), back)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _record(out, (x,), lambda g: (g.reshape(old),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def back(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(xd[index], (x,), back)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _record(out, (x,), lambda g: (_unbroadcast(g, old),))


def concatenate(xs: Iterable, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise UsageError("concatenate needs at least one array")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


# --------------------------------------------------------------------------
# reductions

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def max_(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max reduction; ties route the gradient to the first maximal entry."""
    x = as_tensor(x)
    xd = x.data
    idx = np.expand_dims(np.argmax(xd, axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _record(out, (x,), back)


# --------------------------------------------------------------------------
# fused layers

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    moved = np.ascontiguousarray(np.moveaxis(x.data, axis, -1))
    mshape = moved.shape
    y = kernels.softmax_rows(moved.reshape(-1, mshape[-1])).reshape(mshape)
    out = np.moveaxis(y, -1, axis)

    def back(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(-1, mshape[-1])
        gx = kernels.softmax_rows_backward(y.reshape(-1, mshape[-1]), gm)
        return (np.moveaxis(gx.reshape(mshape), -1, axis),)

    return _record(out, (x,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    shape = x.shape
    d = shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},)")
    x2 = np.ascontiguousarray(x.data).reshape(-1, d)
    xhat, inv = kernels.layer_norm_rows(x2, float(eps))
    gd = gain.data
    out = (xhat * gd + bias.data).reshape(shape)

    def back(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        dgain = (g2 * xhat).sum(axis=0)
        dbias = g2.sum(axis=0)
        dx = kernels.layer_norm_rows_backward(np.ascontiguousarray(g2 * gd), xhat, inv)
        return dx.reshape(shape), dgain, dbias

    return _record(out, (x, gain, bias), back)


def dense(x, weight, bias) -> Tensor:
    """Affine layer ``x @ weight + bias`` over the last axis."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, wd.shape[0])
    out = (x2 @ wd + bias.data).reshape(xd.shape[:-1] + (wd.shape[1],))

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return _record(out, (x, weight, bias), back)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-p) at train time."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise UsageError("dropout probability must lie in [0, 1)")
    if rng is None:
        raise UsageError("dropout in training mode needs a generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# finite-difference checking

def numeric_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-6,
                     coords: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f``; only ``coords`` when given (others 0)."""
    point = np.array(point, dtype=np.float64)
    flat = point.reshape(-1)
    grad = np.zeros_like(flat)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(point)
        flat[i] = orig - h
        fm = f(point)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(point.shape)


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def gradient_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6,
                   seed: int = 0) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a tensor to a tensor of any shape; non-scalar outputs are
    contracted with a fixed random weighting so every output entry is tested.
    """
    if not 1e-7 <= h <= 1e-3:
        raise UsageError("step h should lie in [1e-7, 1e-3]")
    point = np.array(point, dtype=np.float64)
    weights = None

    def scalar(t: Tensor) -> Tensor:
        nonlocal weights
        out = f(t)
        if out.size == 1:
            return sum_(out)
        if weights is None:
            weights = make_rng(seed).standard_normal(out.shape)
        return sum_(mul(out, weights))

    x = Tensor(point.copy(), requires_grad=True)
    with Tape() as tape:
        loss = scalar(x)
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite function value at check point")
    analytic = tape.backward(loss)[x]
    numeric = numeric_gradient(lambda p: float(scalar(Tensor(p)).data), point, h)
    return relative_error(analytic, numeric)


def check_param_gradients(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                          params: Mapping[str, Tensor], n_coords: int = 100,
                          h: float = 1e-6, seed: int = 0) -> float:
    """Spot-check tape gradients of ``loss_fn(params)`` at random coordinates.

    Returns the max relative error over ``n_coords`` (name, index) samples
    drawn uniformly across all parameter entries.
    """
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    with Tape() as tape:
        loss = loss_fn(params)
    grads = tape.gradient(loss, params)
    rng = make_rng(seed)
    picks = rng.choice(int(offsets[-1]), size=min(n_coords, int(offsets[-1])), replace=False)
    worst = 0.0
    for flat_idx in np.sort(picks):
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        t = params[names[k]]
        local = int(flat_idx - offsets[k])
        view = t.data.reshape(-1)
        orig = view[local]
        view[local] = orig + h
        fp = float(loss_fn(params).data)
        view[local] = orig - h
        fm = float(loss_fn(params).data)
        view[local] = orig
        num = (fp - fm) / (2 * h)
        ana = grads[names[k]].reshape(-1)[local]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    return worst
