import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tt2vfin import numerics as nx
from tt2vfin.errors import DimensionError, NumericError, UsageError
from tt2vfin.numerics import Tape, Tensor


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_scalar():
    b = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(nx.matmul(np.eye(3), b).data, b)
    assert nx.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = nx.make_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert np.max(np.abs(nx.matmul(a, b).data - triple_loop_matmul(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_inputs_no_overflow():
    y = nx.softmax([1000.0, 0.0]).data
    assert abs(y[0] - 1.0) < 1e-12 and abs(y[1]) < 1e-12


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    den = sum(mpmath.e ** x for x in xs)
    expected = [float(mpmath.e ** x / den) for x in xs]
    np.testing.assert_allclose(nx.softmax(np.array(xs, float)).data, expected, rtol=1e-15, atol=0)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        nx.softmax([0.0, np.nan])


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-1e3, 1e3)))
def test_softmax_slices_sum_to_one(x):
    y = nx.softmax(x, axis=-1).data
    assert np.all(y >= 0)
    assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12


def test_softmax_other_axis():
    x = nx.make_rng(0).standard_normal((3, 4))
    np.testing.assert_allclose(nx.softmax(x, axis=0).data, nx.softmax(x.T, axis=-1).data.T)


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_slice_collapses_to_bias():
    out = nx.layer_norm([5.0, 5.0, 5.0], np.ones(3), np.zeros(3), 1e-5).data
    np.testing.assert_array_equal(out, [0.0, 0.0, 0.0])


def test_layer_norm_standardises():
    out = nx.layer_norm([1.0, 2.0, 3.0], np.ones(3), np.zeros(3), 1e-12).data
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-6


def test_layer_norm_matches_direct_formula():
    rng = nx.make_rng(5)
    x = rng.standard_normal((4, 7)) * 3 + 1
    g, b = rng.standard_normal(7), rng.standard_normal(7)
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    expected = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(nx.layer_norm(x, g, b, 1e-5).data, expected, rtol=1e-12, atol=1e-12)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(UsageError):
        nx.layer_norm([1.0, 2.0], np.ones(2), np.zeros(2), 0.0)


# -- tape / backward ---------------------------------------------------------

def test_backward_linear():
    w = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_(w)
    np.testing.assert_array_equal(tape.backward(loss)[w], np.ones(3))


def test_backward_square():
    w = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_(nx.mul(w, w))
    np.testing.assert_array_equal(tape.backward(loss)[w], [2.0, -4.0])


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = nx.mul(w, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_unused_learnable_gets_zero_gradient():
    w = Tensor([1.0], requires_grad=True)
    u = Tensor([5.0, 6.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_(nx.mul(w, 3.0))
        nx.sum_(u)  # recorded but not part of the loss
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[u], [0.0, 0.0])
    np.testing.assert_array_equal(g[w], [3.0])


def test_no_recording_without_tape():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        pass
    nx.mul(w, w)
    assert len(tape) == 0


def test_reused_value_accumulates():
    w = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = nx.add(w, w)
        loss = nx.sum_(nx.mul(y, w))  # 2 w^2
    assert tape.backward(loss)[w][0] == pytest.approx(12.0)


def test_determinism_bitwise():
    def run():
        rng = nx.make_rng(11)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        x = rng.standard_normal((5, 4))
        with Tape() as tape:
            h = nx.dropout(nx.matmul(x, w), 0.3, rng, True)
            loss = nx.sum_(nx.softmax(h))
        return loss.data.copy(), tape.backward(loss)[w]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


# -- gradient_check harness --------------------------------------------------

def test_gradient_check_identity():
    assert nx.gradient_check(lambda t: t, np.array([0.3, -1.2, 2.0])) < 1e-8


def test_gradient_check_sin():
    pts = nx.make_rng(2).uniform(-3, 3, 10)
    assert nx.gradient_check(nx.sin, pts) < 1e-6


def test_gradient_check_rejects_bad_step():
    with pytest.raises(UsageError):
        nx.gradient_check(nx.sin, [0.0], h=1.0)


def test_gradient_check_non_finite():
    with pytest.raises(NumericError):
        nx.gradient_check(lambda t: nx.div(1.0, t), [0.0, 1.0])


# -- per-primitive finite differences (100 random points each) ---------------

def _points(shape, n=100, seed=0, low=-2.0, high=2.0):
    rng = nx.make_rng(seed, 3)
    return [rng.uniform(low, high, shape) for _ in range(n)]


CONST = nx.make_rng(99).standard_normal((3, 4))

PRIMITIVES = {
    "add": ((3, 4), lambda t: nx.add(t, CONST[0])),
    "sub": ((3, 4), lambda t: nx.sub(CONST, t)),
    "mul": ((3, 4), lambda t: nx.mul(t, nx.sin(t))),
    "div": ((3, 4), lambda t: nx.div(t, nx.add(nx.mul(t, t), 1.0))),
    "scale": ((3, 4), lambda t: nx.scale(t, -2.5)),
    "sin": ((3, 4), nx.sin),
    "square": ((3, 4), nx.square),
    "transpose": ((2, 3, 4), lambda t: nx.transpose(t, (2, 0, 1))),
    "reshape": ((3, 4), lambda t: nx.reshape(t, (2, 6))),
    "concatenate": ((3, 4), lambda t: nx.concatenate([t, nx.sin(t)], axis=0)),
    "mean": ((3, 4), lambda t: nx.mean(t, axis=1)),
    "sum": ((3, 4), lambda t: nx.sum_(t, axis=0, keepdims=True)),
    "matmul": ((3, 4), lambda t: nx.matmul(t, CONST.T)),
    "matmul_batched": ((2, 3, 4), lambda t: nx.matmul(t, nx.transpose(t, (0, 2, 1)))),
    "softmax": ((3, 4), lambda t: nx.softmax(t, axis=-1)),
    "softmax_axis0": ((3, 4), lambda t: nx.softmax(t, axis=0)),
    "layer_norm": ((3, 4), lambda t: nx.layer_norm(t, CONST[1], CONST[2], 1e-5)),
    "dense": ((3, 4), lambda t: nx.dense(t, CONST.T, CONST[0, :3])),
    "getitem": ((3, 4), lambda t: t[:, 1:3]),
    "broadcast_to": ((1, 4), lambda t: nx.broadcast_to(t, (3, 3, 4))),
    "dropout_fixed_mask": ((3, 4), lambda t: nx.dropout(t, 0.4, nx.make_rng(4), True)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    shape, f = PRIMITIVES[name]
    worst = max(nx.gradient_check(f, p, h=1e-6, seed=i) for i, p in enumerate(_points(shape)))
    assert worst < 1e-4, name


def test_layer_norm_gain_bias_gradients():
    x = nx.make_rng(1).standard_normal((5, 6))
    for i, p in enumerate(_points((6,), n=100, seed=1)):
        assert nx.gradient_check(lambda g: nx.layer_norm(x, g, p, 1e-5), p, seed=i) < 1e-4
        assert nx.gradient_check(lambda b: nx.layer_norm(x, p, b, 1e-5), p, seed=i) < 1e-4


def test_dense_weight_gradient():
    x = nx.make_rng(1).standard_normal((2, 5, 4))
    for i, p in enumerate(_points((4, 3), n=100, seed=2)):
        assert nx.gradient_check(lambda w: nx.dense(x, w, np.ones(3)), p, seed=i) < 1e-4


def test_relu_and_max_away_from_kinks():
    # distinct magnitudes keep central differences off the kinks
    pts = [np.sign(p) * (0.1 + np.abs(p)) for p in _points((3, 4), seed=7)]
    for i, p in enumerate(pts):
        assert nx.gradient_check(nx.relu, p, seed=i) < 1e-4
        assert nx.gradient_check(lambda t: nx.max_(t, axis=1), p, seed=i) < 1e-4


# -- broadcasting vs explicit tiling -----------------------------------------

def _shapes_up_to_rank3():
    dims = [1, 2, 3]
    for rank in (1, 2, 3):
        yield from itertools.product(dims, repeat=rank)


def _broadcast_pairs():
    for sa in _shapes_up_to_rank3():
        for sb in _shapes_up_to_rank3():
            try:
                np.broadcast_shapes(sa, sb)
            except ValueError:
                continue
            yield sa, sb


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcasting_agrees_with_tiling(op):
    rng = nx.make_rng(8)
    f = getattr(nx, op)
    for sa, sb in _broadcast_pairs():
        a = rng.uniform(1, 2, sa)
        b = rng.uniform(1, 2, sb)
        out = np.broadcast_shapes(sa, sb)
        ta = np.tile(a.reshape((1,) * (len(out) - a.ndim) + sa),
                     [o // s for o, s in zip(out, (1,) * (len(out) - a.ndim) + sa)])
        tb = np.tile(b.reshape((1,) * (len(out) - b.ndim) + sb),
                     [o // s for o, s in zip(out, (1,) * (len(out) - b.ndim) + sb)])
        np.testing.assert_array_equal(f(a, b).data, f(ta, tb).data)
        # gradient of the broadcast operand equals the tiled gradient summed back
        A = Tensor(a, requires_grad=True)
        TA = Tensor(ta, requires_grad=True)
        w = rng.standard_normal(out)
        with Tape() as tape:
            l1 = nx.sum_(nx.mul(f(A, b), w))
            l2 = nx.sum_(nx.mul(f(TA, tb), w))
        g1 = tape.backward(l1)[A]
        g2 = tape.backward(l2)[TA]
        np.testing.assert_allclose(g1, _fold(g2, sa), rtol=1e-12, atol=1e-12)


def _fold(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def test_broadcast_incompatible_shapes():
    with pytest.raises(DimensionError):
        nx.add(np.ones((2, 3)), np.ones((3, 2)))


# -- dropout -----------------------------------------------------------------

def test_dropout_inverted_scaling_and_eval_passthrough():
    x = Tensor(np.ones((200, 50)))
    y = nx.dropout(x, 0.25, nx.make_rng(0), training=True).data
    kept = y[y != 0]
    np.testing.assert_allclose(kept, 1 / 0.75)
    assert abs((y == 0).mean() - 0.25) < 0.02
    assert nx.dropout(x, 0.25, None, training=False) is x


def test_dropout_same_seed_same_mask():
    x = np.ones((10, 10))
    a = nx.dropout(x, 0.5, nx.make_rng(3), True).data
    b = nx.dropout(x, 0.5, nx.make_rng(3), True).data
    np.testing.assert_array_equal(a, b)


def test_rng_streams_are_independent():
    a = nx.make_rng(1, 0).random(5)
    b = nx.make_rng(1, 1).random(5)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, nx.make_rng(1, 0).random(5))
