import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from matey.diffmath import (NonFiniteError, Parameter, ShapeError, Tensor, grad_check, no_grad, ops,
                            rel_error, trunc_normal)

TOL = 1e-4


def _param(rng, shape, name="x", scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, name)


def _projected(fn, out_shape, rng):
    """Scalar random projection of ``fn()`` for gradient checking."""
    R = Tensor(rng.standard_normal(out_shape))
    return lambda: ops.sum(ops.mul(fn(), R))


def _check(fn, params, tol=TOL):
    rep = grad_check(fn, params, epsilon=1e-5)
    assert rep.passed(tol), rep.to_dict()
    return rep


# ------------------------------------------------------------------ grad_check itself

def test_gradcheck_polynomial():
    x = Parameter(np.array([1.0, 2.0, 3.0]), "x")
    rep = grad_check(lambda: ops.sum(ops.mul(x, x)), [x])
    assert rep.worst < 1e-9
    out = ops.sum(ops.mul(x, x))
    out.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_gradcheck_detects_wrong_gradient():
    from matey.diffmath.tensor import make_result
    x = Parameter(np.array([0.3, -1.2, 2.0]), "x")

    def bad_square(a):
        return make_result(a.data ** 2, (a,), lambda g: (g * a.data,))   # missing factor 2

    rep = grad_check(lambda: ops.sum(bad_square(x)), [x])
    assert not rep.passed(TOL)
    assert rep.worst > 0.1


def test_gradcheck_nonfinite_names_perturbation():
    x = Parameter(np.array([1.0, 2.0]), "x")
    c = Tensor(np.array([1.0 - 1e-5, 0.0]))   # x[0] - eps hits the pole exactly

    def f():
        return ops.sum(ops.div(Tensor(np.ones(2)), ops.sub(x, c)))

    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError, match=r"x\[0\]"):
        grad_check(f, [x], epsilon=1e-5)


def test_gradcheck_subsample_minimum():
    x = Parameter(np.ones(100), "x")
    with pytest.raises(ValueError):
        grad_check(lambda: ops.sum(x), [x], max_coords=8)
    rep = grad_check(lambda: ops.sum(ops.mul(x, x)), [x], max_coords=32)
    assert rep.coords_checked["x"] == 32


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1.0, 1.0 + 1e-8) == pytest.approx(1e-8, rel=1e-3)


# ------------------------------------------------------------------ primitive semantics

def test_softmax_single_element_is_one():
    y = ops.softmax(Tensor(np.array([[3.7]])), axis=-1)
    assert y.data[0, 0] == 1.0


def test_softmax_masked_rows():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
    mask = np.array([[True, False, True], [False, False, False]])
    y = ops.softmax(x, axis=-1, mask=mask).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())
    np.testing.assert_array_equal(y[1], 0.0)


def test_softmax_additive_mask_equals_bool():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5))
    keep = rng.random((3, 5)) > 0.3
    keep[:, 0] = True
    add = np.where(keep, 0.0, -np.inf)
    np.testing.assert_allclose(ops.softmax(Tensor(x), mask=keep).data, ops.softmax(Tensor(x), mask=add).data)


def test_matmul_identity(rng):
    A = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(4)), Tensor(A)).data, A)


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))
    with pytest.raises(ShapeError, match="conv2d_patch"):
        ops.conv2d_patch(Tensor(np.ones((5, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))
    with pytest.raises(ShapeError, match="linear"):
        ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_conv_then_transpose_blockwise(rng):
    x = rng.standard_normal((4, 4, 1))
    w = np.full((2, 2, 1, 1), 0.25)             # patch mean
    wt = np.ones((1, 2, 2, 1))                   # broadcast back over the patch
    y = ops.conv_transpose2d_patch(ops.conv2d_patch(Tensor(x), Tensor(w)), Tensor(wt)).data
    want = oracles.conv_transpose2d_patch(oracles.conv2d_patch(x, w), wt)
    np.testing.assert_allclose(y, want, atol=1e-12)
    for i in range(2):
        for j in range(2):
            blk = y[2 * i:2 * i + 2, 2 * j:2 * j + 2, 0]
            assert np.allclose(blk, blk[0, 0])
            assert blk[0, 0] == pytest.approx(x[2 * i:2 * i + 2, 2 * j:2 * j + 2, 0].mean())


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 3), st.integers(0, 10_000))
def test_conv_oracles(nx, ny, px, py, cin, cout, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((nx * px, ny * py, cin))
    w = rng.standard_normal((px, py, cin, cout))
    b = rng.standard_normal(cout)
    np.testing.assert_allclose(ops.conv2d_patch(Tensor(x), Tensor(w), Tensor(b)).data,
                               oracles.conv2d_patch(x, w, b), atol=1e-10)
    z = rng.standard_normal((nx, ny, cin))
    wt = rng.standard_normal((cin, px, py, cout))
    np.testing.assert_allclose(ops.conv_transpose2d_patch(Tensor(z), Tensor(wt), Tensor(b)).data,
                               oracles.conv_transpose2d_patch(z, wt, b), atol=1e-10)


def test_instance_norm_stats(rng):
    x = rng.standard_normal((2, 7, 3)) * 4 + 2
    y = ops.instance_norm(Tensor(x), axis=1).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0 / (1.0 + 1e-5 / x.var(axis=1)), rtol=1e-10)


def test_instance_norm_mask_ignores_padding(rng):
    x = rng.standard_normal((5, 3))
    mask = np.array([True, True, True, False, False])
    y = ops.instance_norm(Tensor(x), axis=0, mask=mask).data
    ref = ops.instance_norm(Tensor(x[:3]), axis=0).data
    np.testing.assert_allclose(y[:3], ref, atol=1e-12)
    np.testing.assert_array_equal(y[3:], 0.0)


def test_gelu_exact_erf():
    x = np.linspace(-4, 4, 17)
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, oracles.gelu(x), atol=1e-14)


def test_gather_scatter_roundtrip(rng):
    base = rng.standard_normal((5, 3))
    idx = np.array([4, 0, 4])
    g = ops.gather(Tensor(base), idx, axis=0).data
    np.testing.assert_array_equal(g, base[idx])
    s = ops.scatter_add(Tensor(np.zeros((5, 3))), idx, Tensor(np.ones((3, 3))), axis=0).data
    np.testing.assert_array_equal(s[:, 0], [1, 0, 0, 0, 2])


def test_determinism(rng):
    x = rng.standard_normal((3, 4, 8))
    w = rng.standard_normal((8, 8))
    a = ops.softmax(ops.matmul(Tensor(x), Tensor(w)), axis=-1).data
    b = ops.softmax(ops.matmul(Tensor(x), Tensor(w)), axis=-1).data
    assert np.array_equal(a, b)


def test_no_grad_builds_no_graph(rng):
    p = _param(rng, (3,))
    with no_grad():
        y = ops.mul(p, p)
    assert not y.requires_grad


def test_trunc_normal_bounds(rng):
    w = trunc_normal(rng, (10_000,), std=0.02)
    assert np.abs(w).max() <= 0.04
    assert abs(w.std() - 0.02) < 0.004


def test_backward_accumulates_through_shared_nodes(rng):
    p = _param(rng, (4,))
    y = ops.mul(p, p)
    out = ops.sum(ops.add(y, y))
    out.backward()
    np.testing.assert_allclose(p.grad, 4 * p.data)


# ------------------------------------------------------------------ gradient checks of every primitive

SHAPES = [(3,), (2, 3), (4, 1), (2, 3, 2), (1, 5)]


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "gelu", "scale", "neg"])
def test_grad_elementwise(op, shape):
    rng = np.random.default_rng(zlib.crc32(f"{op}{shape}".encode()))
    a = _param(rng, shape, "a")
    b = _param(rng, shape[-1:], "b")   # exercises broadcasting
    if op == "div":
        b.data = np.abs(b.data) + 0.5
    fns = {
        "add": lambda: ops.add(a, b), "sub": lambda: ops.sub(a, b), "mul": lambda: ops.mul(a, b),
        "div": lambda: ops.div(a, b), "gelu": lambda: ops.gelu(a), "scale": lambda: ops.scale(a, 1.7),
        "neg": lambda: ops.neg(a),
    }
    params = [a] if op in ("gelu", "scale", "neg") else [a, b]
    _check(_projected(fns[op], shape, rng), params)


@pytest.mark.parametrize("shape,axis", [((4,), 0), ((2, 3), 1), ((2, 3), 0), ((2, 3, 4), (0, 2)), ((3, 2, 2), None)])
@pytest.mark.parametrize("op", ["sum", "mean", "var"])
def test_grad_reductions(op, shape, axis):
    rng = np.random.default_rng(7)
    a = _param(rng, shape, "a")
    fn = getattr(ops, op)
    out_shape = np.asarray(getattr(np, op)(a.data, axis=axis)).shape
    _check(_projected(lambda: fn(a, axis=axis), out_shape, rng), [a])


@pytest.mark.parametrize("shape", [(2, 3, 4), (4, 6), (1, 2, 3, 2), (3, 1, 2), (6,)])
def test_grad_shape_ops(shape):
    rng = np.random.default_rng(3)
    a = _param(rng, shape, "a")
    flat = int(np.prod(shape))
    _check(_projected(lambda: ops.reshape(a, (flat,)), (flat,), rng), [a])
    axes = tuple(reversed(range(len(shape))))
    _check(_projected(lambda: ops.transpose(a, axes), tuple(shape[i] for i in axes), rng), [a])
    if len(shape) > 1:
        sw = list(shape)
        sw[0], sw[-1] = sw[-1], sw[0]
        _check(_projected(lambda: ops.swapaxes(a, 0, -1), tuple(sw), rng), [a])
    b = _param(rng, shape, "b")
    cat = (2 * shape[0],) + tuple(shape[1:])
    _check(_projected(lambda: ops.concat([a, b], axis=0), cat, rng), [a, b])


@pytest.mark.parametrize("seed", range(5))
def test_grad_gather_scatter(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(2, 6), rng.integers(1, 4)
    a = _param(rng, (n, c), "a")
    idx = rng.integers(0, n, size=(rng.integers(1, 5), 2))
    _check(_projected(lambda: ops.gather(a, idx, axis=0), idx.shape + (c,), rng), [a])
    src = _param(rng, (idx.shape[0], c), "src")
    flat_idx = idx[:, 0]
    _check(_projected(lambda: ops.scatter_add(a, flat_idx, src, axis=0), (n, c), rng), [a, src])


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 2)),
                                   ((1, 2, 3), (3, 3)), ((2, 1, 3, 2), (1, 2, 2, 3))])
def test_grad_matmul(sa, sb):
    rng = np.random.default_rng(11)
    a, b = _param(rng, sa, "a"), _param(rng, sb, "b")
    out_shape = np.matmul(a.data, b.data).shape
    _check(_projected(lambda: ops.matmul(a, b), out_shape, rng), [a, b])


@pytest.mark.parametrize("lead", [(), (2,), (3, 2), (1,), (2, 2)])
def test_grad_linear(lead):
    rng = np.random.default_rng(5)
    x = _param(rng, lead + (4,), "x")
    w, b = _param(rng, (4, 3), "w"), _param(rng, (3,), "b")
    _check(_projected(lambda: ops.linear(x, w, b), lead + (3,), rng), [x, w, b])


@pytest.mark.parametrize("shape,axis", [((4,), 0), ((2, 5), 1), ((3, 4), 0), ((2, 3, 4), 1), ((2, 2, 3), -1)])
def test_grad_softmax(shape, axis):
    rng = np.random.default_rng(8)
    a = _param(rng, shape, "a")
    mask = rng.random(shape) > 0.3
    _check(_projected(lambda: ops.softmax(a, axis=axis), shape, rng), [a])
    _check(_projected(lambda: ops.softmax(a, axis=axis, mask=mask), shape, rng), [a])


@pytest.mark.parametrize("shape,axis", [((5, 3), 0), ((2, 4, 3), 1), ((3, 2, 4, 2), 2), ((6, 2), 0), ((2, 3, 2), 1)])
def test_grad_instance_norm(shape, axis):
    rng = np.random.default_rng(9)
    a = _param(rng, shape, "a")
    _check(_projected(lambda: ops.instance_norm(a, axis=axis), shape, rng), [a])
    mask = rng.random(shape[:-1]) > 0.3
    _check(_projected(lambda: ops.instance_norm(a, axis=axis, mask=mask), shape, rng), [a])


@pytest.mark.parametrize("cfg", [(2, 2, 2, 1, 3), (1, 3, 1, 2, 2), (2, 1, 3, 2, 1), (3, 3, 1, 1, 1), (1, 1, 2, 2, 2)])
def test_grad_conv(cfg):
    nx, ny, px, cin, cout = cfg
    py = px
    rng = np.random.default_rng(13)
    x = _param(rng, (2, nx * px, ny * py, cin), "x")
    w, b = _param(rng, (px, py, cin, cout), "w"), _param(rng, (cout,), "b")
    _check(_projected(lambda: ops.conv2d_patch(x, w, b), (2, nx, ny, cout), rng), [x, w, b])
    z = _param(rng, (2, nx, ny, cin), "z")
    wt = _param(rng, (cin, px, py, cout), "wt")
    _check(_projected(lambda: ops.conv_transpose2d_patch(z, wt, b), (2, nx * px, ny * py, cout), rng), [z, wt, b])


def test_grad_where(rng):
    a, b = _param(rng, (3, 4), "a"), _param(rng, (3, 4), "b")
    cond = rng.random((3, 4)) > 0.5
    _check(_projected(lambda: ops.where(cond, a, b), (3, 4), rng), [a, b])
