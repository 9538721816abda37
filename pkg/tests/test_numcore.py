import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dens import numcore as nc
from dens.numcore import Tape, Tensor, backward, grad_check

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def grads_of(fn, *values):
    leaves = [Tensor(np.array(v, dtype=float), requires_grad=True) for v in values]
    with Tape():
        out = fn(*leaves)
    g = backward(out)
    return [g.get(t, np.zeros_like(t.value)) for t in leaves]


def test_matmul_vjp_matches_closed_form(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    ga, gb = grads_of(lambda x, y: nc.sum(x @ y), a, b)
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T, atol=1e-14)
    np.testing.assert_allclose(gb, a.T @ np.ones((3, 2)), atol=1e-14)


def test_broadcast_add_reduces_gradient(rng):
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(3,))
    ga, gb = grads_of(lambda x, y: nc.sum((x + y) * (x + y)), a, b)
    np.testing.assert_allclose(gb, (2 * (a + b)).sum(0), atol=1e-13)
    assert ga.shape == a.shape


def test_shared_input_accumulates():
    (g,) = grads_of(lambda x: nc.sum(x * x * x), np.array([2.0, -1.0]))
    np.testing.assert_allclose(g, [12.0, 3.0])


def test_scatter_add_and_gather_are_adjoint(rng):
    x = rng.normal(size=(6, 2))
    idx = np.array([0, 2, 2, 5, 1])
    y = rng.normal(size=(5, 2))
    lhs = float((nc.gather(Tensor(x), idx).value * y).sum())
    rhs = float((x * nc.scatter_add(Tensor(y), idx, 6).value).sum())
    assert abs(lhs - rhs) < 1e-13


def test_scatter_add_vjp_is_gather(rng):
    v = rng.normal(size=(5, 3))
    idx = np.array([1, 1, 0, 3, 3])
    w = rng.normal(size=(4, 3))
    (g,) = grads_of(lambda t: nc.sum(nc.scatter_add(t, idx, 4) * w), v)
    np.testing.assert_array_equal(g, w[idx])


def test_gather_out_of_range_raises():
    with pytest.raises(IndexError):
        nc.gather(Tensor(np.zeros((3, 2))), np.array([0, 3]))


def test_shape_mismatch_raises():
    with pytest.raises(nc.ShapeError):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_finite_result_raises():
    with pytest.raises(nc.NonFiniteError):
        nc.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = x * 2.0
    with pytest.raises(nc.ShapeError):
        backward(y)


def test_tape_consumed_unless_retained(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    with Tape() as tape:
        y = nc.sum(nc.silu(x) * x)
    g1 = backward(y, retain=True, tape=tape)[x]
    g2 = backward(y, tape=tape)[x]
    np.testing.assert_array_equal(g1, g2)
    with pytest.raises(nc.TapeError):
        backward(y, tape=tape)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert y.node is None


def test_norm_gradient_is_unit_vector():
    v = np.array([[3.0, 4.0, 0.0]])
    (g,) = grads_of(lambda t: nc.sum(nc.norm(t)), v)
    np.testing.assert_allclose(g, [[0.6, 0.8, 0.0]], atol=1e-15)


def test_einsum_three_operand_gradient(rng):
    a, b, c = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=(4,))
    err = grad_check(lambda t: nc.sum(nc.einsum("ij,jk,k->i", t, Tensor(b), Tensor(c))), a)
    assert err < 1e-8


@pytest.mark.parametrize("op", ["exp", "cos", "sigmoid", "silu", "sqrt", "abs"])
def test_unary_primitives_grad_check(op, rng):
    x = rng.uniform(0.3, 2.0, size=(4,)) * rng.choice([-1.0, 1.0], size=4)
    if op == "sqrt":
        x = np.abs(x)
    fn = getattr(nc, op)
    assert grad_check(lambda t: nc.sum(fn(t) * fn(t)), x) < 1e-7


def test_concat_getitem_reshape_grad_check(rng):
    x = rng.normal(size=(3, 4))

    def f(t):
        parts = nc.concat([t[:, :2], nc.reshape(t[:, 2:], (3, 2))], axis=1)
        return nc.sum(parts * parts * t)

    assert grad_check(f, x) < 1e-8


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_product_rule_property(a, b):
    ga, gb = grads_of(lambda x, y: nc.sum(x * y), a, b)
    np.testing.assert_array_equal(ga, b)
    np.testing.assert_array_equal(gb, a)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4,), elements=finite))
def test_sum_of_squares_gradient_property(x):
    (g,) = grads_of(lambda t: nc.sum(t * t), x)
    np.testing.assert_allclose(g, 2 * x, rtol=0, atol=1e-14)
