import numpy as np
import pytest

from sdfsplat.autodiff import (ContractViolation, DomainError, Tape, concat,
                               forward_op, grad_check, stack, where)


def test_forward_op_examples():
    t = Tape()
    assert forward_op("sigmoid", [t.constant(0.0)]).data == 0.5
    x = t.leaf(-3.0)
    y = forward_op("max", [x, t.constant(0.0)])
    assert y.data == 0.0
    t.backward(y)
    assert x.grad == 0.0

    a = t.leaf([1.0, 2.0, 3.0])
    b = t.constant([4.0, 5.0, 6.0])
    d = forward_op("dot", [a, b])
    assert d.data == 32.0
    t.backward(d)
    assert np.array_equal(a.grad, [4.0, 5.0, 6.0])


def test_forward_op_domain_errors():
    t = Tape()
    with pytest.raises(DomainError):
        forward_op("div", [t.leaf(1.0), t.constant(0.0)])
    with pytest.raises(DomainError):
        forward_op("log", [t.leaf(-1.0)])
    with pytest.raises(DomainError):
        forward_op("sqrt", [t.leaf(-1.0)])
    with pytest.raises(ContractViolation):
        forward_op("nope", [t.leaf(1.0)])


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(ContractViolation):
        forward_op("add", [t1.leaf(1.0), t2.leaf(2.0)])


def test_backward_simple_examples():
    t = Tape()
    x = t.leaf(3.0)
    t.backward(x * x)
    assert x.grad == 6.0

    t = Tape()
    x = t.leaf(0.0)
    y = x.sigmoid()
    t.backward(y)
    assert x.grad == 0.25
    assert y.grad == 1.0  # output adjoint w.r.t. itself


def test_backward_requires_scalar():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(ContractViolation):
        t.backward(x * 2.0)


def test_gradient_map_contains_leaves():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    y = t.leaf(3.0)
    out = (x * y).sum()
    gmap = t.backward(out)
    assert gmap[x] is x.grad and gmap[y] is y.grad
    assert np.array_equal(x.grad, [3.0, 3.0])
    assert y.grad == 3.0


def test_grad_check_constant_is_zero():
    err = grad_check(lambda x: (x * 0.0).sum() + 7.0, [np.array([1.0, 2.0])])
    assert err == 0.0


@pytest.mark.parametrize("fn", [
    lambda x: (x.exp() * x).sum(),
    lambda x: x.sigmoid().sum(),
    lambda x: x.tanh().sum(),
    lambda x: (x * x).sqrt().sum(),
    lambda x: (x + 2.5).log().sum(),
    lambda x: x.softplus(10.0).sum(),
    lambda x: (x ** 3).mean(),
    lambda x: x.norm(axis=-1).sum(),
])
def test_primitive_gradients(fn, rng):
    # sampled away from kinks by construction
    x = rng.uniform(0.2, 1.0, size=(3, 4))
    assert grad_check(fn, [x]) < 1e-6


@pytest.mark.parametrize("fn", [
    lambda a, b: a.minimum(b).sum(),
    lambda a, b: a.maximum(b).sum(),
    lambda a, b: (a * b).abs().sum(),
    lambda a, b: a.matmul(b).sum(),
])
def test_binary_gradients(fn, rng):
    a = rng.uniform(0.1, 1.0, size=(4, 4)) + 0.05
    b = rng.uniform(1.1, 2.0, size=(4, 4))  # keep away from ties
    assert grad_check(fn, [a, b]) < 1e-6


def test_matvec_and_shapes(rng):
    A = rng.standard_normal((3, 4))
    v = rng.standard_normal(4)
    err = grad_check(lambda a, x: a.matvec(x).sum(), [A, v])
    assert err < 1e-6


def test_broadcasting_gradients(rng):
    a = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    err = grad_check(lambda x, y: (x * y + y).sum(), [a, b])
    assert err < 1e-6


def test_gather_scatter_gradients(rng):
    table = rng.standard_normal((7, 2))
    idx = rng.integers(0, 7, size=(4, 3))
    err = grad_check(lambda t: (t.gather(idx) * 1.5).sum(), [table])
    assert err < 1e-6

    base = rng.standard_normal(6)
    v = rng.standard_normal(3)
    ii = np.array([1, 3, 5])
    err = grad_check(lambda b, x: b.index_add(ii, x).sum(), [base, v])
    assert err < 1e-6
    err = grad_check(
        lambda b, x: (b.index_mul(ii, x) * np.arange(6.0)).sum(), [base, v])
    assert err < 1e-6


def test_take_along_gradient(rng):
    x = rng.uniform(0.0, 1.0, (5, 3)) + np.arange(3) * 2.0  # no ties
    idx = np.argmin(x, axis=1)[:, None]
    err = grad_check(lambda v: v.take_along(idx).sum(), [x])
    assert err < 1e-6


def test_cumprod_exclusive_values_and_grad(rng):
    a = rng.uniform(0.1, 0.9, size=(3, 5))
    t = Tape()
    v = t.leaf(a)
    T = (1.0 - v).cumprod_exclusive(axis=-1)
    expected = np.cumprod(np.concatenate(
        [np.ones((3, 1)), 1.0 - a[:, :-1]], axis=1), axis=1)
    assert np.allclose(T.data, expected, atol=0)
    err = grad_check(
        lambda x: ((1.0 - x).cumprod_exclusive(-1) * x).sum(), [a])
    assert err < 1e-6


def test_cumprod_exclusive_zero_factor():
    # exact zero factors use the product-expansion fallback
    a = np.array([[0.2, 1.0, 0.4]])  # factor (1 - 1.0) = 0
    err = grad_check(lambda x: ((1.0 - x).cumprod_exclusive(-1) * x).sum(),
                     [a])
    assert err < 1e-6


def test_stack_concat_where(rng):
    a = rng.standard_normal(4)
    b = rng.standard_normal(4)
    mask = np.array([True, False, True, False])
    err = grad_check(
        lambda x, y: (stack([x, y], axis=0) * 2.0).sum()
        + concat([x, y], axis=0).sum() + where(mask, x, y).sum(), [a, b])
    assert err < 1e-6


def test_linearity_of_backward(rng):
    # grad(a*f + b*g) == a*grad(f) + b*grad(g) on random graphs
    for trial in range(10):
        x0 = rng.standard_normal(6)
        a, b = rng.standard_normal(2)

        def f(v):
            return (v * v).sum()

        def g(v):
            return (v.exp() * 0.1).sum()

        t = Tape()
        x = t.leaf(x0)
        t.backward(f(x))
        gf = x.grad.copy()
        t2 = Tape()
        x2 = t2.leaf(x0)
        t2.backward(g(x2))
        gg = x2.grad.copy()
        t3 = Tape()
        x3 = t3.leaf(x0)
        t3.backward(a * f(x3) + b * g(x3))
        assert np.allclose(x3.grad, a * gf + b * gg, atol=1e-12, rtol=0)


def test_backward_deterministic(rng):
    t = Tape()
    x = t.leaf(rng.standard_normal((4, 4)))
    y = ((x.exp() * x).sum(axis=0) ** 2).sum()
    t.backward(y)
    g1 = x.grad.copy()
    t.backward(y)
    assert np.array_equal(g1, x.grad)


def test_replay_bit_identical(rng):
    t = Tape()
    x = t.leaf(rng.standard_normal((3, 3)))
    y = (x.sigmoid().matmul(x) + x.abs()).sum()
    before = y.data.copy()
    t.replay()
    assert np.array_equal(before, y.data)


def test_tie_rule_first_argument():
    # at a == b the subgradient goes to the first argument
    t = Tape()
    a = t.leaf(1.0)
    b = t.leaf(1.0)
    t.backward(a.minimum(b))
    assert a.grad == 1.0 and b.grad == 0.0
    t2 = Tape()
    a2 = t2.leaf(1.0)
    b2 = t2.leaf(1.0)
    t2.backward(a2.maximum(b2))
    assert a2.grad == 1.0 and b2.grad == 0.0
