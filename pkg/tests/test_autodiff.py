import math

import numpy as np
import pytest

from apgsim import autodiff as ad


def test_tanh_at_zero():
    t = ad.Tape()
    x = t.leaf(0.0)
    y = ad.tanh(x)
    assert y.value == 0.0
    g = t.backward(y)
    assert ad.grad_of(g, x) == pytest.approx(1.0)


def test_square_gradient():
    t = ad.Tape()
    x = t.leaf(3.0)
    g = t.backward(x * x)
    assert ad.grad_of(g, x) == pytest.approx(6.0)


def test_softmax_uniform_and_row_sums():
    t = ad.Tape()
    x = t.leaf(np.zeros(3))
    y = ad.softmax(x)
    assert np.allclose(y.value, [1 / 3] * 3)
    # rows of the softmax Jacobian sum to zero: grad of sum(softmax) is zero
    g = t.backward(ad.sum_(y))
    assert np.allclose(ad.grad_of(g, x), 0.0, atol=1e-15)


def test_chain_and_fanout():
    t = ad.Tape()
    x = t.leaf(1.0)
    y = 2.0 * (3.0 * x)
    assert ad.grad_of(t.backward(y), x) == pytest.approx(6.0)

    t2 = ad.Tape()
    x2 = t2.leaf(1.5)
    assert ad.grad_of(t2.backward(x2 + x2), x2) == pytest.approx(2.0)


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    shapes = [(4, 3), (4,), (4, 4), (4,), (1, 4), (1,)]
    inputs = [rng.normal(size=s) for s in shapes] + [rng.normal(size=(3,))]

    def f(tape, vs):
        w1, b1, w2, b2, w3, b3, x = vs
        h1 = ad.tanh(w1 @ x + b1)
        h2 = ad.tanh(w2 @ h1 + b2)
        return ad.sum_(w3 @ h2 + b3)

    assert ad.grad_check(f, inputs) < 1e-5


def test_detach_cuts_the_graph():
    t = ad.Tape()
    x = t.leaf(2.0)
    y = ad.detach(x * x)
    assert y.value == 4.0  # value preserved
    g = t.backward(y * t.leaf(3.0))
    assert np.allclose(ad.grad_of(g, x), 0.0)


def test_detach_equals_full_graph_minus_branch():
    # gradient of f(x) + detach(g(x)) equals the gradient through f alone
    x0 = np.array([1.2, -0.7])

    def grads(with_detach):
        t = ad.Tape()
        x = t.leaf(x0)
        f = ad.sum_(ad.tanh(x))
        gx = ad.sum_(ad.exp(x))
        branch = ad.detach(gx) if with_detach else gx
        return ad.grad_of(t.backward(f + branch), x)

    t = ad.Tape()
    x = t.leaf(x0)
    f_only = ad.grad_of(t.backward(ad.sum_(ad.tanh(x))), x)
    assert np.allclose(grads(True), f_only)
    assert not np.allclose(grads(False), f_only)


def test_linearity_of_backward():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4,))
    alpha, beta = 0.7, -2.3

    def grad(fn):
        t = ad.Tape()
        x = t.leaf(x0)
        return ad.grad_of(t.backward(fn(x)), x)

    gf = grad(lambda x: ad.sum_(ad.tanh(x)))
    gg = grad(lambda x: ad.l2_norm(x))
    gmix = grad(lambda x: alpha * ad.sum_(ad.tanh(x)) + beta * ad.l2_norm(x))
    assert np.allclose(gmix, alpha * gf + beta * gg, atol=1e-12)


def test_determinism():
    def run():
        rng = np.random.default_rng(11)
        t = ad.Tape()
        x = t.leaf(rng.normal(size=(5,)))
        w = t.leaf(rng.normal(size=(5, 5)))
        y = ad.l2_norm(ad.tanh(w @ x))
        return ad.grad_of(t.backward(y), w)

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_cross_tape_mixing_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.leaf(1.0)
    y = t2.leaf(2.0)
    with pytest.raises(ad.TapeError):
        ad.add(x, y)


def test_shape_mismatch_names_shapes():
    t = ad.Tape()
    a = t.leaf(np.zeros((2, 3)))
    b = t.leaf(np.zeros((4, 5)))
    with pytest.raises(ad.TapeError) as e:
        ad.add(a, b)
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)
    with pytest.raises(ad.TapeError):
        ad.matmul(a, b)


def test_non_scalar_backward_rejected():
    t = ad.Tape()
    x = t.leaf(np.zeros(3))
    with pytest.raises(ad.TapeError):
        t.backward(x)


def test_nan_surfaces_at_backward():
    t = ad.Tape()
    x = t.leaf(np.array([-1.0, 2.0]))
    with np.errstate(invalid="ignore"):
        y = ad.sum_(ad.log(x))  # log(-1) -> nan
    with pytest.raises(ad.GradientNaNError) as e:
        t.backward(y)
    assert "node" in str(e.value)


def test_grad_check_square():
    err = ad.grad_check(lambda t, vs: vs[0] * vs[0], [np.array(3.0)])
    assert err < 1e-9


def test_slice_scatter_and_concat():
    t = ad.Tape()
    x = t.leaf(np.array([1.0, 2.0, 3.0, 4.0]))
    y = ad.sum_(x[1:3] * t.leaf(np.array([10.0, 20.0])))
    g = ad.grad_of(t.backward(y), x)
    assert np.allclose(g, [0.0, 10.0, 20.0, 0.0])

    t2 = ad.Tape()
    a = t2.leaf(np.array([1.0, 2.0]))
    b = t2.leaf(np.array([3.0]))
    c = ad.concat([a, b])
    assert np.allclose(c.value, [1, 2, 3])
    g2 = t2.backward(ad.sum_(c * t2.leaf(np.array([1.0, 2.0, 3.0]))))
    assert np.allclose(ad.grad_of(g2, a), [1, 2])
    assert np.allclose(ad.grad_of(g2, b), [3])


def test_l2_norm_epsilon_guard():
    t = ad.Tape()
    x = t.leaf(np.zeros(2))
    y = ad.l2_norm(x)
    assert y.value == pytest.approx(1e-6, rel=1e-9)
    g = ad.grad_of(t.backward(y), x)
    assert np.all(np.isfinite(g)) and np.allclose(g, 0.0)


def test_clamp_masks_gradient_outside_range():
    t = ad.Tape()
    x = t.leaf(np.array([-2.0, 0.5, 2.0]))
    y = ad.sum_(ad.clamp(x, -1.0, 1.0))
    g = ad.grad_of(t.backward(y), x)
    assert np.allclose(g, [0.0, 1.0, 0.0])
    assert np.allclose(ad.clamp(x, -1.0, 1.0).value, [-1.0, 0.5, 1.0])


def test_grad_of_unreached_leaf_is_zeros():
    t = ad.Tape()
    x = t.leaf(np.ones(3))
    y = t.leaf(2.0)
    g = t.backward(y * y)
    assert np.allclose(ad.grad_of(g, x), 0.0)


def test_broadcasting_vjps():
    rng = np.random.default_rng(5)

    def f(tape, vs):
        mat, vec, scalar = vs
        return ad.sum_((mat + vec) * scalar)

    err = ad.grad_check(f, [rng.normal(size=(3, 4)), rng.normal(size=(4,)), np.array(1.7)])
    assert err < 1e-6
