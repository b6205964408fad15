"""Gradient checks for every op against central finite differences."""

import numpy as np
import pytest

from drailab import autodiff as ad
from drailab.autodiff import Var

RNG = np.random.default_rng(42)


def check_grads(build, arrays, rel_tol=1e-6, eps=1e-6):
    """build(vars) -> scalar Var; arrays are float64 leaves."""
    leaves = [Var(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()

    def value():
        return float(build(*[Var(a) for a in arrays]).data)

    numeric = ad.numeric_gradient(value, arrays, eps=eps)
    for leaf, num in zip(leaves, numeric):
        scale = max(np.abs(num).max(), 1e-8)
        assert np.abs(leaf.grad - num).max() / scale < rel_tol


def test_add_mul_broadcast():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4,))
    check_grads(lambda x, y: ad.mean(ad.mul(ad.add(x, y), ad.add(x, 2.0))), [a, b])


def test_square_abs_exp_tanh_relu():
    a = RNG.normal(size=(5,)) + 0.1  # keep away from the |.| kink
    check_grads(lambda x: ad.vsum(ad.square(x)), [a])
    check_grads(lambda x: ad.vsum(ad.absolute(x)), [a])
    check_grads(lambda x: ad.vsum(ad.exp(x)), [a])
    check_grads(lambda x: ad.vsum(ad.tanh(x)), [a])
    check_grads(lambda x: ad.vsum(ad.leaky_relu(x, 0.2)), [a])
    check_grads(lambda x: ad.vsum(ad.relu(x)), [a])


def test_matmul_linear():
    x = RNG.normal(size=(4, 3))
    w = RNG.normal(size=(3, 2))
    b = RNG.normal(size=(2,))
    check_grads(lambda a, c: ad.mean(ad.square(ad.matmul(a, c))), [x, w])
    check_grads(lambda a, c, d: ad.mean(ad.square(ad.linear(a, c, d))), [x, w, b])


def test_reductions_and_shapes():
    a = RNG.normal(size=(2, 3, 4))
    check_grads(lambda x: ad.mean(x), [a])
    check_grads(lambda x: ad.vsum(ad.square(ad.reshape(x, (6, 4)))), [a])
    check_grads(lambda x: ad.vsum(ad.square(ad.mean_last(x))), [a])


def test_concat_and_slicing():
    a = RNG.normal(size=(2, 3))
    b = RNG.normal(size=(2, 2))
    check_grads(lambda x, y: ad.vsum(ad.square(ad.concat([x, y], axis=1))), [a, b])
    c = RNG.normal(size=(6, 3))
    def sliced(x):
        lo, hi = ad.split_rows(x, (2, 4))
        return ad.vsum(ad.square(lo)) + ad.mean(ad.square(hi))
    check_grads(sliced, [c])


def test_tile_spatial():
    v = RNG.normal(size=(2, 5))
    sel = RNG.normal(size=(2, 5, 3, 4))
    check_grads(lambda x: ad.vsum(ad.mul(ad.tile_spatial(x, 3, 4), Var(sel))), [v])


def test_conv2d_gradients():
    x = RNG.normal(size=(2, 3, 8, 8))
    w = RNG.normal(size=(4, 3, 3, 3)) * 0.3
    b = RNG.normal(size=(4,))
    sel = RNG.normal(size=(2, 4, 4, 4))
    check_grads(lambda a, c, d: ad.vsum(ad.mul(ad.conv2d(a, c, d, stride=2, pad=1), Var(sel))),
                [x, w, b])


def test_conv2d_transpose_gradients():
    x = RNG.normal(size=(2, 4, 4, 4))
    w = RNG.normal(size=(4, 3, 4, 4)) * 0.3
    b = RNG.normal(size=(3,))
    sel = RNG.normal(size=(2, 3, 8, 8))
    check_grads(
        lambda a, c, d: ad.vsum(ad.mul(ad.conv2d_transpose(a, c, d, stride=2, pad=1), Var(sel))),
        [x, w, b])


def test_conv_transpose_shape():
    x = Var(np.zeros((1, 2, 5, 5)))
    w = Var(np.zeros((2, 3, 4, 4)))
    out = ad.conv2d_transpose(x, w, Var(np.zeros(3)), stride=2, pad=1)
    assert out.shape == (1, 3, 10, 10)


def test_instance_norm_gradients():
    x = RNG.normal(size=(2, 3, 5, 5))
    gamma = RNG.normal(size=(3,)) + 1.0
    beta = RNG.normal(size=(3,))
    sel = RNG.normal(size=(2, 3, 5, 5))
    check_grads(
        lambda a, g, b: ad.vsum(ad.mul(ad.instance_norm2d(a, g, b), Var(sel))),
        [x, gamma, beta], rel_tol=1e-5)


def test_cross_entropy_gradients():
    logits = RNG.normal(size=(6, 4))
    labels = np.array([0, 1, 2, 3, 1, 0])
    check_grads(lambda x: ad.cross_entropy(x, labels), [logits])


def test_grl_negates_gradient():
    v = Var(np.array([1.0, -2.0]), requires_grad=True)
    ad.vsum(ad.square(ad.grl(v))).backward()
    assert np.allclose(v.grad, [-2.0, 4.0])


def test_double_grl_restores_gradient():
    v = Var(np.array([1.0, -2.0]), requires_grad=True)
    ad.vsum(ad.square(ad.grl(ad.grl(v)))).backward()
    assert np.allclose(v.grad, [2.0, -4.0])


def test_abs_subgradient_zero_at_kink():
    v = Var(np.zeros(3), requires_grad=True)
    ad.vsum(ad.absolute(v)).backward()
    assert np.allclose(v.grad, 0.0)


def test_no_grad_suppresses_graph():
    v = Var(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.vsum(ad.square(v))
    assert not out.requires_grad
    assert out._vjp is None


def test_frozen_excludes_params():
    v = Var(np.ones(3), requires_grad=True)
    with ad.frozen([v]):
        out = ad.vsum(ad.square(v))
        assert not out.requires_grad
    assert v.requires_grad


def test_detach_blocks_backward():
    v = Var(np.ones(3), requires_grad=True)
    ad.vsum(ad.square(v.detach())).backward()
    assert v.grad is None


def test_grad_accumulates_over_reuse():
    v = Var(np.array([2.0]), requires_grad=True)
    out = ad.add(ad.square(v), ad.square(v))
    out_sum = ad.vsum(out)
    out_sum.backward()
    assert np.allclose(v.grad, [8.0])


def test_backward_requires_scalar():
    v = Var(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.square(v).backward()
