"""Backend equivalence for the hot kernels."""

import numpy as np
import pytest

from drailab import kernels

GEOMETRIES = [
    (4, 3, 16, 16, 4, 2, 1),
    (2, 1, 64, 64, 4, 2, 1),
    (3, 5, 9, 9, 3, 1, 0),
    (2, 2, 8, 8, 4, 2, 3),
    (1, 1, 5, 7, 2, 3, 0),
    (2, 4, 12, 10, 5, 2, 2),
]


@pytest.fixture(autouse=True)
def restore_backend():
    prev = kernels.get_backend()
    yield
    kernels.set_backend(prev)


def test_conv_out_size():
    assert kernels.conv_out_size(64, 4, 2, 1) == 32
    assert kernels.conv_out_size(5, 3, 1, 0) == 3


@pytest.mark.parametrize("n,c,h,w,k,s,p", GEOMETRIES)
def test_im2col_col2im_backends_bit_equal(n, c, h, w, k, s, p):
    rng = np.random.default_rng(hash((n, c, h, w)) % 2**32)
    x = rng.normal(size=(n, c, h, w)).astype(np.float32)
    kernels.set_backend("numpy")
    cols_np = kernels.im2col(x, k, k, s, p)
    back_np = kernels.col2im(cols_np, n, c, h, w, k, k, s, p)
    kernels.set_backend("numba")
    cols_nb = kernels.im2col(x, k, k, s, p)
    back_nb = kernels.col2im(cols_np, n, c, h, w, k, k, s, p)
    assert np.array_equal(cols_np, cols_nb)
    assert np.array_equal(back_np, back_nb)


def test_im2col_matches_explicit_patch_extraction():
    # independent oracle: loop over output positions and copy patches
    rng = np.random.default_rng(0)
    n, c, h, w, k, s, p = 2, 3, 8, 8, 3, 2, 1
    x = rng.normal(size=(n, c, h, w))
    oh = kernels.conv_out_size(h, k, s, p)
    ow = kernels.conv_out_size(w, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    expected = np.zeros((c * k * k, n * oh * ow))
    for ch in range(c):
        for ki in range(k):
            for kj in range(k):
                for i in range(n):
                    for io in range(oh):
                        for jo in range(ow):
                            expected[(ch * k + ki) * k + kj, (i * oh + io) * ow + jo] = \
                                xp[i, ch, io * s + ki, jo * s + kj]
    kernels.set_backend("numpy")
    assert np.allclose(kernels.im2col(x, k, k, s, p), expected)


def test_col2im_is_adjoint_of_im2col():
    # <im2col(x), y> == <x, col2im(y)> characterizes the adjoint
    rng = np.random.default_rng(1)
    n, c, h, w, k, s, p = 2, 2, 10, 10, 4, 2, 1
    x = rng.normal(size=(n, c, h, w))
    cols = kernels.im2col(x, k, k, s, p)
    y = rng.normal(size=cols.shape)
    lhs = float((cols * y).sum())
    rhs = float((x * kernels.col2im(y, n, c, h, w, k, k, s, p)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_leaky_relu_backends_agree():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 5)).astype(np.float32)
    g = rng.normal(size=x.shape).astype(np.float32)
    kernels.set_backend("numpy")
    f_np, b_np = kernels.leaky_relu_fwd(x, 0.2), kernels.leaky_relu_bwd(x, g, 0.2)
    kernels.set_backend("numba")
    f_nb, b_nb = kernels.leaky_relu_fwd(x, 0.2), kernels.leaky_relu_bwd(x, g, 0.2)
    assert np.array_equal(f_np, f_nb)
    assert np.array_equal(b_np, b_nb)


def test_instnorm_backends_agree():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    gamma = rng.normal(size=3).astype(np.float32)
    beta = rng.normal(size=3).astype(np.float32)
    g = rng.normal(size=x.shape).astype(np.float32)
    kernels.set_backend("numpy")
    out_np, xhat_np, inv_np = kernels.instnorm_fwd(x, gamma, beta, 1e-5)
    dx_np, dg_np, db_np = kernels.instnorm_bwd(g, xhat_np, inv_np, gamma)
    kernels.set_backend("numba")
    out_nb, xhat_nb, inv_nb = kernels.instnorm_fwd(x, gamma, beta, 1e-5)
    dx_nb, dg_nb, db_nb = kernels.instnorm_bwd(g, xhat_nb, inv_nb, gamma)
    assert np.allclose(out_np, out_nb, atol=1e-5)
    assert np.allclose(dx_np, dx_nb, atol=1e-5)
    assert np.allclose(dg_np, dg_nb, atol=1e-4)
    assert np.allclose(db_np, db_nb, atol=1e-4)


def test_backend_selection_errors():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
    assert kernels.set_backend("auto") in ("numba", "numpy")
