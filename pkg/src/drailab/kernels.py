"""Hot array kernels behind the convolution ops.

GEMM-based convolution spends most of its non-BLAS time rearranging patches
(im2col) and scattering gradients back (col2im).  Both kernels exist twice:
a numba ``@njit`` version and a pure-numpy fallback.  The active backend is
chosen once at import from the ``DRAILAB_KERNELS`` environment variable
(``auto`` | ``numba`` | ``numpy``) and can be switched at runtime with
:func:`set_backend` (used by the benchmark and the equivalence tests).

Layout convention: ``cols`` has shape ``(C*KH*KW, N*OH*OW)`` with the row
index ordered (channel, ki, kj) and the column index ordered (image, oh, ow),
so a convolution forward is a single ``(F, C*KH*KW) @ cols`` GEMM.

Accumulation order in col2im is (ki, kj) ascending in both backends, so the
two produce bit-identical results (fastmath stays off).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy fallback
# ---------------------------------------------------------------------------

def _im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]            # (N, C, OH, OW, KH, KW)
    cols = win.transpose(1, 4, 5, 0, 2, 3)         # (C, KH, KW, N, OH, OW)
    return np.ascontiguousarray(cols).reshape(c * kh * kw, n * oh * ow)


def _col2im_numpy(cols, n, c, h, w, kh, kw, stride, pad):
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += (
                cols[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    # serial on purpose: these run interleaved with multithreaded BLAS, and the
    # parallel launch + thread contention costs more than the loops save

    @njit(cache=True, inline="always")
    def _valid_range(k, size, stride, pad, out_size):
        # output positions o with 0 <= o*stride + k - pad < size
        lo = max(0, -(-(pad - k) // stride))
        hi = min(out_size, (size - 1 - k + pad) // stride + 1)
        return lo, max(lo, hi)

    @njit(cache=True)
    def _im2col_numba(x, kh, kw, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        cols = np.zeros((c * kh * kw, n * oh * ow), dtype=x.dtype)
        for row in range(c * kh * kw):
            ch = row // (kh * kw)
            ki = (row % (kh * kw)) // kw
            kj = row % kw
            ilo, ihi = _valid_range(ki, h, stride, pad, oh)
            jlo, jhi = _valid_range(kj, w, stride, pad, ow)
            for i in range(n):
                for io in range(ilo, ihi):
                    dst = (i * oh + io) * ow
                    src_i = io * stride + ki - pad
                    for jo in range(jlo, jhi):
                        cols[row, dst + jo] = x[i, ch, src_i, jo * stride + kj - pad]
        return cols

    @njit(cache=True)
    def _col2im_numba(cols, n, c, h, w, kh, kw, stride, pad):
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        # (ki, kj) ascending keeps the accumulation order identical to the
        # numpy fallback's slab adds
        for i in range(n):
            for ch in range(c):
                for ki in range(kh):
                    ilo, ihi = _valid_range(ki, h, stride, pad, oh)
                    for kj in range(kw):
                        jlo, jhi = _valid_range(kj, w, stride, pad, ow)
                        row = (ch * kh + ki) * kw + kj
                        for io in range(ilo, ihi):
                            oi = io * stride + ki - pad
                            base = (i * oh + io) * ow
                            for jo in range(jlo, jhi):
                                out[i, ch, oi, jo * stride + kj - pad] += cols[row, base + jo]
        return out


# ---------------------------------------------------------------------------
# fused elementwise / normalization kernels
# ---------------------------------------------------------------------------

def _leaky_fwd_numpy(x, alpha):
    return np.where(x > 0, x, alpha * x)


def _leaky_bwd_numpy(x, g, alpha):
    return np.where(x > 0, g, alpha * g)


def _instnorm_fwd_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, xhat, inv[:, :, 0, 0]


def _instnorm_bwd_numpy(g, xhat, inv, gamma):
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma[None, :, None, None]
    dx = (dxhat
          - dxhat.mean(axis=(2, 3), keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
          ) * inv[:, :, None, None]
    return dx, dgamma, dbeta


if HAS_NUMBA:

    @njit(cache=True)
    def _leaky_fwd_numba(x, alpha):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            flat_o[i] = v if v > 0 else alpha * v
        return out

    @njit(cache=True)
    def _leaky_bwd_numba(x, g, alpha):
        out = np.empty_like(g)
        flat_x = x.ravel()
        flat_g = g.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            flat_o[i] = flat_g[i] if flat_x[i] > 0 else alpha * flat_g[i]
        return out

    @njit(cache=True)
    def _instnorm_fwd_numba(x, gamma, beta, eps):
        n, c, h, w = x.shape
        m = h * w
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty((n, c), dtype=x.dtype)
        for i in range(n):
            for ch in range(c):
                s = 0.0
                ss = 0.0
                for p in range(h):
                    for q in range(w):
                        v = float(x[i, ch, p, q])
                        s += v
                        ss += v * v
                mu = s / m
                var = max(ss / m - mu * mu, 0.0)
                iv = 1.0 / np.sqrt(var + eps)
                inv[i, ch] = iv
                ga, be = gamma[ch], beta[ch]
                for p in range(h):
                    for q in range(w):
                        xh = (x[i, ch, p, q] - mu) * iv
                        xhat[i, ch, p, q] = xh
                        out[i, ch, p, q] = ga * xh + be
        return out, xhat, inv

    @njit(cache=True)
    def _instnorm_bwd_numba(g, xhat, inv, gamma):
        n, c, h, w = g.shape
        m = h * w
        dx = np.empty_like(g)
        dgamma = np.zeros(c, dtype=g.dtype)
        dbeta = np.zeros(c, dtype=g.dtype)
        for i in range(n):
            for ch in range(c):
                ga = gamma[ch]
                s1 = 0.0
                s2 = 0.0
                dg = 0.0
                db = 0.0
                for p in range(h):
                    for q in range(w):
                        gv = float(g[i, ch, p, q])
                        xh = float(xhat[i, ch, p, q])
                        s1 += gv
                        s2 += gv * xh
                        dg += gv * xh
                        db += gv
                dgamma[ch] += dg
                dbeta[ch] += db
                s1 *= ga / m
                s2 *= ga / m
                iv = inv[i, ch]
                for p in range(h):
                    for q in range(w):
                        dxhat = g[i, ch, p, q] * ga
                        dx[i, ch, p, q] = (dxhat - s1 - xhat[i, ch, p, q] * s2) * iv
        return dx, dgamma, dbeta


_VALID = ("auto", "numba", "numpy")
_backend = "numpy"


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the backend actually in effect."""
    global _backend
    if name not in _VALID:
        raise ValueError(f"unknown kernel backend {name!r}, expected one of {_VALID}")
    if name == "auto":
        name = "numba" if HAS_NUMBA else "numpy"
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name
    return _backend


def get_backend() -> str:
    return _backend


def im2col(x, kh, kw, stride, pad):
    """Rearrange conv patches of x (N,C,H,W) into a (C*KH*KW, N*OH*OW) matrix."""
    if _backend == "numba":
        return _im2col_numba(x, kh, kw, stride, pad)
    return _im2col_numpy(x, kh, kw, stride, pad)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to an (N,C,H,W) array."""
    if _backend == "numba":
        return _col2im_numba(cols, n, c, h, w, kh, kw, stride, pad)
    return _col2im_numpy(cols, n, c, h, w, kh, kw, stride, pad)


def leaky_relu_fwd(x, alpha):
    if _backend == "numba" and x.flags.c_contiguous:
        return _leaky_fwd_numba(x, x.dtype.type(alpha))
    return _leaky_fwd_numpy(x, alpha)


def leaky_relu_bwd(x, g, alpha):
    if _backend == "numba" and x.flags.c_contiguous and g.flags.c_contiguous:
        return _leaky_bwd_numba(x, g, x.dtype.type(alpha))
    return _leaky_bwd_numpy(x, g, alpha)


def instnorm_fwd(x, gamma, beta, eps):
    """Returns (out, xhat, inv_std of shape (N, C))."""
    if _backend == "numba":
        return _instnorm_fwd_numba(x, gamma, beta, eps)
    return _instnorm_fwd_numpy(x, gamma, beta, eps)


def instnorm_bwd(g, xhat, inv, gamma):
    if _backend == "numba" and g.flags.c_contiguous:
        return _instnorm_bwd_numba(g, xhat, inv, gamma)
    return _instnorm_bwd_numpy(g, xhat, inv, gamma)


set_backend(os.environ.get("DRAILAB_KERNELS", "auto"))
