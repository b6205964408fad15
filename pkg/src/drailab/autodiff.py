"""Minimal reverse-mode autodiff over numpy arrays.

Everything trainable in this package flows through :class:`Var`, a thin
wrapper around an ndarray that records enough graph structure for one
backward pass.  The op set is exactly what the models and losses need; each
op stores a vector-Jacobian closure rather than a generic rule table.

Gradients with respect to every op here are verified against central finite
differences in the test suite, which is the point of rolling our own instead
of borrowing a framework: the gradient-reversal behaviour and the
finite-difference acceptance checks exercise *this* code.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (for discriminator-phase generator forwards and eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def frozen(params):
    """Temporarily exclude parameters from the graph (skips their grad GEMMs)."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


class Var:
    """Node in the computation graph: an array, its gradient, and a vjp."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_cache")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._cache = None  # im2col memo; valid because .data is never mutated in-graph

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Var":
        return Var(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate gradients of self (scalar unless grad given) into the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_var(other), -1.0))

    def __rsub__(self, other):
        return add(as_var(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(data, parents, vjp) -> Var:
    out = Var(data, requires_grad=_grad_enabled and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def square(a) -> Var:
    a = as_var(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def absolute(a) -> Var:
    """|a| with subgradient 0 at the kink."""
    a = as_var(a)
    return _make(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (out * g,))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((1.0 - out * out) * g,))


def leaky_relu(a, alpha: float = 0.2) -> Var:
    a = as_var(a)
    out = kernels.leaky_relu_fwd(a.data, alpha)
    return _make(out, (a,), lambda g: (kernels.leaky_relu_bwd(a.data, g, alpha),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def vsum(a) -> Var:
    a = as_var(a)
    return _make(
        np.asarray(a.data.sum(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.data.shape).copy(),),
    )


def mean(a) -> Var:
    a = as_var(a)
    n = a.data.size
    return _make(
        np.asarray(a.data.mean(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype),),
    )


def mean_last(a) -> Var:
    """Mean over the trailing axis (global average pooling over flattened space)."""
    a = as_var(a)
    n = a.data.shape[-1]
    return _make(
        a.data.mean(axis=-1),
        (a,),
        lambda g: (np.broadcast_to((g / n)[..., None], a.data.shape).astype(a.data.dtype),),
    )


def reshape(a, shape) -> Var:
    a = as_var(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def concat(parts, axis: int = 1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def grl(a) -> Var:
    """Gradient reversal: identity forward, negation backward."""
    a = as_var(a)
    return _make(a.data, (a,), lambda g: (-g,))


def slice_rows(a, start: int, stop: int) -> Var:
    """View rows [start, stop) along axis 0; backward scatters into zeros."""
    a = as_var(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), vjp)


def split_rows(a, sizes) -> list:
    """Split along axis 0 into consecutive chunks of the given sizes."""
    out, pos = [], 0
    for size in sizes:
        out.append(slice_rows(a, pos, pos + size))
        pos += size
    return out


def tile_spatial(v, h: int, w: int) -> Var:
    """Broadcast (N, D) condition vectors to (N, D, h, w) feature maps."""
    v = as_var(v)
    n, d = v.data.shape
    data = np.broadcast_to(v.data[:, :, None, None], (n, d, h, w)).copy()
    return _make(data, (v,), lambda g: (g.sum(axis=(2, 3)),))


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------

def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Var:
    """2-D convolution, x (N,C,H,W), w (F,C,KH,KW), b (F,)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    n, c, h, wd = x.data.shape
    f, _, kh, kw = w.data.shape
    oh = kernels.conv_out_size(h, kh, stride, pad)
    ow = kernels.conv_out_size(wd, kw, stride, pad)
    if x._cache is None:
        x._cache = {}
    key = (kh, kw, stride, pad)
    cols = x._cache.get(key)
    if cols is None:
        cols = kernels.im2col(x.data, kh, kw, stride, pad)
        x._cache[key] = cols
    wf = w.data.reshape(f, -1)
    out = (wf @ cols).reshape(f, n, oh, ow).transpose(1, 0, 2, 3)
    out = out + b.data[None, :, None, None]
    need_dx = x.requires_grad  # constant inputs (real batches) skip col2im

    def vjp(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        dw = (gf @ cols.T).reshape(w.data.shape)
        db = g.sum(axis=(0, 2, 3))
        dx = None
        if need_dx:
            dcols = wf.T @ gf
            dx = kernels.col2im(dcols, n, c, h, wd, kh, kw, stride, pad)
        return dx, dw, db

    return _make(np.ascontiguousarray(out), (x, w, b), vjp)


def conv2d_transpose(x, w, b, stride: int = 2, pad: int = 1) -> Var:
    """Transposed 2-D convolution, x (N,C,H,W), w (C,F,KH,KW), b (F,)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    n, c, h, wd = x.data.shape
    _, f, kh, kw = w.data.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    xf = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, -1)
    wf = w.data.reshape(c, -1)                     # (C, F*KH*KW)
    cols = wf.T @ xf                               # (F*KH*KW, N*H*W)
    out = kernels.col2im(cols, n, f, oh, ow, kh, kw, stride, pad)
    out = out + b.data[None, :, None, None]

    need_dx = x.requires_grad

    def vjp(g):
        dcols = kernels.im2col(g, kh, kw, stride, pad)   # (F*KH*KW, N*H*W)
        dx = None
        if need_dx:
            dxf = wf @ dcols
            dx = np.ascontiguousarray(dxf.reshape(c, n, h, wd).transpose(1, 0, 2, 3))
        dw = (dcols @ xf.T).T.reshape(w.data.shape)
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _make(out, (x, w, b), vjp)


def linear(x, w, b) -> Var:
    """Affine map, x (N,Din) @ w (Din,Dout) + b (Dout,)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    return _make(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def instance_norm2d(x, gamma, beta, eps: float = 1e-5) -> Var:
    """Per-(sample, channel) normalization over the spatial axes, with affine."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    out, xhat, inv = kernels.instnorm_fwd(x.data, gamma.data, beta.data, eps)

    def vjp(g):
        dx, dgamma, dbeta = kernels.instnorm_bwd(
            np.ascontiguousarray(g), xhat, inv, gamma.data)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp)


def cross_entropy(logits, labels) -> Var:
    """Mean softmax cross-entropy; logits (N,K), labels (N,) int."""
    logits = as_var(logits)
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = (lse - shifted[np.arange(n), labels]).mean()
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((g / n) * d,)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# composite helpers used across the losses
# ---------------------------------------------------------------------------

def mean_abs(a, b) -> Var:
    """Per-entry mean absolute difference (the l1 norm convention used throughout)."""
    return mean(absolute(as_var(a) - as_var(b)))


def mse_to(scores, target: float) -> Var:
    """Least-squares distance of scores to a scalar target, batch-meaned."""
    return mean(square(as_var(scores) - float(target)))


def numeric_gradient(fn, arrays, eps: float = 1e-5):
    """Central finite differences of scalar fn w.r.t. a list of float64 arrays."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = fn()
            flat[i] = keep - eps
            lo = fn()
            flat[i] = keep
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads
