"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the operation that produced it; :meth:`Tensor.backward`
walks the graph in reverse topological order and accumulates ``.grad`` on every
leaf created with ``requires_grad=True``. The operator set is deliberately
small: elementwise arithmetic, reductions, matrix products, the few volumetric
kernels the network needs (3x3x3 convolution, 2x pooling and transposed
convolution, per-axis linear maps) and a batched symmetric 3x3 eigensolver.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

EIGEN_GAP_EPS = 1e-9


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make ndarray (op) Tensor dispatch to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _result(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    nextra = grad.ndim - len(shape)
    if nextra > 0:
        grad = grad.sum(axis=tuple(range(nextra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _result(out, (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    return _result(
        np.where(cond, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                   _unbroadcast(np.where(cond, 0, g), b.shape)),
    )


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=axis), ts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _result(
        np.stack([t.data for t in ts], axis=axis), ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = np.swapaxes(bd, -1, -2) @ g[..., None]
            ga = _unbroadcast(ga[..., 0], a.shape) if ga.ndim > 1 else ga
            gb = ad[:, None] * g[..., None, :]
            return ga, _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def axis_linear(a, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix (out x in) along one axis of ``a``."""
    a = as_tensor(a)
    m = np.asarray(matrix, dtype=a.dtype)
    ax = axis % a.ndim

    def apply(x, mat):
        y = np.tensordot(mat, x, axes=([1], [ax]))
        return np.moveaxis(y, 0, ax)

    return _result(apply(a.data, m), (a,), lambda g: (apply(g, m.T),))


def sym3_from6(t) -> Tensor:
    """Symmetric 3x3 matrices from 6-vectors (xx, yy, zz, xy, xz, yz) on the last axis."""
    t = as_tensor(t)
    idx = np.array([[0, 3, 4], [3, 1, 5], [4, 5, 2]])
    out = t.data[..., idx]

    def backward(g):
        gt = np.zeros(t.shape, dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gt[..., idx[i, j]] += g[..., i, j]
        return (gt,)

    return _result(out, (t,), backward)


def eigh3(a, gap_eps: float = EIGEN_GAP_EPS):
    """Batched eigendecomposition of symmetric 3x3 matrices.

    Returns ``(w, v)`` with eigenvalues ascending and eigenvectors in the
    columns of ``v``. The adjoint uses the standard perturbation formula with
    gaps regularised as ``d / (d^2 + eps^2)``.
    """
    a = as_tensor(a)
    w, v = np.linalg.eigh(a.data)
    w_t = Tensor(w)
    v_t = Tensor(v)
    if not a.requires_grad:
        return w_t, v_t
    diff = w[..., None, :] - w[..., :, None]  # diff[i, j] = w_j - w_i
    f = diff / (diff * diff + gap_eps * gap_eps)
    vt = np.swapaxes(v, -1, -2)

    # eigenvalues and eigenvectors share a single node so the adjoint sees both
    node = Tensor(np.zeros(()), True, (a,), None)
    state = {"gw": None, "gv": None}

    def back_node(g):
        gw = state["gw"] if state["gw"] is not None else np.zeros_like(w)
        gv = state["gv"] if state["gv"] is not None else np.zeros_like(v)
        state["gw"] = state["gv"] = None
        inner = np.zeros_like(v)
        inner[..., np.arange(3), np.arange(3)] = gw
        inner = inner + f * (vt @ gv)
        ga = v @ inner @ vt
        return (0.5 * (ga + np.swapaxes(ga, -1, -2)),)

    node._backward = back_node

    def back_w(g):
        state["gw"] = g if state["gw"] is None else state["gw"] + g
        return (np.zeros(()),)

    def back_v(g):
        state["gv"] = g if state["gv"] is None else state["gv"] + g
        return (np.zeros(()),)

    w_t = Tensor(w, True, (node,), back_w)
    v_t = Tensor(v, True, (node,), back_v)
    return w_t, v_t


# ---------------------------------------------------------------- volumetric ops

def conv3d(x, w, b=None) -> Tensor:
    """'Same' 3-D convolution, stride 1. x: (N, Cin, X, Y, Z), w: (Cout, Cin, k, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    n, cin, sx, sy, sz = x.shape
    cout, _, k, _, _ = w.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    vox = sx * sy * sz
    cols = np.empty((n, cin, k, k, k, sx, sy, sz), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, :, i, j, l] = xp[:, :, i:i + sx, j:j + sy, l:l + sz]
    cols = cols.reshape(n, cin * k ** 3, vox)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, sx, sy, sz)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, cout, 1, 1, 1)
        parents.append(b)

    def backward(g):
        g2 = g.reshape(n, cout, vox)
        gw = np.einsum("nov,nkv->ok", g2, cols, optimize=True).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(n, cin, k, k, k, sx, sy, sz)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[:, :, i:i + sx, j:j + sy, l:l + sz] += gcols[:, :, i, j, l]
            gx = gxp[:, :, p:p + sx, p:p + sy, p:p + sz]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _result(out, parents, backward)


def conv1x1(x, w, b=None) -> Tensor:
    """Pointwise channel mixing. x: (N, Cin, ...), w: (Cout, Cin)."""
    x, w = as_tensor(x), as_tensor(w)
    shape = x.shape
    flat = x.data.reshape(shape[0], shape[1], -1)
    out = np.matmul(w.data, flat)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
        parents.append(b)
    out = out.reshape((shape[0], w.shape[0]) + shape[2:])

    def backward(g):
        g2 = g.reshape(shape[0], w.shape[0], -1)
        grads = [np.matmul(w.data.T, g2).reshape(shape),
                 np.einsum("nov,niv->oi", g2, flat, optimize=True)]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    return _result(out, parents, backward)


def avg_pool2(x) -> Tensor:
    """2x2x2 mean pooling with stride 2 on (N, C, X, Y, Z)."""
    x = as_tensor(x)
    n, c, sx, sy, sz = x.shape
    out = x.data.reshape(n, c, sx // 2, 2, sy // 2, 2, sz // 2, 2).mean(axis=(3, 5, 7))

    def backward(g):
        g = np.repeat(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3), 2, axis=4)
        return (g / 8.0,)

    return _result(out, (x,), backward)


def conv_transpose2(x, w, b=None) -> Tensor:
    """2x2x2 transposed convolution, stride 2. x: (N, Cin, X, Y, Z), w: (Cin, Cout, 2, 2, 2)."""
    x, w = as_tensor(x), as_tensor(w)
    n, cin, sx, sy, sz = x.shape
    cout = w.shape[1]
    flat = x.data.reshape(n, cin, -1)
    # (n, cout, 2, 2, 2, vox)
    y = np.einsum("ioabc,niv->noabcv", w.data, flat, optimize=True)
    y = y.reshape(n, cout, 2, 2, 2, sx, sy, sz).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    out = y.reshape(n, cout, 2 * sx, 2 * sy, 2 * sz)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, cout, 1, 1, 1)
        parents.append(b)

    def backward(g):
        gg = g.reshape(n, cout, sx, 2, sy, 2, sz, 2).transpose(0, 1, 3, 5, 7, 2, 4, 6)
        gg = gg.reshape(n, cout, 2, 2, 2, -1)
        gx = np.einsum("ioabc,noabcv->niv", w.data, gg, optimize=True).reshape(x.shape)
        gw = np.einsum("noabcv,niv->ioabc", gg, flat, optimize=True)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _result(out, parents, backward)


def layer_norm(x, gamma=None, beta=None, axis=-1, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axis`` then apply optional affine parameters."""
    x = as_tensor(x)
    mu = mean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=axis, keepdims=True)
    out = xc / sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out
