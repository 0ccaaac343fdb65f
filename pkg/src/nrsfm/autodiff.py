"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations are recorded on the innermost active :class:`Tape` (entered with a
``with`` block). Outside a tape the same functions evaluate plain values, which
is how inference runs without bookkeeping overhead.

>>> x = Tensor(3.0, requires_grad=True)
>>> with Tape() as tape:
...     y = x * x
>>> tape.backward(y, [x])[0]
array(6.)
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "as_tensor", "grad", "add", "sub", "mul", "div", "neg", "matmul",
    "sum", "mean", "reshape", "transpose", "getitem", "concat", "relu",
    "square", "sqrt", "batchnorm", "affine_norm", "pseudo_huber", "rodrigues",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array that can participate in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one backward pass.

    A tape may be differentiated once; call :meth:`backward` with the scalar
    loss and the leaves of interest.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out, inputs, backward):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss, wrt):
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Leaves that do not participate in ``loss`` get an exact zero array.
        """
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise TapeError("backward() requires a scalar loss tensor")
        if not self.nodes:
            raise TapeError("backward() called on an empty tape")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for leaf in wrt:
            g = grads.get(id(leaf))
            out.append(np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64))
        self.nodes.clear()
        return out


def grad(fn, wrt):
    """Evaluate ``fn()`` on a fresh tape and return ``(value, gradients)``."""
    with Tape() as tape:
        loss = fn()
    return loss.item(), tape.backward(loss, wrt)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _make(data, inputs, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = _finite(np.asarray(data, dtype=np.float64), op)
    out.name = None
    tracked = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out.requires_grad = tracked
    if tracked:
        _ACTIVE[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        q = a.data / b.data
    return _make(q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * q / b.data, b.shape)), "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a):
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _make(r, (a,), lambda g: (g / (2.0 * r),), "sqrt")


def matmul(a, b):
    """Matrix product with numpy batching rules (operands of rank >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward, "matmul")


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def batchnorm(x, gamma, beta, eps=1e-5):
    """Normalize ``x`` (batch, features) with its own batch statistics.

    Returns ``(y, batch_mean, batch_var)``; the statistics are plain arrays for
    the caller's running averages.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: got x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[0]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    y = _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "batchnorm")
    return y, mu, var


def affine_norm(x, gamma, beta, mean_, var, eps=1e-5):
    """Normalize with fixed statistics (inference-mode batch norm)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean_) * inv
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta),
                 lambda g: (g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)),
                 "affine_norm")


def pseudo_huber(z, eps, axis=-1):
    """Pseudo-Huber norm of vectors laid out along ``axis``.

    ``eps * (sqrt(1 + (|z| / eps)^2) - 1)``, evaluated in a cancellation-free
    form so that tiny residuals keep full relative precision.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    z = as_tensor(z)
    sq = (z.data * z.data).sum(axis=axis)
    root = np.sqrt(1.0 + sq / (eps * eps))
    out = (sq / eps) / (root + 1.0)

    def backward(g):
        return (np.expand_dims(g / (eps * root), axis) * z.data,)

    return _make(out, (z,), backward, "pseudo_huber")


_SMALL_ANGLE = 1e-8
_SERIES_ANGLE = 1e-2


def _rodrigues_coeffs(t):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t."""
    t2 = t * t
    small = t < _SMALL_ANGLE
    safe = np.where(small, 1.0, t)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe) / safe
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * half * half)
    series = t < _SERIES_ANGLE
    s = np.where(series, 1.0, t)
    s2, s3 = s * s, s * s * s
    da = np.where(series, -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
                  (s * np.cos(s) - np.sin(s)) / s3)
    db = np.where(series, -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
                  (s * np.sin(s) - 2.0 * (1.0 - np.cos(s))) / (s2 * s2))
    return a, b, da, db


def hat_array(w):
    """Cross-product matrices for a stack of 3-vectors (plain numpy)."""
    w = np.asarray(w, dtype=np.float64)
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    return K


_GENERATORS = hat_array(np.eye(3))


def rodrigues_value_and_jacobian(theta, jacobian=True):
    """Rotation ``expm(hat(theta))`` and ``dR/dtheta_i`` stacked on axis -3."""
    theta = np.asarray(theta, dtype=np.float64)
    t = np.sqrt((theta * theta).sum(axis=-1))
    a, b, da, db = _rodrigues_coeffs(t)
    K = hat_array(theta)
    K2 = K @ K
    R = np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2
    if not jacobian:
        return R, None
    E = _GENERATORS
    Kx = K[..., None, :, :]
    dR = (da[..., None, None, None] * theta[..., :, None, None] * K[..., None, :, :]
          + a[..., None, None, None] * E
          + db[..., None, None, None] * theta[..., :, None, None] * K2[..., None, :, :]
          + b[..., None, None, None] * (E @ Kx + Kx @ E))
    return R, dR


def rodrigues(theta):
    """Differentiable ``expm(hat(theta))`` for a stack of axis-angle vectors."""
    theta = as_tensor(theta)
    if theta.shape[-1:] != (3,):
        raise ShapeError(f"rodrigues: expected trailing dimension 3, got {theta.shape}")
    R, dR = rodrigues_value_and_jacobian(theta.data, jacobian=theta.requires_grad and bool(_ACTIVE))

    def backward(g):
        return ((dR * g[..., None, :, :]).sum(axis=(-2, -1)),)

    return _make(R, (theta,), backward, "rodrigues")
