"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` replays those closures in reverse topological order, summing
gradients where a tensor feeds several consumers.

Arrays are plain row-major numpy arrays. 64-bit is the default; 32-bit storage
is allowed for training but :func:`grad_check` always works in 64-bit.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "tensor",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "elementwise",
    "add_constant",
    "softmax",
    "layer_norm",
    "reshape",
    "transpose",
    "embedding",
    "dropout",
    "tensor_sum",
    "cross_entropy",
    "token_cross_entropy",
    "topological_order",
    "backward",
    "zero_grad",
    "grad_check",
    "no_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, double backward)."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class Tensor:
    """A numpy array that participates in a differentiation graph.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`. Intermediate tensors only keep their gradient when
    :meth:`retain_grad` was called on them before the backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_retain", "_done")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._retain = False
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def retain_grad(self):
        """Keep this tensor's gradient after backward even if it is not a leaf."""
        self._retain = True
        return self

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, dtype=np.float64):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, dtype=data.dtype, _op=op)
    return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=parents, _backward=backward_fn, _op=op)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# operations


def matmul(a, b):
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for x of shape (..., k), weight (k, n), bias (n,)."""
    k, n = weight.shape
    if x.shape[-1] != k:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is not None and bias.shape != (n,):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    lead = x.shape[:-1]
    # flatten to one 2-D GEMM; numpy would otherwise loop over the leading axes
    x2 = x.data.reshape(-1, k)
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(lead + (k,))
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "linear")


def add(a, b):
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "scale": scale}


def elementwise(op, *operands):
    """Dispatch by name to add, sub, mul, relu or scale (scale takes a float)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*operands)


def add_constant(a, const):
    """Add a non-differentiable array (e.g. an additive attention mask).

    ``const`` must broadcast to ``a.shape`` without changing it.
    """
    const = np.asarray(const)
    try:
        shape = np.broadcast_shapes(a.shape, const.shape)
    except ValueError:
        shape = None
    if shape != a.shape:
        raise ShapeError(f"add_constant: constant of shape {const.shape} does not broadcast to {a.shape}")
    return _make(a.data + const.astype(a.dtype, copy=False), (a,), lambda g: (g,), "add_constant")


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for tensor with {x.ndim} dims")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input shape {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    n, d = table.shape

    def bw(g):
        gt = np.zeros((n, d), dtype=g.dtype)
        np.add.at(gt, ids.ravel(), g.reshape(-1, d))
        return (gt,)

    return _make(table.data[ids], (table,), bw, "embedding")


def dropout(x, rate, rng):
    """Inverted dropout. Identity when ``rate == 0``."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def tensor_sum(x):
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def cross_entropy(logits, targets, weights=None, smoothing=0.0):
    """Mean token cross-entropy over positions with nonzero weight.

    ``logits`` has shape (..., V); ``targets`` the leading shape. ``weights``
    (same shape as targets) selects which positions count.
    """
    nll, _ = token_cross_entropy(logits, targets, weights, smoothing)
    return nll


def token_cross_entropy(logits, targets, weights=None, smoothing=0.0):
    """Like :func:`cross_entropy` but also returns the per-position NLL array."""
    v = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target id out of range [0, {v})")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no positions carry weight (empty batch)")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    tok = -picked
    if smoothing:
        tok = (1.0 - smoothing) * tok - smoothing * logp.mean(axis=-1)
    # divide in float64 then cast, so float32 runs keep float32 gradients
    wn = (w / total).astype(logp.dtype)
    loss = np.asarray((tok * wn).sum(), dtype=logp.dtype)

    def bw(g):
        p = np.exp(logp)
        q = np.zeros_like(p)
        np.put_along_axis(q, targets[..., None], 1.0, axis=-1)
        if smoothing:
            q = (1.0 - smoothing) * q + smoothing / v
        return ((p - q) * wn[..., None] * g,)

    return _make(loss, (logits,), bw, "cross_entropy"), tok


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Back-propagate from a scalar ``loss``.

    Leaves accumulate into ``.grad``; retained intermediates get their
    gradient assigned. The graph is released afterwards, so a second call on
    the same loss raises :class:`GraphError`; call :func:`zero_grad` and
    rebuild the graph instead.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward: graph already back-propagated; reset gradients and recompute the loss")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._done = True
    return loss


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, x, eps=1e-6):
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps the tensor(s) ``x`` to a scalar tensor. ``x`` may be a single
    tensor or a sequence of tensors; all are converted to 64-bit in place for
    the duration of the check. For each coordinate the error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.array(t.data, dtype=np.float64)
        t.requires_grad = True
        t.grad = None

    def value():
        out = f(*xs) if not isinstance(x, Tensor) else f(x)
        v = float(np.asarray(out.data).reshape(()))
        if not np.isfinite(v):
            raise NonFiniteError("grad_check: function value is not finite")
        return out, v

    out, _ = value()
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    for a in analytic:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("grad_check: analytic gradient is not finite")

    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                _, fp = value()
                flat[i] = orig - eps
                _, fm = value()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(af[i] - num) / max(1.0, abs(af[i]), abs(num))
                worst = max(worst, err)
    for t in xs:
        t.grad = None
    return float(worst)
