"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays.  While a :class:`Tape` is active, every
operation that touches a tensor with ``requires_grad`` appends a node holding
its backward closure; :func:`backward` replays the nodes in reverse order.
Without an active tape nothing is recorded.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Records differentiable operations inside a ``with`` block."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    if _ACTIVE and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append((out, backward_fn))
    return out


def _accum(t, g, fresh: bool = False):
    """Add ``g`` into ``t.grad``; ``fresh`` means ``g`` is a private array we may keep."""
    if not isinstance(t, Tensor) or not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g, fresh = _unbroadcast(g, t.data.shape), True
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse pass from a scalar ``loss`` over everything recorded on ``tape``."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    for out, _ in tape.nodes:
        out.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        if out.grad is not None:
            fn(out.grad)


def grads(params) -> list[np.ndarray]:
    """Gradients of ``params``; zeros for parameters the loss did not use."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_accum(a, g), _accum(b, g)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_accum(a, g), _accum(b, -g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_accum(a, g * b.data, True), _accum(b, g * a.data, True)))


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = Tensor(x.data * cdf)

    def fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        _accum(x, g * (cdf + x.data * pdf), True)

    return _record(out, (x,), fn)


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)
    return _record(out, (x,), lambda g: _accum(x, g * sig * (1.0 + x.data * (1.0 - sig)), True))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data)

    def fn(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2), True)
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g, True)

    return _record(out, (a, b), fn)


def affine(x, W, b=None) -> Tensor:
    """y = x @ W + b over the last axis of x."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"affine: input width {x.shape[-1]} does not match weight {W.shape}")
    lead = x.shape[:-1]
    y = (x.data.reshape(-1, x.shape[-1]) @ W.data).reshape(lead + (W.shape[1],))
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"affine: bias shape {b.shape} does not match weight {W.shape}")
        y = y + b.data
    out = Tensor(y)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accum(x, (g2 @ W.data.T).reshape(x.shape), True)
        if W.requires_grad:
            _accum(W, x.data.reshape(-1, x.shape[-1]).T @ g2, True)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0), True)

    return _record(out, (x, W, b), fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def fn(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0), True)
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            _accum(x, inv / n * (n * gx - gx.sum(-1, keepdims=True)
                                 - xhat * (gx * xhat).sum(-1, keepdims=True)), True)

    return _record(out, (x, gamma, beta), fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    return _record(out, (x,), lambda g: _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)), True))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    inv = np.argsort(axes)
    return _record(out, (x,), lambda g: _accum(x, np.transpose(g, inv)))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _record(out, ts, fn)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data[idx])

    basic = _is_basic_index(idx)

    def fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(x, full, True)

    return _record(out, (x,), fn)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.sum(x.data))
    return _record(out, (x,), lambda g: _accum(x, np.broadcast_to(g, x.shape).copy(), True))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.mean(x.data))
    n = x.data.size
    return _record(out, (x,), lambda g: _accum(x, np.broadcast_to(g / n, x.shape).copy(), True))


def mse(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shapes differ {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    out = Tensor(np.mean(d * d))
    n = d.size

    def fn(g):
        _accum(pred, g * 2.0 * d / n, True)
        _accum(target, -g * 2.0 * d / n, True)

    return _record(out, (pred, target), fn)
