"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a closure that pushes the output
gradient back to them.  ``backward`` walks the recorded graph in reverse
topological order, accumulating gradients with ``+=`` where a value fans out.

Only the primitives needed by the scoring network are provided, and
broadcasting is limited to what numpy does for elementwise ops.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from finite inputs."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(_lift(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    # a sum is non-finite whenever any element is; the full scan runs only then
    if not math.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op!r}")
    needs = False
    for p in parents:
        if p.requires_grad:
            needs = True
            break
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        _accum(a, unbroadcast(g, a.shape))
        _accum(b, unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), "scale", lambda g: _accum(a, g * c))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), "reciprocal", lambda g: _accum(a, -g * out * out))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), "square", lambda g: _accum(a, 2.0 * g * a.data))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), "relu", lambda g: _accum(a, g * pos))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: _accum(a, g * out))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), "log", lambda g: _accum(a, g / a.data))


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(out, (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[ax] for ax in axes)
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(out, (a,), "transpose", lambda g: _accum(a, np.transpose(g, inv)))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), "swapaxes",
                   lambda g: _accum(a, np.swapaxes(g, i, j)))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _result(a.data[idx], (a,), "slice", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis if axis >= 0 else axis + tensors[0].ndim + 1

    def bw(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=ax))

    return _result(np.stack([t.data for t in tensors], axis=ax), tensors, "stack", bw)


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), "matmul", bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x (..., d_in), w (d_in, d_out), b (d_out,)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*x.shape[:-1], w.shape[1])
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))

    return _result(out, parents, "linear", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), "softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``.

    ``gamma`` and ``beta`` may carry extra leading axes that broadcast against
    ``x`` (used for per-aspect heads).
    """
    d = x.shape[-1]
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * (1.0 / d)
    var = (xc * xc).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = np.broadcast_to(g * gamma.data, out.shape)
            if gx.shape != x.shape:
                gx = unbroadcast(gx, x.shape)
            _accum(x, inv * (gx - gx.sum(axis=-1, keepdims=True) * (1.0 / d)
                             - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d))

    return _result(out, (x, gamma, beta), "layer_norm", bw)


def conv1d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation along axis -2 with zero 'same' padding.

    x: (..., T, d_in); kernels: (k, d_in, d_out); bias: (d_out,).
    """
    k, d_in, d_out = kernels.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d_same needs an odd kernel size, got {k}")
    if x.shape[-1] != d_in:
        raise ValueError(f"conv1d_same channel mismatch: {x.shape} vs kernels {kernels.shape}")
    T = x.shape[-2]
    pad = (k - 1) // 2
    xp = np.zeros((*x.shape[:-2], T + 2 * pad, d_in))
    xp[..., pad:pad + T, :] = x.data
    # windows[..., t, j, :] = xp[..., t + j, :]
    windows = np.stack([xp[..., j:j + T, :] for j in range(k)], axis=-2)
    flat_w = kernels.data.reshape(k * d_in, d_out)
    win2 = windows.reshape(*windows.shape[:-2], k * d_in)
    out = win2 @ flat_w + bias.data

    def bw(g):
        if kernels.requires_grad:
            gw = win2.reshape(-1, k * d_in).T @ g.reshape(-1, d_out)
            _accum(kernels, gw.reshape(k, d_in, d_out))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d_out).sum(axis=0))
        if x.requires_grad:
            gwin = (g @ flat_w.T).reshape(*g.shape[:-1], k, d_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + T, :] += gwin[..., j, :]
            _accum(x, gxp[..., pad:pad + T, :])

    return _result(out, (x, kernels, bias), "conv1d_same", bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _result(table.data[ids], (table,), "embedding", bw)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of x (B, T, D) restricted to rows where mask (B, T) is 1."""
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ValueError("masked_mean over an all-masked row")
    w = (m / count)[..., None]
    out = (x.data * w).sum(axis=-2)
    return _result(out, (x,), "masked_mean", lambda g: _accum(x, g[..., None, :] * w))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or rate == 0."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    # 16-bit uniforms: keep-probability resolution 2**-16, rescaled by the
    # exact threshold so the mask still has unit mean
    thresh = round((1.0 - rate) * 65536)
    bits = np.frombuffer(rng.bytes(2 * x.data.size), dtype=np.uint16).reshape(x.shape)
    m = (bits < thresh) * (65536.0 / thresh)
    return _result(x.data * m, (x,), "dropout", lambda g: _accum(x, g * m))


def attention(q: Tensor, k: Tensor, v: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``additive_mask`` broadcasts against the (…, Tq, Tk) score matrix and
    holds 0 for visible keys and ``MASK_VALUE`` for hidden ones.
    """
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if additive_mask is not None:
        scores = add(scores, Tensor(additive_mask))
    return matmul(softmax(scores, axis=-1), v)


def key_mask(mask: np.ndarray) -> np.ndarray:
    """(B, T) 0/1 mask -> (B, 1, T) additive mask for attention scores."""
    return np.where(np.asarray(mask)[:, None, :] > 0, 0.0, MASK_VALUE)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    The denominator of each relative error is ``max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = f().item()
            p.data[idx] = orig - h
            down = f().item()
            p.data[idx] = orig
            num = (up - down) / (2 * h)
            a = analytic[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
