"""Dense N-D arrays with tape-based reverse-mode differentiation.

Images are stored channel-last (N, H, W, C). Every op that touches a tensor
with ``requires_grad`` records itself on the active :class:`Tape`; calling
:func:`backward` on a scalar walks that tape in reverse and accumulates
gradients into the leaves.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of executed ops. Use as a context manager to scope a graph."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def record(self, node: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape:
    stack = _stack()
    if stack:
        return stack[-1]
    tape = getattr(_local, "default", None)
    if tape is None or tape.consumed:
        tape = _local.default = Tape()
    return tape


class no_grad:
    """Context in which new ops record nothing and their outputs need no gradient.

    Inference wraps its forward passes in this. Otherwise every graph would
    stay alive on the default tape, which only a backward pass releases.
    """

    def __enter__(self):
        _local.disabled = getattr(_local, "disabled", 0) + 1
        return self

    def __exit__(self, *exc):
        _local.disabled -= 1
        return False


def grad_enabled() -> bool:
    return not getattr(_local, "disabled", 0)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = active_tape()
        out._tape.record(out)
    else:
        out._parents = ()
        out._backward = None
        out._tape = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make(out, (a,), backward, "sqrt")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg = a.data < 0
    em1 = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(neg, alpha * em1, a.data)

    def backward(g):
        return (g * np.where(neg, alpha * (em1 + 1.0), 1.0),)

    return _make(out, (a,), backward, "elu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def dropout(a, keep: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/keep so eval is the identity."""
    a = as_tensor(a)
    if not train or keep >= 1.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(a.shape) < keep) / keep
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- reductions / shape


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / n)


def l2_norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is zero."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def backward(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.expand_dims(g, axis) * np.where(o > 0, a.data / safe, 0.0),)

    return _make(out, (a,), backward, "l2_norm")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (default: the channel axis)."""
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, ts, backward, "concat")


# ---------------------------------------------------------------- linear algebra / layers


def matmul(a, b) -> Tensor:
    """``a`` of shape (..., K) times ``b`` of shape (K, M)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def affine(a, weight, bias) -> Tensor:
    """Per-channel scale and shift over the last axis."""
    a, weight, bias = as_tensor(a), as_tensor(weight), as_tensor(bias)
    c = a.shape[-1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"affine: input {a.shape} vs scale {weight.shape} / bias {bias.shape}")
    out = a.data * weight.data + bias.data
    red = tuple(range(a.ndim - 1))

    def backward(g):
        return g * weight.data, (g * a.data).sum(axis=red), g.sum(axis=red)

    return _make(out, (a, weight, bias), backward, "affine")


def global_avg_pool(a) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N,H,W,C), got {a.shape}")
    n, h, w, c = a.shape
    out = a.data.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), a.shape).copy(),)

    return _make(out, (a,), backward, "global_avg_pool")


def _conv_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            return 0, 0, 0
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"conv2d: unknown padding {padding!r}")


def conv2d(x, w, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation. ``x`` is (N, H, W, Cin); ``w`` is (kh, kw, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, pt, pb = _conv_geometry(h, kh, stride, padding)
    wo, pl, pr = _conv_geometry(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")

    if kh == 1 and kw == 1 and not (pt or pb or pl or pr):
        xs = x.data[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :]
        w2 = w.data[0, 0]
        out = xs @ w2

        def backward(g):
            gx = g @ w2.T
            if stride != 1:
                full = np.zeros_like(x.data)
                full[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :] = gx
                gx = full
            gw = (xs.reshape(-1, cin).T @ g.reshape(-1, cout)).reshape(w.shape)
            return gx, gw

        return _make(out, (x, w), backward, "conv2d")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    cols = np.empty((n, ho, wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + he : stride, j : j + we : stride, :]
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + he : stride, j : j + we : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pt : pt + h, pl : pl + wd, :]
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


# ---------------------------------------------------------------- backward


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf reachable from ``root``.

    Returns a mapping leaf -> gradient of this pass. The tape that recorded the
    forward pass is consumed.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    if root._tape is None:
        return _leaf_only(root)
    tape = root._tape
    if tape.consumed:
        raise TapeError("backward: no recorded forward pass (tape already consumed)")
    nodes = tape.nodes
    try:
        end = next(i for i in range(len(nodes) - 1, -1, -1) if nodes[i] is root)
    except StopIteration:
        raise TapeError("backward: root is not on its tape") from None

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[int, Tensor] = {}
    result: dict[int, np.ndarray] = {}
    for node in reversed(nodes[: end + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        pgrads = node._backward(g)
        for parent, pg in zip(node._parents, pgrads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if parent._tape is None:
                leaves[key] = parent
                result[key] = result[key] + pg if key in result else np.array(pg, dtype=DTYPE)
            elif key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    tape.consumed = True
    tape.nodes = []
    out = {}
    for key, g in result.items():
        leaf = leaves[key]
        g = g.reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def _leaf_only(root: Tensor) -> dict[Tensor, np.ndarray]:
    g = np.ones(root.shape)
    root.grad = g.copy() if root.grad is None else root.grad + g
    return {root: g}


# ---------------------------------------------------------------- finite differences


def grad_check(f: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``point`` is an array or a sequence of arrays; ``f`` takes one Tensor per array.
    """
    arrays = [np.array(point, dtype=DTYPE)] if isinstance(point, np.ndarray) or np.isscalar(point) else [
        np.array(p, dtype=DTYPE) for p in point
    ]
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    with Tape():
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = f(*leaves)
        grads = backward(out)
    analytic = [grads.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]

    def value(args):
        with Tape():
            v = f(*[Tensor(a) for a in args])
        val = float(np.asarray(v.data).reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFiniteError("grad_check: f is non-finite at a perturbed point")
        return val

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus, minus = [a.copy() for a in arrays], [a.copy() for a in arrays]
            plus[k].reshape(-1)[i] += step
            minus[k].reshape(-1)[i] -= step
            numeric = (value(plus) - value(minus)) / (2 * step)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
