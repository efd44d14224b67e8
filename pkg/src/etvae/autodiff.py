"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` and, when any input requires a
gradient, records a backward closure.  The closure receives the upstream
gradient plus a tuple of flags telling which parents need a gradient, and
returns one array (or ``None``) per parent.

Broadcasting is deliberately narrow.  A rank-1 tensor of length ``C`` may be
combined with

* a ``C x H x W`` (or ``N x C x H x W``) tensor, expanding over the spatial axes;
* any tensor whose trailing extent is ``C`` (dense-layer bias).

Python scalars are accepted as constants.  Anything else must go through the
explicit :func:`broadcast_to`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-dimensional float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(
    data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str
) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor requiring grad.

    Gradients are propagated through a call-local table so each node is visited
    exactly once per call; only the final totals are added into ``.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        needs = tuple(p.requires_grad for p in node._parents)
        parent_grads = node._backward(g, needs)
        for parent, pg, need in zip(node._parents, parent_grads, needs):
            if not need or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=np.float64, copy=True).reshape(node.data.shape)
        else:
            node.grad = node.grad + g


# ---------------------------------------------------------------------------
# elementwise


def _binary_layout(a: np.ndarray, b: np.ndarray) -> str:
    """Classify how ``b`` lines up against ``a``: same, channel, trailing, scalar."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if b.ndim == 1:
        if a.ndim in (3, 4) and a.shape[-3] == b.shape[0]:
            return "channel"
        if a.ndim >= 1 and a.shape[-1] == b.shape[0]:
            return "trailing"
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _expand(b: np.ndarray, like: np.ndarray, layout: str) -> np.ndarray:
    if layout == "channel":
        return b.reshape(-1, 1, 1)
    return b


def _reduce(g: np.ndarray, like: np.ndarray, layout: str) -> np.ndarray:
    if layout == "same":
        return g
    if layout == "scalar":
        return np.asarray(g.sum())
    if layout == "channel":
        axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
        return g.sum(axis=axes)
    return g.reshape(-1, like.shape[0]).sum(axis=0)


def _binary(a, b, kind: str) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.shape != b.data.shape and b.data.ndim > a.data.ndim:
        # keep the larger operand first so the layout rules apply
        if kind in ("add", "mul"):
            a, b = b, a
    layout = _binary_layout(a.data, b.data)
    bd = _expand(b.data, a.data, layout)
    ad = a.data
    if kind == "add":
        out = ad + bd

        def bw(g, needs):
            return g, _reduce(g, b.data, layout) if needs[1] else None

    elif kind == "sub":
        out = ad - bd

        def bw(g, needs):
            return g, -_reduce(g, b.data, layout) if needs[1] else None

    elif kind == "mul":
        out = ad * bd

        def bw(g, needs):
            ga = g * bd if needs[0] else None
            gb = _reduce(g * ad, b.data, layout) if needs[1] else None
            return ga, gb

    elif kind == "div":
        out = ad / bd

        def bw(g, needs):
            ga = g / bd if needs[0] else None
            gb = _reduce(-g * ad / (bd * bd), b.data, layout) if needs[1] else None
            return ga, gb

    else:  # pragma: no cover - guarded by callers
        raise ValueError(kind)
    return _make(out, (a, b), bw, kind)


def add(a, b) -> Tensor:
    return _binary(a, b, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, needs: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, needs: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError(f"log of negative value (min {a.data.min():g})")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g, needs: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g, needs: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g, needs: (g * out * (1.0 - out),), "sigmoid")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g, needs: (2.0 * g * a.data,), "square")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g, needs: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g, needs: (-g * np.sin(a.data),), "cos")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g, needs: (g * _sigmoid(a.data),), "softplus")


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Angle of the vector (x, y), wrapped into [0, 2*pi)."""
    out = np.mod(np.arctan2(y.data, x.data), 2.0 * np.pi)
    # the tiny floor keeps the gradient finite at the origin
    r2 = x.data * x.data + y.data * y.data + 1e-300

    def bw(g, needs):
        return g * x.data / r2, -g * y.data / r2

    return _make(out, (y, x), bw, "atan2")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch a pointwise operation by name."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)
    shape = a.data.shape

    def bw(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(sum(a, axis=axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),), "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums over expanded axes."""
    old = a.data.shape
    out = np.broadcast_to(a.data, shape)

    def bw(g, needs):
        lead = g.ndim - len(old)
        gg = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and gg.shape[i] != 1)
        if axes:
            gg = gg.sum(axis=axes, keepdims=True)
        return (gg,)

    return _make(out, (a,), bw, "broadcast")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape = a.data.shape

    def bw(g, needs):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def bw(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 product (m x k) @ (k x n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer ``x @ weight.T + bias`` for ``x`` of shape (batch, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd = x.data
    out = xd @ weight.data.T + bias.data

    def bw(g, needs):
        gx = g @ weight.data if needs[0] else None
        gw = g.T @ xd if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "linear")


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, padding: int, mode: str) -> np.ndarray:
    if padding == 0:
        return x
    lead = [(0, 0)] * (x.ndim - 2)
    if mode == "zero":
        return np.pad(x, lead + [(padding, padding), (padding, padding)])
    x = np.pad(x, lead + [(0, 0), (padding, padding)], mode="wrap")
    return np.pad(x, lead + [(padding, padding), (0, 0)])


def _unpad(g: np.ndarray, padding: int, mode: str, width: int) -> np.ndarray:
    if padding == 0:
        return g
    p = padding
    g = g[..., p:-p, :]
    if mode == "zero":
        return g[..., p:-p]
    core = g[..., p : p + width].copy()
    # fold the wrapped columns back onto their sources
    left = g[..., :p]
    right = g[..., p + width :]
    for i in range(p):
        core[..., (width - p + i) % width] += left[..., i]
        core[..., i % width] += right[..., i]
    return core


def conv2d(
    input: Tensor,
    kernels: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zero",
) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``input`` is ``C_in x H x W`` or batched ``N x C_in x H x W``.  With
    ``padding_mode="circular_width"`` the width axis wraps around and the
    height axis is zero-padded.
    """
    if padding_mode not in ("zero", "circular_width"):
        raise ValueError(f"unknown padding_mode {padding_mode!r}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    single = input.ndim == 3
    x = input.data[None] if single else input.data
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks, input {input.shape}, kernels {kernels.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernels expect {k_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if padding_mode == "circular_width" and padding > w:
        raise ShapeError(f"conv2d: circular padding {padding} exceeds width {w}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = _pad(x, padding, padding_mode)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # patches laid out channel-major: (c_in, kh, kw, n, ho, wo)
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c_in, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c_in * kh * kw, n * ho * wo)
    kmat = kernels.data.reshape(c_out, -1)
    out_t = (kmat @ cols).reshape(c_out, n, ho, wo) + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out_t.transpose(1, 0, 2, 3))

    def bw(g, needs):
        g4 = g[None] if single else g
        g_t = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gk = (g_t @ cols.T).reshape(kernels.shape) if needs[1] else None
        gb = g_t.sum(axis=1) if needs[2] else None
        gx = None
        if needs[0]:
            dcols = (kmat.T @ g_t).reshape(c_in, kh, kw, n, ho, wo)
            dxt = np.zeros((c_in, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = _unpad(dxt.transpose(1, 0, 2, 3), padding, padding_mode, w)
            gx = np.ascontiguousarray(gx)
            if single:
                gx = gx[0]
        return gx, gk, gb

    return _make(out[0] if single else out, (input, kernels, bias), bw, "conv2d")


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the last two axes."""
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = a.data.shape

    def bw(g, needs):
        g = g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (a,), bw, "upsample2x")


# ---------------------------------------------------------------------------
# fused losses


def log_softmax(logits: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g, needs):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), bw, "log_softmax")


def softmax(logits: Tensor) -> Tensor:
    return exp(log_softmax(logits))


def bernoulli_log_likelihood(logits: Tensor, target: np.ndarray, axis=None) -> Tensor:
    """Sum of ``t*log(p) + (1-t)*log(1-p)`` with ``p = sigmoid(logits)``.

    ``target`` is a constant array in [0, 1]; ``axis`` selects the summed axes.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    l = logits.data
    per = target * l - np.logaddexp(0.0, l)
    out = per.sum(axis=axis)
    shape = l.shape

    def bw(g, needs):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape) * (target - _sigmoid(l)),)

    return _make(out, (logits,), bw, "bernoulli_ll")
