"""Minimal dense tensors with reverse-mode differentiation on top of numpy.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the recorded graph once in
reverse topological order. Broadcasting is deliberately narrow: operands of
a binary op must have equal shapes, or one must be a scalar, or one's shape
must equal a trailing suffix of the other's (leading-dimension expansion).
Anything else has to go through :func:`expand` explicitly.

Every forward result and every propagated gradient is checked for NaN/Inf.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from Python data."""
    global _DEFAULT_DTYPE
    old, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def _check(arr: np.ndarray, what: str) -> np.ndarray:
    # a single reduction catches NaN/Inf; only a non-finite sum needs the exact test
    if not math.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = _check(arr, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _raise_not_scalar():
    raise ValueError("item() needs a single-element tensor")


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(_check(np.asarray(data), op))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out._op = op
    return out


# ---------------------------------------------------------------- broadcasting

def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or len(a) == 0 or len(b) == 0:
        return True
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return True
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    return long[len(long) - len(short):] == short


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape} (only leading-dim broadcasting)")
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    v2 = v * v
    t = np.tanh(v * (GELU_C + GELU_C * GELU_A * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        du = GELU_C + 3.0 * GELU_C * GELU_A * v2
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _result(out, (x,), backward, "gelu")


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, gelu, relu."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "gelu": gelu, "relu": relu}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a [..., m, k] @ b [k, n]`` or a batched ``b [..., k, n]`` with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"batched matmul needs equal leading dims, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError("cannot L2-normalise a (near) zero row")
    y = x.data / norm
    return _result(y, (x,), lambda g: ((g - y * (g * y).sum(-1, keepdims=True)) / norm,),
                   "l2_normalize_rows")


def softmax(x: Tensor) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(-1, keepdims=True)),), "softmax")


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(-1, keepdims=True),), "log_softmax")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise ``max(x,0) - x*y + log(1 + exp(-|x|))``; targets are constants."""
    x = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise ValueError(f"targets {y.shape} do not match logits {x.shape}")
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (logits,), lambda g: (g * (_sigmoid(x) - y),), "bce_with_logits")


# ---------------------------------------------------------------- reductions & shape

def _axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")
    ax = _axis(x.ndim, axis)
    return _result(x.data.sum(axis=ax), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),), "sum")


def order_free_sum(x: Tensor, axis: int) -> Tensor:
    """Sum along ``axis`` after sorting the values there.

    The result is bit-identical under any permutation of that axis, which
    plain floating-point summation does not guarantee.
    """
    ax = _axis(x.ndim, axis)
    return _result(np.sort(x.data, axis=ax).sum(axis=ax), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),), "order_free_sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        return _result(np.asarray(x.data.mean()), (x,),
                       lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")
    ax = _axis(x.ndim, axis)
    n = x.shape[ax]
    return _result(x.data.mean(axis=ax), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),), "mean")


mean_over_axis = mean


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = _axis(xs[0].ndim, axis)
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


concat_last_dim = concat


def reductions(op: str, *inputs, **kw) -> Tensor:
    """Dispatch by name: mean_over_axis, sum, concat_last_dim, l2_normalize_rows, softmax_last_dim."""
    table = {"mean_over_axis": mean, "sum": sum, "concat_last_dim": concat,
             "l2_normalize_rows": l2_normalize_rows, "softmax_last_dim": softmax}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](*inputs, **kw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)
    lead = len(shape) - x.ndim

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=keep, keepdims=True) if keep else g,)

    return _result(out.copy(), (x,), backward, "expand")


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]
    basic = _is_basic(key)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out), (x,), backward, "index")


def take(x: Tensor, idx: Sequence[int], axis: int = -1) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    ax = _axis(x.ndim, axis)
    out = np.take(x.data, idx, axis=ax)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result(out, (x,), backward, "take")


# ---------------------------------------------------------------- stochastic

def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, accumulate: bool = False) -> list[Tensor]:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    Leaf gradients are reset first unless ``accumulate`` is set, so calling
    this twice on the same graph gives the same result. Returns the leaves.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("no trainable leaves in the graph")
    order = _topo_order(loss)
    leaves = [t for t in order if t._backward is None]
    if not leaves:
        raise GraphError("no trainable leaves in the graph")
    if not accumulate:
        for leaf in leaves:
            leaf.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check(pg, f"gradient of {node._op}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class NonDeterministicError(RuntimeError):
    pass


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated from scratch for every probe, so anything stochastic
    inside it has to be re-seeded per call. Relative error per coordinate is
    ``|a - n| / (max(|a|, |n|) + 1e-8)``.
    """
    first = f()
    second = f()
    if not np.array_equal(first.data, second.data):
        raise NonDeterministicError("f returned different values for identical inputs")
    zero_grad(params)
    backward(first)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)  # a view, so probes edit the parameter in place
        ga = a.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(f().data)
            flat[i] = keep - eps
            down = float(f().data)
            flat[i] = keep
            num = (up - down) / (2.0 * eps)
            err = abs(ga[i] - num) / (max(abs(ga[i]), abs(num)) + 1e-8)
            worst = max(worst, err)
    return worst
