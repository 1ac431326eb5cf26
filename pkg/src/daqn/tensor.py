"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable primitive records its inputs and a small context on the
output tensor. :func:`backward` orders the reachable graph into a
:class:`Tape` and replays the backward rules in reverse. Backward rules live in
the :data:`BACKWARD` registry keyed by op name, so a rule can be swapped (for
instance by the gradient-check harness tests) without touching the forward.

Broadcasting is deliberately narrow. Supported operand pairs are:

* equal shapes,
* a scalar (size-1) operand against anything,
* a trailing-suffix operand (bias vectors against batched rows),
* equal rank where the smaller operand has extent 1 in the last axis
  (keepdims reductions such as a ``(B, 1)`` column against ``(B, A)``).

Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_op", "_ctx")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._op: str | None = None
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self._op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._ctx = None
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._ctx = ctx
    else:
        out.requires_grad = False
        out._parents = ()
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if int(np.prod(sa)) == 1 and len(sa) <= len(sb):
        return sb
    if int(np.prod(sb)) == 1 and len(sb) <= len(sa):
        return sa
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return big
    if len(sa) == len(sb) and len(sa) >= 1 and sa[:-1] == sb[:-1] and 1 in (sa[-1], sb[-1]):
        return sa if sb[-1] == 1 else sb
    raise DimensionError(f"unsupported broadcast between shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives

BACKWARD: dict[str, Callable] = {}


def _rule(name: str):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _make(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_bw(out, g):
    a, b = out._parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _make(a.data - b.data, "sub", (a, b))


@_rule("sub")
def _sub_bw(out, g):
    a, b = out._parents
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _make(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_bw(out, g):
    a, b = out._parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), c)


@_rule("scale")
def _scale_bw(out, g):
    return (g * out._ctx,)


def tanh(a: Tensor) -> Tensor:
    return _make(np.tanh(a.data), "tanh", (a,))


@_rule("tanh")
def _tanh_bw(out, g):
    return (g * (1.0 - out.data * out.data),)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    return _make(0.5 * (1.0 + np.tanh(0.5 * a.data)), "sigmoid", (a,))


@_rule("sigmoid")
def _sigmoid_bw(out, g):
    return (g * out.data * (1.0 - out.data),)


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0.0), "relu", (a,))


@_rule("relu")
def _relu_bw(out, g):
    (a,) = out._parents
    return (g * (a.data > 0.0),)


def exp(a: Tensor) -> Tensor:
    return _make(np.exp(a.data), "exp", (a,))


@_rule("exp")
def _exp_bw(out, g):
    return (g * out.data,)


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), "log", (a,))


@_rule("log")
def _log_bw(out, g):
    (a,) = out._parents
    return (g / a.data,)


def rsqrt(a: Tensor) -> Tensor:
    return _make(1.0 / np.sqrt(a.data), "rsqrt", (a,))


@_rule("rsqrt")
def _rsqrt_bw(out, g):
    return (-0.5 * g * out.data ** 3,)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "rsqrt": rsqrt,
}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch an elementwise primitive by tag (``"tanh"``, ``"add"``, ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is either a
    2-D matrix shared across the batch or has the same batch axes as ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    return _make(np.matmul(a.data, b.data), "matmul", (a, b))


@_rule("matmul")
def _matmul_bw(out, g):
    a, b = out._parents
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    if b.ndim == 2:
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return ga, gb


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), (axis, keepdims))


@_rule("sum")
def _sum_bw(out, g):
    (a,) = out._parents
    axis, keepdims = out._ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,))


@_rule("reshape")
def _reshape_bw(out, g):
    (a,) = out._parents
    return (g.reshape(a.shape),)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), axes)


@_rule("transpose")
def _transpose_bw(out, g):
    return (g.transpose(np.argsort(out._ctx)),)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, (ax, sizes))


@_rule("concat")
def _concat_bw(out, g):
    ax, sizes = out._ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    return _make(np.ascontiguousarray(a.data[..., start:stop]), "slice_last", (a,), (start, stop))


@_rule("slice_last")
def _slice_last_bw(out, g):
    (a,) = out._parents
    start, stop = out._ctx
    full = np.zeros(a.shape)
    full[..., start:stop] = g
    return (full,)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[i, index[i]]`` for a 2-D tensor; returns shape ``(N,)``."""
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"take_rows needs (N, A) and (N,), got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])
    return _make(a.data[rows, index], "take_rows", (a,), index)


@_rule("take_rows")
def _take_rows_bw(out, g):
    (a,) = out._parents
    full = np.zeros(a.shape)
    full[np.arange(a.shape[0]), out._ctx] = g
    return (full,)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _make(e / e.sum(axis=axis, keepdims=True), "softmax", (x,), axis)


@_rule("softmax")
def _softmax_bw(out, g):
    y = out.data
    return (y * (g - (g * y).sum(axis=out._ctx, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _make(z - lse, "log_softmax", (x,), axis)


@_rule("log_softmax")
def _log_softmax_bw(out, g):
    p = np.exp(out.data)
    return (g - p * g.sum(axis=out._ctx, keepdims=True),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return _make(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), (xhat, inv))


@_rule("layer_norm")
def _layer_norm_bw(out, g):
    x, gain, bias = out._parents
    xhat, inv = out._ctx
    d = x.shape[-1]
    gx_hat = g * gain.data
    gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=lead).reshape(d), g.sum(axis=lead).reshape(d)


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Reverse-replayable record of the primitives that produced ``root``.

    ``nodes`` is in forward (topological) order.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def ops(self) -> list[str]:
        return [n._op for n in self.nodes if n._op is not None]

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = BACKWARD[node._op](node, g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                if pg.shape != p.shape:
                    raise DimensionError(
                        f"backward rule {node._op!r} produced gradient {pg.shape} for input {p.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_output(loss).replay(loss, np.ones(loss.shape))


# ---------------------------------------------------------------------------
# initialisation and optimisation


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class AdamState:
    def __init__(self, shapes: Iterable[tuple[int, ...]]):
        shapes = list(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state have different lengths")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam shapes disagree: param {p.shape}, grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over a list of parameter tensors with optional global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState(p.shape for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        norm = float(np.sqrt(np.sum([np.vdot(g, g) for g in grads])))
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
            grads = [g * factor for g in grads]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps)
        return norm
