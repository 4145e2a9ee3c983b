"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the primitives needed by the toy transformer, the attribution methods and
featurizer training are provided. Every primitive returns its output together
with a vector-Jacobian product closure; :func:`apply_primitive` records a tape
node whenever any input requires a gradient.
"""

from __future__ import annotations

import itertools
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Tensor",
    "Tape",
    "GradCheckReport",
    "apply_primitive",
    "backward",
    "finite_difference_check",
    "tensor",
    "PRIMITIVES",
]

CHECK_FINITE = True
GELU_C = math.sqrt(2.0 / math.pi)

_sequence = itertools.count()


class AutodiffError(ValueError):
    """Raised for invalid autodiff usage (non-scalar loss, non-finite input)."""


class ShapeError(AutodiffError):
    pass


class Node:
    __slots__ = ("op", "inputs", "_output", "vjp", "seq")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        # weak: a strong link would form a Tensor <-> Node cycle that only the
        # cyclic collector frees, letting large intermediates pile up
        self._output = weakref.ref(output)
        self.vjp = vjp
        self.seq = next(_sequence)

    @property
    def output(self):
        return self._output()

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=float(other))
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=float(other))
        return apply_primitive("mul", [other, self])

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], factor=1.0 / float(other))
        return apply_primitive("div", [self, other])

    def __rtruediv__(self, other):
        return apply_primitive("div", [other, self])

    def __neg__(self):
        return apply_primitive("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_primitive("matmul", [other, self])

    def __getitem__(self, index):
        return apply_primitive("slice", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_primitive("transpose", [self], axes=axes or None)

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return apply_primitive("transpose", [self], axes=tuple(axes))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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


def _broadcast_shape(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {list(shapes)}") from None


# primitives: each takes raw arrays (+ attrs) and returns (out, vjp) where
# vjp(g) gives one gradient (or None) per input.

def _p_add(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _p_sub(a, b):
    _broadcast_shape("sub", a.shape, b.shape)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _p_mul(a, b):
    _broadcast_shape("mul", a.shape, b.shape)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _p_div(a, b):
    _broadcast_shape("div", a.shape, b.shape)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _p_scale(x, factor):
    return x * factor, lambda g: (g * factor,)


def _p_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _p_sum(x, axis=None, keepdims=False):
    out = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, vjp


def _p_mean(x, axis=None, keepdims=False):
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1) if axis is not None else x.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return out, vjp


def _p_exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


def _p_log(x):
    if np.any(x <= 0):
        raise AutodiffError("log: input must be strictly positive")
    return np.log(x), lambda g: (g / x,)


def _p_sqrt(x):
    if np.any(x < 0):
        raise AutodiffError("sqrt: input must be non-negative")
    out = np.sqrt(x)
    return out, lambda g: (g * 0.5 / out,)


def _p_tanh(x):
    out = np.tanh(x)
    return out, lambda g: (g * (1.0 - out * out),)


def _p_sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return out, lambda g: (g * out * (1.0 - out),)


def _p_gelu(x):
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return out, vjp


def _p_relu(x):
    mask = x > 0
    return x * mask, lambda g: (g * mask,)


def _p_softmax(x, mask=None):
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        shifted = np.where(mask, x, -np.inf)
    else:
        shifted = x
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out, vjp


def _p_log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return out, lambda g: (g - soft * g.sum(axis=-1, keepdims=True),)


def _p_layernorm(x, gamma=None, beta=None, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta

    def vjp(g):
        gh = g * gamma if gamma is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return out, vjp


def _p_embed_lookup(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: ids outside [0, {table.shape[0]})")

    def vjp(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g)
        return (gt,)

    return table[ids], vjp


def _p_slice(x, index):
    out = x[index]

    def vjp(g):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return np.array(out, dtype=np.float64), vjp


def _p_concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _p_stack(*xs, axis=0):
    try:
        out = np.stack(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[x.shape for x in xs]}") from None
    n = len(xs)
    return out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))


def _p_reshape(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _p_transpose(x, axes=None):
    out = np.transpose(x, axes)
    inverse = None if axes is None else np.argsort(axes)
    return out, lambda g: (np.transpose(g, inverse),)


def _p_where(a, b, cond):
    cond = np.asarray(cond, dtype=bool)
    _broadcast_shape("where", cond.shape, a.shape, b.shape)
    out = np.where(cond, a, b)
    return out, lambda g: (
        _unbroadcast(np.where(cond, g, 0.0), a.shape),
        _unbroadcast(np.where(cond, 0.0, g), b.shape),
    )


def _p_cross_entropy(logits, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_with_logits: logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(n)
    out = np.array((lse - shifted[rows, targets]).mean())

    def vjp(g):
        soft = np.exp(shifted - lse[:, None])
        soft[rows, targets] -= 1.0
        return (soft * (g / n),)

    return out, vjp


PRIMITIVES: dict[str, Callable] = {
    "add": _p_add,
    "sub": _p_sub,
    "mul": _p_mul,
    "div": _p_div,
    "scale": _p_scale,
    "matmul": _p_matmul,
    "sum": _p_sum,
    "mean": _p_mean,
    "exp": _p_exp,
    "log": _p_log,
    "sqrt": _p_sqrt,
    "tanh": _p_tanh,
    "sigmoid": _p_sigmoid,
    "gelu": _p_gelu,
    "relu": _p_relu,
    "softmax": _p_softmax,
    "log_softmax": _p_log_softmax,
    "layernorm": _p_layernorm,
    "embed_lookup": _p_embed_lookup,
    "slice": _p_slice,
    "concat": _p_concat,
    "stack": _p_stack,
    "reshape": _p_reshape,
    "transpose": _p_transpose,
    "where": _p_where,
    "cross_entropy_with_logits": _p_cross_entropy,
}


def apply_primitive(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a named primitive to tensors (or array-likes, treated as constants)."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {op_kind!r}") from None
    tensors = [None if x is None else _as_tensor(x) for x in inputs]
    arrays = [None if t is None else t.data for t in tensors]
    if CHECK_FINITE:
        for t in tensors:
            if t is not None and not np.isfinite(t.data).all():
                raise AutodiffError(f"{op_kind}: non-finite input of shape {t.shape}")
    if op_kind == "layernorm":
        x, *rest = arrays
        gamma = rest[0] if len(rest) > 0 else None
        beta = rest[1] if len(rest) > 1 else None
        out, vjp = fn(x, gamma, beta, **attrs)
        tensors = [t for t in tensors if t is not None]
    else:
        out, vjp = fn(*arrays, **attrs)
    result = Tensor(out)
    if any(t is not None and t.requires_grad for t in tensors):
        result.requires_grad = True
        result.node = Node(op_kind, tuple(tensors), result, vjp)
    return result


@dataclass
class Tape:
    """Recorded primitive applications reachable from one output, in creation order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [output]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("backward: loss does not depend on any requires_grad tensor")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        input_grads = node.vjp(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    for key, t in holders.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


@dataclass
class GradCheckReport:
    max_deviation: float
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, tolerance: float = 1e-5,
                            step: float = 1e-5) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``fn`` with central differences.

    The deviation is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    (zero when both gradients vanish).
    """
    if tolerance <= 0:
        raise AutodiffError("tolerance must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = fn(x)
    if y.size != 1:
        raise AutodiffError(f"finite_difference_check: fn must be scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise AutodiffError("finite_difference_check: fn is non-finite at the base point")
    if y.requires_grad:
        backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        probe = base.copy().reshape(-1)
        probe[i] += step
        hi = fn(Tensor(probe.reshape(base.shape))).item()
        probe[i] -= 2 * step
        lo = fn(Tensor(probe.reshape(base.shape))).item()
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise AutodiffError(f"finite_difference_check: fn non-finite at probe {i}")
        flat[i] = (hi - lo) / (2 * step)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    deviation = 0.0 if scale == 0.0 else diff / scale
    return GradCheckReport(float(deviation), tolerance, analytic, numeric)


# functional helpers ---------------------------------------------------------

def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def sqrt(x):
    return apply_primitive("sqrt", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def gelu(x):
    return apply_primitive("gelu", [x])


def relu(x):
    return apply_primitive("relu", [x])


def softmax(x, mask=None):
    return apply_primitive("softmax", [x], mask=mask)


def log_softmax(x):
    return apply_primitive("log_softmax", [x])


def layernorm(x, gamma=None, beta=None, eps=1e-5):
    return apply_primitive("layernorm", [x, gamma, beta], eps=eps)


def embed_lookup(table, ids):
    return apply_primitive("embed_lookup", [table], ids=ids)


def concat(xs, axis=0):
    return apply_primitive("concat", list(xs), axis=axis)


def stack(xs, axis=0):
    return apply_primitive("stack", list(xs), axis=axis)


def where(cond, a, b):
    return apply_primitive("where", [a, b], cond=cond)


def cross_entropy_with_logits(logits, targets):
    return apply_primitive("cross_entropy_with_logits", [logits], targets=targets)
