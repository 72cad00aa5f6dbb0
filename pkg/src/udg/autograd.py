"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records a :class:`Node` when one of its inputs requires a
gradient. Node ids come from a global counter, so every input id is smaller
than the id of the node consuming it and sorting by id is a topological order.
Vector-Jacobian products are written with the same primitives, which makes
``backward(..., create_graph=True)`` return gradients that can be
differentiated again.

Broadcasting rule for the binary elementwise primitives (add, sub, mul, div):
shapes must be equal, or one operand is a scalar (shape ``()``), or one operand
is rank-1 ``(d,)`` and the other rank-2 ``(n, d)``, in which case the vector is
broadcast along the leading axis. Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class UnknownPrimitiveError(ValueError):
    pass


class GradientError(ValueError):
    pass


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Node:
    __slots__ = ("id", "prim", "inputs", "attrs", "value")

    def __init__(self, prim, inputs, attrs, value):
        self.id = next(_ids)
        self.prim = prim
        self.inputs = inputs
        self.attrs = attrs
        self.value = value

    def __repr__(self) -> str:
        ins = [t.node.id if t.node is not None else "leaf" for t in self.inputs]
        return f"Node({self.id}, {self.prim.name}, inputs={ins})"


class Tensor:
    """Immutable float64 array with an optional tape handle."""

    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = _freeze(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: Node | None = None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr = _freeze(arr)
        t.data = arr
        t.node = node
        t.requires_grad = node is not None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable


_PRIMS: dict[str, Primitive] = {}


def _register(name: str, forward: Callable, vjp: Callable) -> None:
    _PRIMS[name] = Primitive(name, forward, vjp)


def primitive_names() -> list[str]:
    return sorted(_PRIMS)


def apply_primitive(name: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``name`` on ``inputs`` and record it on the tape if needed."""
    try:
        prim = _PRIMS[name]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {name!r}") from None
    inputs = tuple(as_tensor(t) for t in inputs)
    value = prim.forward(*(t.data for t in inputs), **attrs)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        node = Node(prim, inputs, attrs, None)
        out = Tensor._wrap(value, node)
        node.value = out.data
        return out
    return Tensor._wrap(value)


class _Ctx:
    __slots__ = ("node", "needs", "create_graph")

    def __init__(self, node: Node, needs, create_graph: bool):
        self.node = node
        self.needs = needs
        self.create_graph = create_graph

    @property
    def inputs(self):
        return self.node.inputs

    @property
    def attrs(self):
        return self.node.attrs

    def out(self) -> Tensor:
        # Under create_graph the output is rebuilt so higher derivatives see it.
        if self.create_graph:
            return apply_primitive(self.node.prim.name, self.node.inputs, **self.node.attrs)
        return Tensor._wrap(self.node.value)


# ---------------------------------------------------------------- shape rules


def _broadcast_shape(name: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == 1 and len(b) == 2 and a[0] == b[1]:
        return b
    if len(b) == 1 and len(a) == 2 and b[0] == a[1]:
        return a
    raise ShapeError(f"{name}: incompatible shapes {a} and {b}")


def _binary(name: str, fn: Callable) -> Callable:
    def forward(a, b):
        _broadcast_shape(name, a.shape, b.shape)
        return fn(a, b)

    return forward


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    if shape == ():
        return sum_(g)
    return sum_(g, 0)


# ---------------------------------------------------------- elementwise binary


def _vjp_add(ctx, g):
    a, b = ctx.inputs
    return (
        _unbroadcast(g, a.shape) if ctx.needs[0] else None,
        _unbroadcast(g, b.shape) if ctx.needs[1] else None,
    )


def _vjp_sub(ctx, g):
    a, b = ctx.inputs
    return (
        _unbroadcast(g, a.shape) if ctx.needs[0] else None,
        _unbroadcast(neg(g), b.shape) if ctx.needs[1] else None,
    )


def _vjp_mul(ctx, g):
    a, b = ctx.inputs
    return (
        _unbroadcast(mul(g, b), a.shape) if ctx.needs[0] else None,
        _unbroadcast(mul(g, a), b.shape) if ctx.needs[1] else None,
    )


def _vjp_div(ctx, g):
    a, b = ctx.inputs
    ga = gb = None
    if ctx.needs[0]:
        ga = _unbroadcast(div(g, b), a.shape)
    if ctx.needs[1]:
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
    return ga, gb


_register("add", _binary("add", np.add), _vjp_add)
_register("sub", _binary("sub", np.subtract), _vjp_sub)
_register("mul", _binary("mul", np.multiply), _vjp_mul)
_register("div", _binary("div", np.divide), _vjp_div)
_register("neg", np.negative, lambda ctx, g: (neg(g),))

# ------------------------------------------------------------------- algebra


def _fwd_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _vjp_matmul(ctx, g):
    a, b = ctx.inputs
    return (
        matmul(g, transpose(b)) if ctx.needs[0] else None,
        matmul(transpose(a), g) if ctx.needs[1] else None,
    )


def _fwd_transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    return a.T


_register("matmul", _fwd_matmul, _vjp_matmul)
_register("transpose", _fwd_transpose, lambda ctx, g: (transpose(g),))

# ------------------------------------------------------------------ unary maps


def _vjp_relu(ctx, g):
    (a,) = ctx.inputs
    return (mul(g, Tensor._wrap((a.data > 0).astype(np.float64))),)


_register("relu", lambda a: np.maximum(a, 0.0), _vjp_relu)
_register("softplus", lambda a: np.logaddexp(0.0, a), lambda ctx, g: (mul(g, sigmoid(ctx.inputs[0])),))


def _vjp_sigmoid(ctx, g):
    s = ctx.out()
    return (mul(g, sub(s, mul(s, s))),)


_register("sigmoid", expit, _vjp_sigmoid)
_register("exp", np.exp, lambda ctx, g: (mul(g, ctx.out()),))
_register("log", np.log, lambda ctx, g: (div(g, ctx.inputs[0]),))
_register("sqrt", np.sqrt, lambda ctx, g: (div(mul(g, 0.5), ctx.out()),))

# ---------------------------------------------------------------- reductions


def _check_axis(name, a, axis):
    if axis is not None and not (axis == 0 and a.ndim in (1, 2)):
        raise ShapeError(f"{name}: unsupported axis {axis} for shape {a.shape}")


def _fwd_sum(a, axis=None):
    _check_axis("sum", a, axis)
    return np.sum(a, axis=axis)


def _fwd_mean(a, axis=None):
    _check_axis("mean", a, axis)
    return np.mean(a, axis=axis)


def _vjp_sum(ctx, g):
    return (broadcast_to(g, ctx.inputs[0].shape),)


def _vjp_mean(ctx, g):
    a = ctx.inputs[0]
    axis = ctx.attrs.get("axis")
    count = a.size if axis is None else a.shape[0]
    return (mul(broadcast_to(g, a.shape), 1.0 / count),)


def _fwd_broadcast(a, shape):
    shape = tuple(shape)
    trailing = a.ndim == 1 and len(shape) == 2 and a.shape[0] == shape[1]
    if a.shape != shape and a.shape != () and not trailing:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    return np.broadcast_to(a, shape).copy()


def _vjp_broadcast(ctx, g):
    return (_unbroadcast(g, ctx.inputs[0].shape),)


_register("sum", _fwd_sum, _vjp_sum)
_register("mean", _fwd_mean, _vjp_mean)
_register("broadcast_to", _fwd_broadcast, _vjp_broadcast)

# ------------------------------------------------------------------ row-wise


def _fwd_rowsum(a):
    if a.ndim != 2:
        raise ShapeError(f"rowsum: expected rank 2, got shape {a.shape}")
    return a.sum(axis=1)


def _vjp_rowsum(ctx, g):
    (a,) = ctx.inputs
    return (scale_rows(Tensor._wrap(np.ones(a.shape)), g),)


def _fwd_scale_rows(x, v):
    if x.ndim != 2 or v.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: incompatible shapes {x.shape} and {v.shape}")
    return x * v[:, None]


def _vjp_scale_rows(ctx, g):
    x, v = ctx.inputs
    return (
        scale_rows(g, v) if ctx.needs[0] else None,
        rowsum(mul(g, x)) if ctx.needs[1] else None,
    )


def _log_softmax(a):
    if a.ndim != 2:
        raise ShapeError(f"log_softmax: expected rank 2, got shape {a.shape}")
    m = a.max(axis=1, keepdims=True)
    shifted = a - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _fwd_softmax(a):
    return np.exp(_log_softmax(a))


def _vjp_softmax(ctx, g):
    s = ctx.out()
    sg = mul(s, g)
    return (sub(sg, scale_rows(s, rowsum(sg))),)


def _vjp_log_softmax(ctx, g):
    (a,) = ctx.inputs
    return (sub(g, scale_rows(softmax(a), rowsum(g))),)


def _fwd_xent(z, t):
    if z.ndim != 2 or z.shape != t.shape:
        raise ShapeError(f"softmax_xent: incompatible shapes {z.shape} and {t.shape}")
    return -np.sum(t * _log_softmax(z)) / z.shape[0]


def _vjp_xent(ctx, g):
    z, t = ctx.inputs
    scale = mul(g, 1.0 / z.shape[0])
    gz = gt = None
    if ctx.needs[0]:
        gz = mul(sub(scale_rows(softmax(z), rowsum(t)), t), scale)
    if ctx.needs[1]:
        gt = mul(log_softmax(z), neg(scale))
    return gz, gt


_register("rowsum", _fwd_rowsum, _vjp_rowsum)
_register("scale_rows", _fwd_scale_rows, _vjp_scale_rows)
_register("softmax", _fwd_softmax, _vjp_softmax)
_register("log_softmax", _log_softmax, _vjp_log_softmax)
_register("softmax_xent", _fwd_xent, _vjp_xent)

# ------------------------------------------------------------------ structure


def _fwd_concat(*arrays):
    if any(a.ndim != 1 for a in arrays):
        raise ShapeError(f"concat: expected rank-1 inputs, got {[a.shape for a in arrays]}")
    return np.concatenate(arrays)


def _vjp_concat(ctx, g):
    out, start = [], 0
    for t, need in zip(ctx.inputs, ctx.needs):
        stop = start + t.shape[0]
        out.append(getitem(g, slice(start, stop)) if need else None)
        start = stop
    return tuple(out)


def _fwd_reshape(a, shape):
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}")
    return a.reshape(shape)


def _fwd_scatter(g, idx, shape):
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return out


_register("concat", _fwd_concat, _vjp_concat)
_register("reshape", _fwd_reshape, lambda ctx, g: (reshape(g, ctx.inputs[0].shape),))
_register("getitem", lambda a, idx: np.array(a[idx]), lambda ctx, g: (scatter(g, ctx.attrs["idx"], ctx.inputs[0].shape),))
_register("scatter", _fwd_scatter, lambda ctx, g: (getitem(g, ctx.attrs["idx"]),))

# ----------------------------------------------------------------- functional


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def neg(a):
    return apply_primitive("neg", (a,))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def transpose(a):
    return apply_primitive("transpose", (a,))


def relu(a):
    return apply_primitive("relu", (a,))


def softplus(a):
    return apply_primitive("softplus", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def log(a):
    return apply_primitive("log", (a,))


def sqrt(a):
    return apply_primitive("sqrt", (a,))


def sum_(a, axis=None):
    return apply_primitive("sum", (a,), axis=axis)


def mean(a, axis=None):
    return apply_primitive("mean", (a,), axis=axis)


def broadcast_to(a, shape):
    return apply_primitive("broadcast_to", (a,), shape=tuple(shape))


def rowsum(a):
    return apply_primitive("rowsum", (a,))


def scale_rows(x, v):
    return apply_primitive("scale_rows", (x, v))


def softmax(a):
    return apply_primitive("softmax", (a,))


def log_softmax(a):
    return apply_primitive("log_softmax", (a,))


def softmax_xent(logits, targets):
    """Mean over rows of ``-sum(targets * log_softmax(logits))``."""
    return apply_primitive("softmax_xent", (logits, targets))


def concat(tensors):
    return apply_primitive("concat", tuple(tensors))


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def getitem(a, idx):
    return apply_primitive("getitem", (a,), idx=idx)


def scatter(g, idx, shape):
    return apply_primitive("scatter", (g,), idx=idx, shape=tuple(shape))


def sq_l2(a, b):
    """Per-row squared euclidean distance between two (n, d) tensors."""
    d = sub(a, b)
    return rowsum(mul(d, d))


# ------------------------------------------------------------------ backward


def _key(t: Tensor):
    return ("n", t.node.id) if t.node is not None else ("l", id(t))


def _reachable(out: Tensor) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [out.node] if out.node is not None else []
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(t.node for t in node.inputs if t.node is not None and t.node.id not in seen)
    return [seen[i] for i in sorted(seen)]


def backward(
    loss: Tensor,
    params: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of scalar ``loss`` with respect to each of ``params``.

    With ``create_graph=True`` the returned gradients are themselves recorded
    and can be passed to another :func:`backward` call.
    """
    if loss.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict = {_key(loss): Tensor._wrap(np.ones(loss.shape))}
    with _grad_mode(create_graph):
        for node in reversed(_reachable(loss)):
            g = grads.get(("n", node.id))
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            parts = node.prim.vjp(_Ctx(node, needs, create_graph), g)
            for t, gi, need in zip(node.inputs, parts, needs):
                if not need or gi is None:
                    continue
                k = _key(t)
                prev = grads.get(k)
                grads[k] = gi if prev is None else add(prev, gi)
    result = []
    for i, p in enumerate(params):
        g = grads.get(_key(p))
        if g is None:
            if not allow_unused:
                raise GradientError(f"backward: parameter {i} with shape {p.shape} is not reachable from the loss")
            g = Tensor._wrap(np.zeros(p.shape))
        result.append(g)
    return result


class Tape:
    """Topologically ordered view of the nodes feeding a tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def of(cls, out: Tensor) -> "Tape":
        return cls(_reachable(out))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every node forward from the recorded leaf values."""
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            args = [values[t.node.id] if t.node is not None else t.data for t in node.inputs]
            values[node.id] = node.prim.forward(*args, **node.attrs)
        return values


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between backward and central differences.

    ``f`` maps a list of tensors to a scalar tensor and must be deterministic.
    The error per coordinate is ``|analytic - numeric| / (|numeric| + 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [Tensor(p.data, requires_grad=True) for p in params]
    analytic = backward(f(params), params, allow_unused=True)
    worst = 0.0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[j] += sign * step
                trial = list(params)
                trial[i] = Tensor(bumped.reshape(p.shape), requires_grad=True)
                vals.append(f(trial).item())
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = analytic[i].data.reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / (abs(numeric) + 1e-12))
    return worst
