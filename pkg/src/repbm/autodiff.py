"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors record the operation that produced them; :func:`backward` walks the
graph in reverse topological order and accumulates gradients into every
tensor that requires them. The op set is deliberately small and shapes are
explicit: apart from multiplying by a Python scalar there is no implicit
broadcasting, and a bias add is its own op.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs do not conform to the op's shape rules."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the named ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scalar_scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    # op outputs are fresh arrays, so skip the defensive copy a leaf gets
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=np.float64)
    t.requires_grad = needs
    t.grad = None
    t.op = op
    t._parents = tuple(parents) if needs else ()
    t._backward = backward if needs else None
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        if np.shape(g) == t.data.shape:
            t.grad = np.array(g, dtype=np.float64)
            return
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), back, "sub")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), back, "multiply")


def scalar_scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        _accum(a, c * g)

    return _make(c * a.data, (a,), back, "scalar_scale")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-k vector to every row of an (n, k) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: shapes {x.shape} and {b.shape} do not conform")

    def back(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _make(x.data + b.data, (x, b), back, "bias_add")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), back, "relu")


def square(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), back, "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        _accum(a, g * out)

    return _make(out, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")

    def back(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), back, "log")


def sqrt(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Square root of max(a, 0); the gradient is zero wherever a <= eps."""
    clipped = np.maximum(a.data, 0.0)
    out = np.sqrt(clipped)
    live = clipped > eps

    def back(g):
        safe = np.where(live, out, 1.0)
        _accum(a, np.where(live, 0.5 * g / safe, 0.0))

    return _make(out, (a,), back, "sqrt")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated stably."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))

    def back(g):
        _accum(a, g * sig)

    return _make(out, (a,), back, "softplus")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - op name
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(a.data.sum(axis=axis), (a,), back, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    count = a.size if axis is None else a.shape[axis]
    return scalar_scale(sum(a, axis), 1.0 / count)


def concat(inputs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not inputs:
        raise ShapeError("concat: no inputs")
    ndim = inputs[0].data.ndim
    for t in inputs:
        rest = [s for i, s in enumerate(t.shape) if i != axis % ndim]
        ref = [s for i, s in enumerate(inputs[0].shape) if i != axis % ndim]
        if t.data.ndim != ndim or rest != ref:
            raise ShapeError(f"concat: shapes {[x.shape for x in inputs]} do not conform on axis {axis}")
    sizes = [t.shape[axis] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in inputs], axis=axis), inputs, back, "concat")


def index_select(a: Tensor, indices) -> Tensor:
    """Rows of ``a`` (axis 0) at ``indices``; repeated indices are allowed.

    An index array of shape (T, m) yields shape (T, m, *a.shape[1:]).
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 0:
        idx = idx.reshape(1)
    if a.data.ndim == 0:
        raise ShapeError("index_select: scalar input")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"index_select: indices out of range for shape {a.shape}")

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), back, "index_select")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def back(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), back, "transpose")


def pairwise_sqdist(x: Tensor, y: Tensor) -> Tensor:
    """(..., m, k) x (..., p, k) -> (..., m, p) squared Euclidean distances.

    Leading batch dimensions must match exactly.
    """
    xd, yd = x.data, y.data
    if xd.ndim < 2 or xd.ndim != yd.ndim or xd.shape[:-2] != yd.shape[:-2] \
            or xd.shape[-1] != yd.shape[-1]:
        raise ShapeError(f"pairwise_sqdist: shapes {x.shape} and {y.shape} do not conform")
    yt = np.swapaxes(yd, -1, -2)
    # ||x||^2 + ||y||^2 - 2 x.y, clamped: rounding can push tiny distances below 0
    raw = np.sum(xd * xd, axis=-1)[..., :, None] + np.sum(yd * yd, axis=-1)[..., None, :] \
        - 2.0 * (xd @ yt)
    out = np.maximum(raw, 0.0)

    def back(g):
        g = np.where(raw > 0.0, g, 0.0)
        _accum(x, 2.0 * (g.sum(axis=-1)[..., :, None] * xd - g @ yd))
        _accum(y, 2.0 * (g.sum(axis=-2)[..., :, None] * yd - np.swapaxes(g, -1, -2) @ xd))

    return _make(out, (x, y), back, "pairwise_sqdist")


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "multiply": multiply,
    "scalar_scale": scalar_scale,
    "bias_add": bias_add,
    "relu": relu,
    "square": square,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softplus": softplus,
    "sum": sum,
    "mean": mean,
    "concat": lambda *xs, **kw: concat(xs, **kw),
    "index_select": index_select,
    "transpose": transpose,
    "pairwise_sqdist": pairwise_sqdist,
}


def apply(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch ``op_kind`` by name. Non-tensor trailing arguments pass through."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
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


def backward(root: Tensor) -> None:
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar-shaped, got {root.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    # interior grads are scratch space for this pass
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        st.m = [np.zeros(p.size) for p in params]
        st.v = [np.zeros(p.size) for p in params]
        return st


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    if not state.m:
        state.m = [np.zeros(p.size) for p in params]
        state.v = [np.zeros(p.size) for p in params]
    if len(state.m) != len(params) or any(m.size != p.size for m, p in zip(state.m, params)):
        raise ShapeError("adam_step: accumulator sizes do not match parameters")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad.reshape(-1)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.reshape(p.shape)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(builder: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5) -> float:
    """Max over parameter entries of |analytic - central difference| / max(1, |central|)."""
    zero_grad(params)
    root = builder()
    backward(root)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = builder().item()
            flat[j] = orig - h
            down = builder().item()
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, abs(gflat[j] - fd) / max(1.0, abs(fd)))
    zero_grad(params)
    return worst
