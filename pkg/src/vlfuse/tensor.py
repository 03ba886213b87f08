"""Dense float64 tensors with reverse-mode autodiff and exact cost accounting.

Every op records its contraction cost (mul-adds, by category) on the active
:class:`Graph`, and every activation retained for backward is tracked so the
graph can report the peak number of simultaneously-live scalars.

Typical use::

    with Graph() as g:
        loss = tensor.sum(tensor.matmul(a, b))
        tensor.backward(loss)
    g.counters.mul_adds["other"]
"""

from __future__ import annotations

import builtins
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DeterminismError, DimensionError, NonFiniteError

COST_KINDS = ("attention-score", "attention-value", "projection", "ffn", "other")

_state = threading.local()
_seq = itertools.count()


class CostCounters:
    """Mul-add totals per category, attention score pairs and activation liveness."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.mul_adds = {kind: 0 for kind in COST_KINDS}
        self.score_pairs = 0
        self.pairs_by_tag: dict[str, int] = {}
        self.live_scalars = 0
        self.peak_live_scalars = 0

    def count(self, kind: str, n: int) -> None:
        if kind not in self.mul_adds:
            raise ValueError(f"unknown cost kind {kind!r}")
        self.mul_adds[kind] += int(n)

    @property
    def total_mul_adds(self) -> int:
        return builtins.sum(self.mul_adds.values())

    def retain(self, n: int) -> None:
        self.live_scalars += n
        if self.live_scalars > self.peak_live_scalars:
            self.peak_live_scalars = self.live_scalars

    def release(self, n: int) -> None:
        self.live_scalars -= n

    def snapshot(self) -> dict:
        return {
            "mul_adds": dict(self.mul_adds),
            "total_mul_adds": self.total_mul_adds,
            "score_pairs": self.score_pairs,
            "pairs_by_tag": dict(self.pairs_by_tag),
            "peak_live_scalars": self.peak_live_scalars,
        }


class Node:
    __slots__ = ("op", "parents", "backward", "seq", "graph", "freed")

    def __init__(self, op, parents, backward, graph):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)
        self.graph = graph
        self.freed = False


class Graph:
    """Ordered record of executed ops plus the counters for one run.

    Graphs are per-thread: entering one makes it the target of every op
    executed on that thread until exit. ``grad_enabled=False`` gives a
    forward-only graph that still counts mul-adds.
    """

    def __init__(self, grad_enabled: bool = True, keep_record: bool = True):
        self.grad_enabled = grad_enabled
        self.keep_record = keep_record
        self.counters = CostCounters()
        self.nodes: list[Node] = []
        self.step = 0

    def _add(self, node: Node) -> None:
        self.step += 1
        if self.keep_record:
            self.nodes.append(node)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
        _state.default = Graph(keep_record=False)
    return _state.stack


def current_graph() -> Graph:
    stack = _stack()
    return stack[-1] if stack else _state.default


def no_grad() -> Graph:
    """Forward-only graph context."""
    return Graph(grad_enabled=False, keep_record=False)


class Tensor:
    """Shape-tagged float64 array participating in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "is_param", "_node", "_live", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data, dtype=np.float64)
        if 0 in data.shape:
            raise DimensionError(f"tensor extents must be positive, got {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.is_param = False
        self._node = None
        self._live = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """Trainable leaf; a private copy of ``data``."""
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
    t.is_param = True
    return t


def _emit(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    g = current_graph()
    out = Tensor(data)
    if g.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward, g)
        g._add(out._node)
        out._live = True
        g.counters.retain(out.size)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _prod(dims) -> int:
    return int(math.prod(int(d) for d in dims))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit("sub", data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay accurate)."""
    k = math.sqrt(2.0 / math.pi)
    x2 = x.data * x.data
    t = np.tanh(k * x.data * (1.0 + 0.044715 * x2))
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _emit("gelu", data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    data = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", data, (x,), lambda g: (g * data * (1.0 - data),))


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor, kind: str = "other") -> Tensor:
    """Batched matrix product.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` (shared across the
    batch) or ``[..., k, n]`` with identical batch extents. Records
    ``batch*m*n*k`` mul-adds under ``kind``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    current_graph().counters.count(kind, _prod(a.shape[:-1]) * b.shape[-1] * a.shape[-1])
    data = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, kind: str = "projection") -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; one graph node."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {w.shape}")
    current_graph().counters.count(kind, _prod(x.shape[:-1]) * w.shape[0] * w.shape[1])
    data = x.data @ w.data
    if b is not None:
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _emit("linear", data, parents, backward)


def attention_scores(q: Tensor, k: Tensor, scale_by: float, tag: str = "self") -> Tensor:
    """Scaled query-key dot products.

    ``q`` is ``[..., H, n, dh]`` and ``k`` is ``[..., H, m, dh]``; returns
    ``[..., H, n, m]``. Each query/key position pair is counted once in
    ``score_pairs`` (and under ``tag`` in ``pairs_by_tag``) regardless of
    the head count, and the ``H*n*m*dh`` mul-adds go to the
    ``attention-score`` category.
    """
    if q.ndim < 3 or q.ndim != k.ndim or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention_scores shape mismatch: {q.shape} vs {k.shape}")
    n, m, dh = q.shape[-2], k.shape[-2], q.shape[-1]
    counters = current_graph().counters
    pairs = _prod(q.shape[:-3]) * n * m
    counters.score_pairs += pairs
    counters.pairs_by_tag[tag] = counters.pairs_by_tag.get(tag, 0) + pairs
    counters.count("attention-score", _prod(q.shape[:-2]) * n * m * dh)
    s = float(scale_by)
    data = (q.data @ np.swapaxes(k.data, -1, -2)) * s

    def backward(g):
        gq = (g @ k.data) * s if q.requires_grad else None
        gk = (np.swapaxes(g, -1, -2) @ q.data) * s if k.requires_grad else None
        return gq, gk

    return _emit("attention_scores", data, (q, k), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _emit("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _emit("swapaxes", np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from exc
    return _emit("broadcast_to", data, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _emit("concat", data, tuple(tensors), backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (embedding lookup, row selection)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise IndexError(f"take index out of range for axis of length {x.shape[axis]}")
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        lead = list(range(axis, axis + idx.ndim))
        gm = np.moveaxis(g, lead, list(range(idx.ndim))).reshape((-1,) + moved.shape[1:])
        np.add.at(moved, idx.reshape(-1), gm)
        return (gx,)

    return _emit("take", data, (x,), backward)


def getitem(x: Tensor, key) -> Tensor:
    data = np.array(x.data[key])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("getitem", data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _emit("sum", data, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else _prod(np.array(x.shape)[np.atleast_1d(axis)])
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    return _emit("mean", data, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / n,))


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximising element."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    data = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit("max", data, (x,), backward)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; slices along ``axis`` sum to one."""
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", y, (x,), backward)


def cross_entropy_logits(logits: Tensor, target) -> Tensor:
    """Mean negative log-softmax of the target class over a ``[B, C]`` batch."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects [B, C] logits, got {logits.shape}")
    b, c = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (b,):
        raise DimensionError(f"expected {b} targets, got {target.shape[0]}")
    if target.min() < 0 or target.max() >= c:
        raise IndexError(f"target class out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    data = np.asarray((lse - shifted[rows, target]).mean())

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, target] -= 1.0
        return (p * (g / b),)

    return _emit("cross_entropy", data, (logits,), backward)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Visits each recorded op reachable from ``loss`` once, newest first.
    Without ``retain_graph`` the visited ops release their activations.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return

    order = []
    seen = set()
    pending = [loss]
    while pending:
        t = pending.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        if node.freed:
            raise ContractError(f"op '{node.op}' was already released; pass retain_graph=True")
        seen.add(id(node))
        order.append(t)
        pending.extend(p for p in node.parents if p._node is not None)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    loss._node.graph.counters.retain(loss.size)
    for t in order:
        node = t._node
        counters = node.graph.counters
        gout = grads.pop(id(t), None)
        if gout is not None:
            for p, pg in zip(node.parents, node.backward(gout)):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
                    p._node.graph.counters.retain(p.size)
            counters.release(gout.size)
        if not retain_graph:
            if t._live:
                counters.release(t.size)
                t._live = False
            node.freed = True
            node.backward = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    *,
    h: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd against central differences for scalar ``f(*inputs)``.

    Relative error is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``; the
    floor keeps near-zero gradients from turning rounding noise (which grows
    like ``|f| * eps / h``) into large ratios.
    ``n_coords`` samples that many coordinates uniformly over all inputs
    (all coordinates when ``None``).
    """
    inputs = list(inputs)

    def value() -> float:
        with no_grad():
            out = f(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        return float(out.data.reshape(()))

    v0, v1 = value(), value()
    if v0 != v1:
        raise DeterminismError(f"function changed on replay: {v0!r} != {v1!r}")

    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad, t.grad = True, None
    try:
        with Graph():
            backward(f(*inputs))
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    finally:
        for t, (flag, grad) in zip(inputs, saved):
            t.requires_grad, t.grad = flag, grad

    sizes = np.array([t.size for t in inputs])
    total = int(sizes.sum())
    if n_coords is None or n_coords >= total:
        picks = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = np.sort(rng.choice(total, size=n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    clamp = floor * builtins.max(1.0, abs(v0))

    worst_err, worst = 0.0, None
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[i])
        arr = inputs[i].data
        orig = arr.flat[j]
        arr.flat[j] = orig + h
        fp = value()
        arr.flat[j] = orig - h
        fm = value()
        arr.flat[j] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic[i].flat[j]
        err = abs(a - numeric) / builtins.max(abs(a), abs(numeric), clamp)
        if err > worst_err or worst is None:
            worst_err, worst = err, (i, j)
    return GradCheckReport(float(worst_err), tolerance, len(picks), worst)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional integer sub-stream key."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))
