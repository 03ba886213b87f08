"""Parameter containers and transformer sublayers built on :mod:`vlfuse.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Attribute-walking parameter container.

    Parameters are leaf tensors with ``requires_grad`` set at construction;
    nested modules may sit in attributes, lists or dicts. Traversal order is
    attribute insertion order, so parameter names are stable across runs.
    """

    def named_parameters(self, prefix: str = ""):
        seen = set()
        yield from self._walk(self, prefix, seen)

    @classmethod
    def _walk(cls, obj, prefix, seen):
        if isinstance(obj, Tensor):
            if obj.is_param and id(obj) not in seen:
                seen.add(id(obj))
                yield prefix, obj
        elif isinstance(obj, Module):
            for key, value in vars(obj).items():
                if key.startswith("_"):
                    continue
                yield from cls._walk(value, f"{prefix}.{key}" if prefix else key, seen)
        elif isinstance(obj, (list, tuple)):
            for i, value in enumerate(obj):
                yield from cls._walk(value, f"{prefix}.{i}", seen)
        elif isinstance(obj, dict):
            for key, value in obj.items():
                yield from cls._walk(value, f"{prefix}.{key}", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


param = T.parameter


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, *, std: float | None = None,
                 bias: bool = True, zero: bool = False, kind: str = "projection"):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = param(np.zeros((d_in, d_out))) if zero else normal(rng, (d_in, d_out), std)
        self.bias = param(np.zeros(d_out)) if bias else None
        self._kind = kind

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias, kind=self._kind)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng, kind="ffn")
        self.fc2 = Linear(hidden, d, rng, kind="ffn")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def additive_mask(key_mask: np.ndarray) -> np.ndarray:
    """``[..., m]`` keep-mask to an additive ``[..., 1, 1, m]`` bias over heads and queries."""
    bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, NEG_INF)
    return bias[..., None, None, :]


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention.

    Queries come from ``x``; keys and values from ``context`` (``x`` itself
    for self-attention). ``key_mask`` is a boolean ``[..., m]`` array,
    ``True`` for keys that may be attended. The last attention weights are
    kept in ``last_weights`` for inspection.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self._heads = heads
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self._heads
        x = T.reshape(x, (*lead, n, h, d // h))
        return T.swapaxes(x, -2, -3)

    def __call__(self, x: Tensor, context: Tensor | None = None, key_mask=None) -> Tensor:
        tag = "self" if context is None else "cross"
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        scores = T.attention_scores(q, k, 1.0 / math.sqrt(q.shape[-1]), tag)
        if key_mask is not None:
            scores = T.add(scores, additive_mask(key_mask))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = T.matmul(weights, v, kind="attention-value")
        out = T.swapaxes(out, -2, -3)
        *lead, n, h, dh = out.shape
        return self.o(T.reshape(out, (*lead, n, h * dh)))


class AttentionAdapter(Module):
    """Residual bottleneck adapter with squeeze-style channel gating.

    ``h = gelu(x W_down)``; the gate is ``sigmoid(mean_seq(h) W_gate)``
    scaling each bottleneck channel; ``delta = (h * gate) W_up``. ``W_up``
    starts at zero so a fresh adapter is an exact no-op.
    """

    def __init__(self, d: int, bottleneck: int, rng: np.random.Generator, attention: bool = True):
        self.down = Linear(d, bottleneck, rng)
        self.gate = Linear(bottleneck, bottleneck, rng) if attention else None
        self.up = Linear(bottleneck, d, rng, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(self.down(x))
        if self.gate is not None:
            squeezed = T.mean(h, axis=-2, keepdims=True)
            h = T.mul(h, T.sigmoid(self.gate(squeezed)))
        return self.up(h)


class TransformerLayer(Module):
    """Pre-norm self-attention + FFN block with an optional adapter after the FFN."""

    def __init__(self, d: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult * d, rng)
        self.adapter: AttentionAdapter | None = None

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        x = T.add(x, self.attn(self.ln_attn(x), key_mask=key_mask))
        x = T.add(x, self.ffn(self.ln_ffn(x)))
        if self.adapter is not None:
            x = T.add(x, self.adapter(x))
        return x

    def host_parameters(self) -> list[Tensor]:
        """Parameters of the layer itself, excluding any attached adapter."""
        return [p for name, p in self.named_parameters() if not name.startswith("adapter")]
