"""Adapt-Pooling, the query sampler and the fusion strategies built from them.

Shapes, unbatched (a leading batch axis is allowed everywhere):

* ``adapt_pool``: ``z [N_i, d] -> [N_s, d]`` through importance weights
  ``softmax_over_N_i((z @ W_reduce)^T)`` of shape ``[N_s, N_i]``.
* ``sample``: queries ``[N_q, d]`` self-attend, cross-attend to ``z`` and
  pass through the FFN reserved for ``z``'s modality.
* ``fuse_tgms``: ``Sampler(v, Sampler(t, q) (+) AdaPool(t))``, with the two
  passes sharing each layer's attention weights when the sampler is shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import (NEG_INF, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, TransformerLayer,
                 normal)
from .tensor import Tensor

KINDS = (
    "ClassTokenLike",
    "MeanPool",
    "MaxPool",
    "FlattenEncoder",
    "Decoder",
    "SamplerCondenseVideo",
    "SamplerCondenseText",
)
SAMPLER_KINDS = ("SamplerCondenseVideo", "SamplerCondenseText")
ENCODER_KINDS = ("ClassTokenLike", "MeanPool", "MaxPool", "FlattenEncoder")
COMBINE_MODES = ("add", "concat", "multiply")


@dataclass
class FusionStrategy:
    """One fusion topology plus its sampler toggles.

    ``combined_width`` declares the width of the combined condensed states;
    it must be ``2*d`` for ``concat`` (which is then projected back to ``d``)
    and ``d`` (or unset) otherwise.
    """

    kind: str = "SamplerCondenseText"
    shared_sampler: bool = True
    adapt_pooling: bool = True
    residual_combine: str = "add"
    combined_width: int | None = None

    def validate(self, d: int) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown fusion kind {self.kind!r}; expected one of {KINDS}")
        if self.residual_combine not in COMBINE_MODES:
            raise ConfigError(f"unknown residual_combine {self.residual_combine!r}")
        if self.kind not in SAMPLER_KINDS:
            return
        expected = 2 * d if self.residual_combine == "concat" and self.adapt_pooling else d
        if self.residual_combine == "concat" and self.adapt_pooling and self.combined_width is None:
            raise ConfigError("residual_combine='concat' requires a declared combined_width")
        if self.combined_width is not None and self.combined_width != expected:
            raise ConfigError(
                f"combined_width {self.combined_width} does not match {expected} for "
                f"residual_combine={self.residual_combine!r} at d={d}"
            )


@dataclass
class CostModel:
    """Sequence sizes for the per-layer attention pair formulas.

    ``n_v`` may be zero (text-only degenerate case); all others are positive.
    """

    n_v: int
    k: int
    n_t: int
    n_q: int

    def __post_init__(self):
        if self.n_v < 0 or min(self.k, self.n_t, self.n_q) < 1:
            raise ValueError(f"invalid cost model {self}")


class AdaptPool(Module):
    def __init__(self, d: int, n_s: int, rng: np.random.Generator, std: float = 0.02):
        if n_s < 1:
            raise ConfigError("condensed length must be >= 1")
        self.w_reduce = normal(rng, (d, n_s), std)
        self.last_weights: np.ndarray | None = None

    @property
    def n_s(self) -> int:
        return self.w_reduce.shape[1]


def adapt_pool(z: Tensor, params: AdaptPool, key_mask=None) -> Tensor:
    """Condense ``z [..., N_i, d]`` to ``[..., N_s, d]``.

    Each output row is a convex combination of the (unmasked) rows of ``z``,
    weighted by a softmax over the input positions.
    """
    w = params.w_reduce
    if z.shape[-1] != w.shape[0]:
        raise DimensionError(f"adapt_pool width mismatch: z {z.shape} vs W_reduce {w.shape}")
    logits = T.swapaxes(T.linear(z, w, kind="other"), -1, -2)
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, NEG_INF)[..., None, :]
        logits = T.add(logits, bias)
    weights = T.softmax(logits, axis=-1)
    params.last_weights = weights.data
    return T.matmul(weights, z, kind="other")


class ModalityFFN(Module):
    def __init__(self, d: int, ffn_mult: int, rng: np.random.Generator):
        self.ln = LayerNorm(d)
        self.ff = FeedForward(d, ffn_mult * d, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return self.ff(self.ln(h))


class SamplerLayer(Module):
    """Decoder-style layer: self-attention, cross-attention, per-modality FFN."""

    def __init__(self, d: int, heads: int, ffn_mult: int, modalities, rng: np.random.Generator):
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ffn = {m: ModalityFFN(d, ffn_mult, rng) for m in modalities}

    def __call__(self, h: Tensor, z: Tensor, modality: str, key_mask=None, self_mask=None) -> Tensor:
        h = T.add(h, self.self_attn(self.ln_self(h), key_mask=self_mask))
        h = T.add(h, self.cross_attn(self.ln_cross(h), context=z, key_mask=key_mask))
        return T.add(h, self.ffn[modality](h))


def sample(z: Tensor, queries: Tensor, layers, modality: str, key_mask=None) -> Tensor:
    """Condense ``z [..., N_i, d]`` to the query length ``[..., N_q, d]``."""
    for layer in layers:
        if modality not in layer.ffn:
            raise ConfigError(f"no feed-forward network reserved for modality {modality!r}")
    if z.shape[-1] != queries.shape[-1]:
        raise DimensionError(f"sample width mismatch: z {z.shape} vs queries {queries.shape}")
    lead = z.shape[:-2]
    h = queries
    if queries.shape[:-2] != lead:
        h = T.broadcast_to(queries, (*lead, *queries.shape[-2:]))
    for layer in layers:
        h = layer(h, z, modality, key_mask=key_mask)
    return h


class FusionModule(Module):
    """Parameters for one :class:`FusionStrategy`."""

    def __init__(self, strategy: FusionStrategy, d: int, rng: np.random.Generator, *, heads: int = 4,
                 layers: int = 4, num_queries: int = 16, ffn_mult: int = 4):
        strategy.validate(d)
        self._strategy = strategy
        self._d = d
        kind = strategy.kind
        if kind in SAMPLER_KINDS:
            self.queries = normal(rng, (num_queries, d), 0.02)
            if strategy.shared_sampler:
                self.layers = [SamplerLayer(d, heads, ffn_mult, ("text", "video"), rng) for _ in range(layers)]
            else:
                self.text_layers = [SamplerLayer(d, heads, ffn_mult, ("text",), rng) for _ in range(layers)]
                self.video_layers = [SamplerLayer(d, heads, ffn_mult, ("video",), rng) for _ in range(layers)]
            # condensed length equals the query length so the two can be combined row-wise
            self.adapt_pool = AdaptPool(d, num_queries, rng) if strategy.adapt_pooling else None
            combining = strategy.adapt_pooling and strategy.residual_combine == "concat"
            self.combine_proj = Linear(2 * d, d, rng) if combining else None
        elif kind == "Decoder":
            self.layers = [SamplerLayer(d, heads, ffn_mult, ("text",), rng) for _ in range(layers)]
        else:
            self.layers = [TransformerLayer(d, heads, ffn_mult, rng) for _ in range(layers)]

    @property
    def strategy(self) -> FusionStrategy:
        return self._strategy

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    def pass_layers(self, modality: str):
        if self._strategy.shared_sampler:
            return self.layers
        return self.text_layers if modality == "text" else self.video_layers

    def condense(self, z: Tensor, modality: str, key_mask=None) -> Tensor:
        """``Sampler(z, q)`` combined with ``AdaPool(z)`` when enabled."""
        sampled = sample(z, self.queries, self.pass_layers(modality), modality, key_mask)
        if self.adapt_pool is None:
            return sampled
        pooled = adapt_pool(z, self.adapt_pool, key_mask)
        mode = self._strategy.residual_combine
        if mode == "add":
            return T.add(sampled, pooled)
        if mode == "multiply":
            return T.mul(sampled, pooled)
        return self.combine_proj(T.concat([sampled, pooled], axis=-1))

    def __call__(self, v_feat, t_feat, t_mask=None) -> Tensor:
        return fuse_with_strategy(v_feat, t_feat, self._strategy, self, t_mask)


def _flatten_video(v_feat: Tensor) -> Tensor:
    *lead, n_v, k, d = v_feat.shape
    return T.reshape(v_feat, (*lead, n_v * k, d))


def fuse_tgms(v_feat: Tensor, t_feat: Tensor, params: FusionModule, t_mask=None) -> Tensor:
    """Text-guided fusion: condensed text queries sample the full video sequence.

    ``v_feat`` is ``[..., N_v*K, d]`` (a frame-structured ``[..., N_v, K, d]``
    is flattened). Returns ``[..., N_q, d]``.
    """
    if v_feat.ndim == t_feat.ndim + 1:
        v_feat = _flatten_video(v_feat)
    condensed = params.condense(t_feat, "text", t_mask)
    return sample(v_feat, condensed, params.pass_layers("video"), "video")


def fuse_with_strategy(v_feat, t_feat: Tensor, strategy: FusionStrategy, params: FusionModule,
                       t_mask=None) -> Tensor:
    """Fuse frame-structured video ``[..., N_v, K, d]`` with text ``[..., N_t, d]``.

    ``v_feat=None`` stands for zero frames (only meaningful for the
    encoder-style kinds, which then see the text alone).
    """
    strategy.validate(t_feat.shape[-1])
    if params.strategy.kind != strategy.kind:
        raise ConfigError(f"parameters were built for {params.strategy.kind}, not {strategy.kind}")
    kind = strategy.kind
    if v_feat is None and kind not in ENCODER_KINDS:
        raise ContractError(f"{kind} needs video features")

    if kind == "SamplerCondenseText":
        return fuse_tgms(v_feat, t_feat, params, t_mask)
    if kind == "SamplerCondenseVideo":
        condensed = params.condense(_flatten_video(v_feat), "video")
        return sample(t_feat, condensed, params.pass_layers("text"), "text", t_mask)
    if kind == "Decoder":
        v_flat = _flatten_video(v_feat)
        h = t_feat
        for layer in params.layers:
            h = layer(h, v_flat, "text", self_mask=t_mask)
        return h

    lead = t_feat.shape[:-2]
    if v_feat is None:
        x, mask = t_feat, t_mask
    else:
        if kind == "ClassTokenLike":
            rows = T.getitem(v_feat, (..., 0, slice(None)))
        elif kind == "MeanPool":
            rows = T.mean(v_feat, axis=-2)
        elif kind == "MaxPool":
            rows = T.max(v_feat, axis=-2)
        else:
            rows = _flatten_video(v_feat)
        x = T.concat([t_feat, rows], axis=-2)
        mask = None
        if t_mask is not None:
            mask = np.concatenate([np.asarray(t_mask, dtype=bool),
                                   np.ones((*lead, rows.shape[-2]), dtype=bool)], axis=-1)
    for layer in params.layers:
        x = layer(x, key_mask=mask)
    return x


def analytic_cost(strategy: FusionStrategy, m: CostModel, layers: int = 1) -> int:
    """Attention query-key pairs evaluated by ``layers`` fusion layers.

    Per layer: FlattenEncoder ``(N_t + N_v K)^2``; pooled/class-token
    encoders ``(N_t + N_v)^2``; Decoder ``N_t^2 + N_t N_v K``; both sampler
    kinds ``2 N_q^2 + N_q N_t + N_q N_v K`` (the query self-attention of the
    text and video passes included).
    """
    n_video = m.n_v * m.k
    kind = strategy.kind
    if kind == "FlattenEncoder":
        per_layer = (m.n_t + n_video) ** 2
    elif kind in ("ClassTokenLike", "MeanPool", "MaxPool"):
        per_layer = (m.n_t + m.n_v) ** 2
    elif kind == "Decoder":
        per_layer = m.n_t ** 2 + m.n_t * n_video
    elif kind in SAMPLER_KINDS:
        per_layer = 2 * m.n_q ** 2 + m.n_q * m.n_t + m.n_q * n_video
    else:
        raise ConfigError(f"unknown fusion kind {kind!r}")
    return per_layer * layers


def cross_pairs(m: CostModel) -> dict:
    """Sampler cross-attention terms alone: ``{"text": N_q N_t, "video": N_q N_v K}``."""
    return {"text": m.n_q * m.n_t, "video": m.n_q * m.n_v * m.k}
