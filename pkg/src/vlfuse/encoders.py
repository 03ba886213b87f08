"""Toy video and text transformer encoders with freeze plans and adapters.

The video stack attends within each frame only and has no class token; its
output keeps the ``[N_v, K, d]`` frame structure. Learnable time
embeddings are added after the stack, immediately before fusion. The text
stack is a masked pre-norm encoder whose row 0 is the ``[CLS]`` state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import AttentionAdapter, LayerNorm, Linear, Module, TransformerLayer, normal
from .tensor import Tensor


@dataclass
class EncoderConfig:
    d: int = 64
    heads: int = 4
    layers: int = 4
    ffn_mult: int = 4


@dataclass
class VideoInput:
    """Synthetic patch features, ``[..., N_v, K, d_in]``."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim < 3:
            raise DimensionError(f"frames must be [..., N_v, K, d_in], got {self.frames.shape}")


@dataclass
class TextInput:
    """Token ids with a keep-mask; position 0 of every row is ``[CLS]``.

    ``segment_ids`` optionally tags tokens with a segment (question vs.
    option k in a multiple-choice prompt); all zeros when omitted.
    """

    token_ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool)
        if self.attention_mask.shape != self.token_ids.shape:
            raise ContractError(
                f"mask shape {self.attention_mask.shape} != token shape {self.token_ids.shape}"
            )
        if self.segment_ids is None:
            self.segment_ids = np.zeros_like(self.token_ids)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)

    @property
    def length(self) -> int:
        return self.token_ids.shape[-1]


@dataclass
class FreezePlan:
    """Bottom-up frozen layer counts for the two encoders."""

    frozen_video_layers: int = 0
    frozen_text_layers: int = 0


class EncoderStack(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.layers = [TransformerLayer(cfg.d, cfg.heads, cfg.ffn_mult, rng) for _ in range(cfg.layers)]
        self.ln_final = LayerNorm(cfg.d)
        self._cfg = cfg
        self._frozen = 0

    @property
    def d(self) -> int:
        return self._cfg.d

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def frozen_layers(self) -> int:
        return self._frozen

    def embedding_parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def freeze(self, n: int) -> None:
        if not 0 <= n <= self.num_layers:
            raise ConfigError(f"cannot freeze {n} of {self.num_layers} layers")
        for i, layer in enumerate(self.layers):
            for p in layer.host_parameters():
                p.requires_grad = i >= n
            if layer.adapter is not None:
                layer.adapter.set_trainable(True)
        top = n < self.num_layers
        for p in self.embedding_parameters() + self.ln_final.parameters():
            p.requires_grad = top
        self._frozen = n

    def run_layers(self, x: Tensor, key_mask=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, key_mask=key_mask)
        return self.ln_final(x)


class VideoEncoder(EncoderStack):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, d_in: int | None = None,
                 max_frames: int = 16):
        super().__init__(cfg, rng)
        self.patch_proj = Linear(d_in or cfg.d, cfg.d, rng)
        self.time_embeddings = normal(rng, (max_frames, cfg.d), 0.02)

    def embedding_parameters(self):
        return self.patch_proj.parameters() + [self.time_embeddings]

    @property
    def max_frames(self) -> int:
        return self.time_embeddings.shape[0]


class TextEncoder(EncoderStack):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, vocab_size: int = 256,
                 max_len: int = 96, num_segments: int = 5):
        super().__init__(cfg, rng)
        self.token_emb = normal(rng, (vocab_size, cfg.d), 1.0)
        self.pos_emb = normal(rng, (max_len, cfg.d), 0.1)
        self.seg_emb = normal(rng, (num_segments, cfg.d), 0.1)

    def embedding_parameters(self):
        return [self.token_emb, self.pos_emb, self.seg_emb]


def encode_video(v: VideoInput, stack: VideoEncoder) -> Tensor:
    """Frame-wise encoding ``[..., N_v, K, d_in] -> [..., N_v, K, d]``; no class token."""
    frames = v.frames
    *lead, n_v, k, d_in = frames.shape
    if n_v > stack.max_frames:
        raise ConfigError(f"{n_v} frames exceed the time-embedding capacity of {stack.max_frames}")
    if d_in != stack.patch_proj.weight.shape[0]:
        raise DimensionError(f"patch width {d_in} != encoder input width {stack.patch_proj.weight.shape[0]}")
    x = stack.patch_proj(T.Tensor(frames.reshape(-1, k, d_in)))
    x = stack.run_layers(x)
    return T.reshape(x, (*lead, n_v, k, stack.d))


def add_time_embeddings(v_feat: Tensor, stack: VideoEncoder) -> Tensor:
    """Add ``time_embeddings[i]`` to every patch row of frame ``i``."""
    n_v = v_feat.shape[-3]
    if n_v > stack.max_frames:
        raise ConfigError(f"{n_v} frames exceed the time-embedding capacity of {stack.max_frames}")
    rows = T.getitem(stack.time_embeddings, slice(0, n_v))
    return T.add(v_feat, T.reshape(rows, (n_v, 1, stack.d)))


def encode_text(t: TextInput, stack: TextEncoder) -> Tensor:
    """Masked self-attention encoding ``[..., N_t] -> [..., N_t, d]``."""
    ids, mask = t.token_ids, t.attention_mask
    n_t = ids.shape[-1]
    if n_t > stack.pos_emb.shape[0]:
        raise ConfigError(f"text length {n_t} exceeds the {stack.pos_emb.shape[0]} position embeddings")
    if not mask.any(axis=-1).all():
        raise ContractError("text input has a row with every position masked")
    x = T.take(stack.token_emb, ids, axis=0)
    x = T.add(x, T.getitem(stack.pos_emb, slice(0, n_t)))
    x = T.add(x, T.take(stack.seg_emb, t.segment_ids, axis=0))
    return stack.run_layers(x, key_mask=mask)


class Encoders(Module):
    """The video/text encoder pair a freeze plan applies to."""

    def __init__(self, video: VideoEncoder, text: TextEncoder):
        self.video = video
        self.text = text


def apply_freeze_plan(encoders: Encoders, plan: FreezePlan) -> None:
    """Exclude the bottom layers of each stack from optimisation.

    Embeddings (and the final norm) freeze only when every layer of that
    stack is frozen. Forward computation is unchanged.
    """
    encoders.video.freeze(plan.frozen_video_layers)
    encoders.text.freeze(plan.frozen_text_layers)


def attach_adapter(stack: EncoderStack, sites, bottleneck: int | None = None, *,
                   rng: np.random.Generator, attention: bool = True) -> list[AttentionAdapter]:
    """Insert zero-initialised adapters after the FFN of frozen layers ``sites``."""
    bottleneck = bottleneck or max(1, stack.d // 4)
    sites = list(sites)
    for i in sites:
        if not 0 <= i < stack.num_layers:
            raise ConfigError(f"adapter site {i} outside layers 0..{stack.num_layers - 1}")
        if i >= stack.frozen_layers:
            raise ConfigError(f"adapter site {i} is not in the frozen region (frozen={stack.frozen_layers})")
    adapters = []
    for i in sites:
        adapter = AttentionAdapter(stack.d, bottleneck, rng, attention=attention)
        stack.layers[i].adapter = adapter
        adapters.append(adapter)
    return adapters
