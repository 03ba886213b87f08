"""The full video-text model: encoders, fusion, contrastive projections and loss heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import PretrainBatch, pad_texts
from .encoders import (EncoderConfig, Encoders, FreezePlan, TextEncoder, TextInput, VideoEncoder, VideoInput,
                       add_time_embeddings, apply_freeze_plan, attach_adapter, encode_text, encode_video)
from .errors import ConfigError
from .nn import Linear, Module
from .objectives import (LOSS_NAMES, VTC_TEMPERATURE, LossBundle, McmHead, MLMHead, PooledHead, build_mcm_prompt,
                         mcm_loss, mlm_loss, mlm_mask, total_loss, vtc_loss, vtm_loss, vtm_negatives)
from .sampler import FusionModule, FusionStrategy
from .tensor import Tensor
from .vocab import Vocabulary


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    video_layers: int = 4
    text_layers: int = 4
    fusion_layers: int = 4
    fusion_heads: int = 4
    num_queries: int = 16
    ffn_mult: int = 4
    vocab_size: int = 256
    max_len: int = 96
    d_in: int = 64
    max_frames: int = 16
    temperature: float = VTC_TEMPERATURE
    strategy: FusionStrategy = field(default_factory=FusionStrategy)
    freeze: FreezePlan = field(default_factory=FreezePlan)
    video_adapter_sites: tuple = ()
    text_adapter_sites: tuple = ()
    adapter_bottleneck: int = 0


class VLModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.encoders = Encoders(
            VideoEncoder(EncoderConfig(cfg.d, cfg.heads, cfg.video_layers, cfg.ffn_mult), rng, cfg.d_in,
                         cfg.max_frames),
            TextEncoder(EncoderConfig(cfg.d, cfg.heads, cfg.text_layers, cfg.ffn_mult), rng, cfg.vocab_size,
                        cfg.max_len),
        )
        self.fusion = FusionModule(cfg.strategy, cfg.d, rng, heads=cfg.fusion_heads, layers=cfg.fusion_layers,
                                   num_queries=cfg.num_queries, ffn_mult=cfg.ffn_mult)
        self.video_proj = Linear(cfg.d, cfg.d, rng)
        self.text_proj = Linear(cfg.d, cfg.d, rng)
        self.mlm_head = MLMHead(cfg.d, cfg.vocab_size, rng)
        self.vtm_head = PooledHead(cfg.d, 2, rng)
        self.mcm_head = McmHead(cfg.d, rng)
        apply_freeze_plan(self.encoders, cfg.freeze)
        bottleneck = cfg.adapter_bottleneck or None
        if cfg.video_adapter_sites:
            attach_adapter(self.encoders.video, cfg.video_adapter_sites, bottleneck, rng=rng)
        if cfg.text_adapter_sites:
            attach_adapter(self.encoders.text, cfg.text_adapter_sites, bottleneck, rng=rng)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    # -- features ---------------------------------------------------------

    def video_features(self, frames: np.ndarray) -> Tensor:
        """``[B, N_v, K, d_in] -> [B, N_v, K, d]`` with time embeddings added."""
        stack = self.encoders.video
        return add_time_embeddings(encode_video(VideoInput(frames), stack), stack)

    def text_features(self, t: TextInput) -> Tensor:
        return encode_text(t, self.encoders.text)

    def video_repr(self, v_feat: Tensor) -> Tensor:
        *lead, n_v, k, d = v_feat.shape
        return self.video_proj(T.mean(T.reshape(v_feat, (*lead, n_v * k, d)), axis=-2))

    def text_repr(self, t_feat: Tensor) -> Tensor:
        return self.text_proj(T.getitem(t_feat, (..., 0, slice(None))))

    def fuse(self, v_feat: Tensor, t_feat: Tensor, t_mask=None) -> Tensor:
        return self.fusion(v_feat, t_feat, t_mask)

    def mcm_logits(self, v_feat: Tensor, prompts: TextInput) -> Tensor:
        t_feat = self.text_features(prompts)
        return self.mcm_head(self.fuse(v_feat, t_feat, prompts.attention_mask), t_feat, prompts)

    # -- losses -----------------------------------------------------------

    def losses(self, batch: PretrainBatch, rng: np.random.Generator, *, vocab: Vocabulary, corpus=None,
               enabled=LOSS_NAMES) -> LossBundle:
        """Compute the enabled losses on one batch; disabled entries are ``None``."""
        enabled = set(enabled)
        unknown = enabled - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown losses {sorted(unknown)}")
        if "mcm" in enabled and corpus is None:
            raise ConfigError("the MCM loss needs a distractor corpus")
        b = len(batch)
        v_feat = self.video_features(batch.frames)
        text = batch.text
        t_feat = self.text_features(text) if enabled & {"vtc", "vtm"} else None
        out = dict.fromkeys(LOSS_NAMES)

        if "vtc" in enabled:
            out["vtc"] = vtc_loss(self.video_repr(v_feat), self.text_repr(t_feat), self._cfg.temperature)

        if "mlm" in enabled:
            masked, positions, targets = mlm_mask(text, rng)
            m_feat = self.text_features(masked)
            fused = self.fuse(v_feat, m_feat, masked.attention_mask)
            out["mlm"] = mlm_loss(m_feat, fused, positions, targets, self.mlm_head)

        if "vtm" in enabled:
            neg = vtm_negatives(b, rng)
            pair_t = T.concat([t_feat, T.take(t_feat, neg)], axis=0)
            pair_v = T.concat([v_feat, v_feat], axis=0)
            mask = np.concatenate([text.attention_mask, text.attention_mask[neg]], axis=0)
            labels = np.concatenate([np.ones(b, dtype=np.int64), np.zeros(b, dtype=np.int64)])
            out["vtm"] = vtm_loss(self.fuse(pair_v, pair_t, mask), labels, self.vtm_head)

        if "mcm" in enabled:
            prompts = [build_mcm_prompt(None, c, corpus, rng) for c in batch.captions]
            encoded = pad_texts([p.encode(vocab) for p in prompts])
            answers = [p.correct_option for p in prompts]
            p_feat = self.text_features(encoded)
            out["mcm"] = mcm_loss(self.fuse(v_feat, p_feat, encoded.attention_mask), p_feat, encoded, answers,
                                  self.mcm_head)

        return total_loss(out["mlm"], out["vtc"], out["vtm"], out["mcm"])
