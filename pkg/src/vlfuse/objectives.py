"""Pretraining losses (MLM, VTC, VTM, MCM) and the multiple-choice prompt builder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import TextInput
from .errors import ContractError, DataError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor
from .vocab import CLS_ID, DEFAULT_QUESTIONS, MASK_ID, SEP_ID, Vocabulary

MLM_PROBABILITY = 0.15
VTC_TEMPERATURE = 0.05
NUM_OPTIONS = 4


# ---------------------------------------------------------------------------
# heads


class MLMHead(Module):
    """Vocabulary logits for masked text states conditioned on the fused video context."""

    def __init__(self, d: int, vocab_size: int, rng: np.random.Generator):
        self.context = Linear(d, d, rng)
        self.ln = LayerNorm(d)
        self.out = Linear(d, vocab_size, rng, std=0.02)


class PooledHead(Module):
    """Mean over fused rows, layer norm, linear classifier."""

    def __init__(self, d: int, classes: int, rng: np.random.Generator):
        self.ln = LayerNorm(d)
        self.out = Linear(d, classes, rng, std=0.02)

    def __call__(self, fused: Tensor) -> Tensor:
        return self.out(self.ln(T.mean(fused, axis=-2)))


def option_pooling(prompts: TextInput) -> np.ndarray:
    """``[B, 4, N]`` weights averaging each option's prompt tokens (segment ``k + 1`` is option ``k``)."""
    seg = np.asarray(prompts.segment_ids)
    mask = np.asarray(prompts.attention_mask, dtype=bool)
    member = np.stack([(seg == k + 1) & mask for k in range(NUM_OPTIONS)], axis=-2).astype(np.float64)
    counts = member.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ContractError("every prompt needs a nonempty segment for each option")
    return member / counts


class McmHead(Module):
    """Four-way option relevance over the pooled fused video-prompt state.

    ``logit_k = <P_f ln(mean fused), P_o ln(mean of option k's prompt states)> / sqrt(d)``,
    so an option's score depends on its own text rather than on a fixed slot
    weight.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.ln_fused = LayerNorm(d)
        self.ln_option = LayerNorm(d)
        self.fused_proj = Linear(d, d, rng)
        self.option_proj = Linear(d, d, rng, std=0.02)

    def __call__(self, fused: Tensor, prompt_states: Tensor, prompts: TextInput) -> Tensor:
        d = fused.shape[-1]
        pooled = self.fused_proj(self.ln_fused(T.mean(fused, axis=-2)))
        options = T.matmul(T.Tensor(option_pooling(prompts)), prompt_states)
        options = self.option_proj(self.ln_option(options))
        scores = T.matmul(options, T.reshape(pooled, (*pooled.shape, 1)))
        return T.scale(T.reshape(scores, scores.shape[:-1]), 1.0 / np.sqrt(d))


# ---------------------------------------------------------------------------
# MLM


def mlm_mask(t: TextInput, rng: np.random.Generator, p: float = MLM_PROBABILITY):
    """Replace each eligible token by ``[MASK]`` independently with probability ``p``.

    ``[CLS]`` (position 0) and padded positions are never eligible. Returns
    the masked input, the flat row-major positions that were masked and the
    original ids at those positions.
    """
    ids = t.token_ids
    eligible = t.attention_mask.copy()
    eligible[..., 0] = False
    chosen = eligible & (rng.random(ids.shape) < p)
    masked = ids.copy()
    masked[chosen] = MASK_ID
    positions = np.flatnonzero(chosen)
    return TextInput(masked, t.attention_mask.copy(), t.segment_ids.copy()), positions, ids.reshape(-1)[positions]


def mlm_loss(text_states: Tensor, fused: Tensor, positions, targets, head: MLMHead) -> Tensor:
    """Cross-entropy over the vocabulary at masked positions; 0 when nothing is masked.

    ``text_states`` is ``[B, N_t, d]`` (masked text through the text
    encoder), ``fused`` is ``[B, N_q, d]``. Each masked state receives the
    projected mean of its item's fused rows before the prediction layer.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return Tensor(0.0)
    if text_states.ndim == 2:
        text_states = T.reshape(text_states, (1, *text_states.shape))
        fused = T.reshape(fused, (1, *fused.shape))
    b, n_t, d = text_states.shape
    rows = T.take(T.reshape(text_states, (b * n_t, d)), positions)
    context = head.context(T.mean(fused, axis=-2))
    rows = T.add(rows, T.take(context, positions // n_t))
    logits = head.out(head.ln(rows))
    return T.cross_entropy_logits(logits, targets)


# ---------------------------------------------------------------------------
# VTC / VTM


def vtc_loss(video_repr: Tensor, text_repr: Tensor, temperature: float = VTC_TEMPERATURE) -> Tensor:
    """Symmetric in-batch InfoNCE over cosine similarities divided by ``temperature``."""
    if video_repr.shape[0] < 2:
        raise ContractError("contrastive loss needs a batch of at least 2 pairs")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    v = T.l2_normalize(video_repr)
    t = T.l2_normalize(text_repr)
    sim = T.scale(T.matmul(v, T.swapaxes(t, 0, 1)), 1.0 / temperature)
    target = np.arange(sim.shape[0])
    v2t = T.cross_entropy_logits(sim, target)
    t2v = T.cross_entropy_logits(T.swapaxes(sim, 0, 1), target)
    return T.scale(T.add(v2t, t2v), 0.5)


def vtm_negatives(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Text index paired with each video for the mismatched half: a fixed-point-free rotation."""
    shift = int(rng.integers(1, batch_size))
    return (np.arange(batch_size) + shift) % batch_size


def vtm_loss(fused: Tensor, labels, head: PooledHead) -> Tensor:
    """Two-way match/mismatch cross-entropy on mean-pooled fused states (label 1 = match)."""
    return T.cross_entropy_logits(head(fused), np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# MCM


@dataclass
class McmPrompt:
    question: str
    option_texts: list
    correct_option: int
    text: str

    def encode(self, vocab: Vocabulary) -> TextInput:
        """Token ids with segment ids: 0 for the question, k for option k."""
        ids = vocab.encode(self.text)
        seg, current = [], 0
        for i in ids:
            if i == SEP_ID:
                current += 1
            seg.append(current)
        if not ids or ids[0] != CLS_ID:
            raise ContractError("rendered prompt must start with [CLS]")
        return TextInput(np.array(ids), np.ones(len(ids), dtype=bool), np.array(seg))


def render_mcm(question: str, options) -> str:
    """Render the four-choice template verbatim (the question is followed by `` ?``)."""
    if len(options) != NUM_OPTIONS:
        raise ContractError(f"expected {NUM_OPTIONS} options, got {len(options)}")
    parts = [f"[CLS]{question} ?"]
    parts += [f"[SEP] Option {i + 1}: {opt}." for i, opt in enumerate(options)]
    return " ".join(parts)


def build_mcm_prompt(question: str | None, correct: str, corpus, rng: np.random.Generator,
                     questions=DEFAULT_QUESTIONS) -> McmPrompt:
    """Place ``correct`` in a uniformly random slot among three corpus distractors.

    Distractors are drawn without replacement from the distinct corpus
    entries other than ``correct``. ``question=None`` draws one from
    ``questions``.
    """
    if question is None:
        question = questions[int(rng.integers(len(questions)))]
    pool = [c for c in dict.fromkeys(corpus) if c != correct]
    if len(pool) < NUM_OPTIONS - 1:
        raise DataError(f"need {NUM_OPTIONS - 1} distinct distractors, corpus offers {len(pool)}")
    slot = int(rng.integers(NUM_OPTIONS))
    picks = rng.choice(len(pool), size=NUM_OPTIONS - 1, replace=False)
    distractors = iter(pool[i] for i in picks)
    options = [correct if i == slot else next(distractors) for i in range(NUM_OPTIONS)]
    return McmPrompt(question, options, slot, render_mcm(question, options))


def mcm_loss(fused: Tensor, prompt_states: Tensor, prompts: TextInput, correct_options, head: McmHead) -> Tensor:
    """Four-way cross-entropy over option relevance scores."""
    return T.cross_entropy_logits(head(fused, prompt_states, prompts), np.asarray(correct_options, dtype=np.int64))


def mvm_loss(*_args, **_kwargs) -> None:
    """Masked video modeling is intentionally not trained: it conflicts with the other objectives."""
    return None


# ---------------------------------------------------------------------------
# combination


LOSS_NAMES = ("mlm", "vtc", "vtm", "mcm")


@dataclass
class LossBundle:
    l_mlm: Tensor | None
    l_vtc: Tensor | None
    l_vtm: Tensor | None
    l_mcm: Tensor | None
    total: Tensor

    def values(self) -> dict:
        out = {}
        for name in LOSS_NAMES:
            v = getattr(self, f"l_{name}")
            out[f"l_{name}"] = None if v is None else v.item()
        out["total"] = self.total.item()
        return out


def total_loss(l_mlm=None, l_vtc=None, l_vtm=None, l_mcm=None) -> LossBundle:
    """Unit-weight sum of whichever losses are present."""
    parts = [x for x in (l_mlm, l_vtc, l_vtm, l_mcm) if x is not None]
    if not parts:
        raise ContractError("at least one loss must be enabled")
    total = parts[0]
    for x in parts[1:]:
        total = T.add(total, x)
    return LossBundle(l_mlm, l_vtc, l_vtm, l_mcm, total)
