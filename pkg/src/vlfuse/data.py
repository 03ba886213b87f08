"""Deterministic synthetic video-text world with planted latent structure.

Each pair has a topic and a detail. Patches are the sum of the topic center
(first half of the feature axis) and the detail center (second half) plus
Gaussian noise; captions mix topic words, detail words and shared
background words. The topic alone makes classification learnable; the
topic-detail combination gives retrieval something finer to find.
Setting ``num_details=0`` leaves a pure topic world.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import TextInput, VideoInput
from .errors import ContractError, DataError
from .tensor import make_rng
from .vocab import CLS_ID, PAD_ID, Vocabulary, template_words


@dataclass
class WorldSpec:
    num_topics: int = 8
    num_details: int = 8
    words_per_topic: int = 4
    words_per_detail: int = 2
    num_background: int = 16
    vocab_size: int = 256
    caption_len: tuple = (6, 12)
    n_frames: int = 4
    n_patches: int = 16
    d_in: int = 64
    sigma: float = 0.5
    topic_weight: float = 0.5
    detail_weight: float = 0.25
    foreground_frac: float = 0.5
    seed: int = 0


@dataclass
class SyntheticPair:
    topic: int
    detail: int
    video: VideoInput
    text: TextInput
    caption: str
    center: np.ndarray = field(repr=False)


@dataclass
class PretrainBatch:
    pairs: list
    ids: np.ndarray
    frames: np.ndarray
    text: TextInput

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def captions(self) -> list[str]:
        return [p.caption for p in self.pairs]

    @property
    def topics(self) -> np.ndarray:
        return np.array([p.topic for p in self.pairs])


def _centers(rng, n, d_total, dims, min_dist):
    for _ in range(1000):
        c = np.zeros((n, d_total))
        c[:, dims] = rng.normal(size=(n, len(dims)))
        diff = c[:, None, :] - c[None, :, :]
        dist = np.sqrt((diff**2).sum(-1)) + np.eye(n) * 1e9
        if dist.min() >= min_dist:
            return c
    raise DataError(f"could not place {n} centers at distance >= {min_dist}")


class World:
    """A materialised :class:`WorldSpec`: vocabulary, word pools and centers."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        rng = make_rng(spec.seed, 0xC0FFEE)
        self.topic_words = [[f"t{t}w{j}" for j in range(spec.words_per_topic)] for t in range(spec.num_topics)]
        self.detail_words = [[f"d{k}w{j}" for j in range(spec.words_per_detail)] for k in range(spec.num_details)]
        self.background_words = [f"bg{j}" for j in range(spec.num_background)]
        words = template_words() + sum(self.topic_words, []) + sum(self.detail_words, []) + self.background_words
        self.vocab = Vocabulary(words, size=spec.vocab_size)

        d = spec.d_in
        half = d // 2 if spec.num_details else d
        min_dist = 4 * spec.sigma
        self.topic_centers = _centers(rng, spec.num_topics, d, np.arange(half), min_dist)
        if spec.num_details:
            self.detail_centers = _centers(rng, spec.num_details, d, np.arange(half, d), min_dist)
        else:
            self.detail_centers = np.zeros((1, d))

    def center(self, topic: int, detail: int) -> np.ndarray:
        return self.topic_centers[topic] + self.detail_centers[detail if self.spec.num_details else 0]

    def topic_token_distribution(self, topic: int) -> np.ndarray:
        """Marginal caption-token distribution of a topic (details averaged out)."""
        s = self.spec
        p = np.zeros(self.vocab.size)
        bg_w = 1.0 - s.topic_weight - (s.detail_weight if s.num_details else 0.0)
        for w in self.topic_words[topic]:
            p[self.vocab.id(w)] += s.topic_weight / len(self.topic_words[topic])
        for words in self.detail_words:
            for w in words:
                p[self.vocab.id(w)] += s.detail_weight / (len(words) * s.num_details)
        for w in self.background_words:
            p[self.vocab.id(w)] += bg_w / len(self.background_words)
        return p / p.sum()

    def caption(self, topic: int, detail: int, rng: np.random.Generator) -> list[str]:
        s = self.spec
        lo, hi = s.caption_len
        n = int(rng.integers(lo, hi + 1))
        words = [self.topic_words[topic][rng.integers(s.words_per_topic)]]
        if s.num_details:
            words.append(self.detail_words[detail][rng.integers(s.words_per_detail)])
        for u in rng.random(n - len(words)):
            if u < s.topic_weight:
                words.append(self.topic_words[topic][rng.integers(s.words_per_topic)])
            elif s.num_details and u < s.topic_weight + s.detail_weight:
                words.append(self.detail_words[detail][rng.integers(s.words_per_detail)])
            else:
                words.append(self.background_words[rng.integers(s.num_background)])
        return [words[i] for i in rng.permutation(len(words))]


def build_world(spec: WorldSpec | None = None) -> World:
    return World(spec or WorldSpec())


def foreground_count(spec: WorldSpec) -> int:
    """Patches per frame that carry the item's center; the rest are background noise."""
    if not 0.0 < spec.foreground_frac <= 1.0:
        raise DataError(f"foreground_frac must be in (0, 1], got {spec.foreground_frac}")
    return max(1, round(spec.foreground_frac * spec.n_patches))


def generate_pair(world: World, rng: np.random.Generator) -> SyntheticPair:
    s = world.spec
    topic = int(rng.integers(s.num_topics))
    detail = int(rng.integers(s.num_details)) if s.num_details else 0
    center = world.center(topic, detail)
    shape = (s.n_frames, s.n_patches, s.d_in)
    frames = np.broadcast_to(center, shape).copy()
    n_fg = foreground_count(s)
    if n_fg < s.n_patches:
        for f in range(s.n_frames):
            frames[f, rng.permutation(s.n_patches)[n_fg:]] = 0.0
    if s.sigma > 0:
        frames += s.sigma * rng.normal(size=shape)
    words = world.caption(topic, detail, rng)
    ids = [CLS_ID] + [world.vocab.id(w) for w in words]
    text = TextInput(np.array(ids), np.ones(len(ids), dtype=bool))
    return SyntheticPair(topic, detail, VideoInput(frames), text, " ".join(words), center)


def pad_texts(texts: list[TextInput]) -> TextInput:
    n = max(t.length for t in texts)
    ids = np.full((len(texts), n), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(texts), n), dtype=bool)
    seg = np.zeros((len(texts), n), dtype=np.int64)
    for i, t in enumerate(texts):
        ids[i, : t.length] = t.token_ids
        mask[i, : t.length] = t.attention_mask
        seg[i, : t.length] = t.segment_ids
    return TextInput(ids, mask, seg)


def collate(pairs: list[SyntheticPair], ids) -> PretrainBatch:
    frames = np.stack([p.video.frames for p in pairs])
    return PretrainBatch(list(pairs), np.asarray(ids, dtype=np.int64), frames, pad_texts([p.text for p in pairs]))


def generate_batch(world: World, size: int, seed: int, offset: int = 0) -> PretrainBatch:
    """``size`` pairs; item ``i`` is seeded by ``(seed, offset + i)`` so any item replays alone."""
    if size < 2:
        raise ContractError("a pretraining batch needs at least 2 pairs for in-batch negatives")
    ids = np.arange(offset, offset + size)
    return collate([generate_pair(world, make_rng(seed, int(i))) for i in ids], ids)


def build_answer_corpus(pairs) -> list[str]:
    """Deduplicated captions (order of first appearance) for distractor sampling."""
    captions = [p if isinstance(p, str) else p.caption for p in pairs]
    corpus = list(dict.fromkeys(captions))
    if len(corpus) < 4:
        raise DataError(f"need at least 4 distinct captions, got {len(corpus)}")
    return corpus


def dump_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(pairs):
            record = {
                "id": i,
                "topic": p.topic,
                "detail": p.detail,
                "patches": p.video.frames.tolist(),
                "token_ids": p.text.token_ids.tolist(),
                "caption": p.caption,
                "center": p.center.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_pairs(path) -> list[SyntheticPair]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        ids = np.array(r["token_ids"], dtype=np.int64)
        frames = np.array(r["patches"], dtype=np.float64)
        pairs.append(SyntheticPair(r["topic"], r["detail"], VideoInput(frames),
                                   TextInput(ids, np.ones(len(ids), dtype=bool)), r["caption"],
                                   np.array(r["center"], dtype=np.float64)))
    return pairs
