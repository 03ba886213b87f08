"""AdamW, the warm-up schedule, the pretraining loop, evaluation metrics and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import tensor as T
from .data import World, WorldSpec, build_answer_corpus, build_world, generate_batch, pad_texts
from .encoders import FreezePlan
from .errors import ConfigError, ContractError, NonFiniteError
from .model import ModelConfig, VLModel
from .objectives import LOSS_NAMES, build_mcm_prompt
from .sampler import FusionStrategy

log = logging.getLogger(__name__)

EVAL_OFFSET = 1 << 40
CORPUS_OFFSET = 1 << 41
MCM_EVAL_STREAM = 0xE7A1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 300
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    eval_every: int = 0
    eval_size: int = 100
    mcm_eval_size: int = 200
    corpus_size: int = 512
    losses: tuple = LOSS_NAMES

    def validate(self) -> None:
        if not self.losses:
            raise ConfigError("at least one loss must be enabled")
        unknown = set(self.losses) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown losses {sorted(unknown)}; expected a subset of {LOSS_NAMES}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.steps < 0 or self.eval_every < 0:
            raise ConfigError("steps and eval_every must be non-negative")
        if self.eval_size < 10:
            raise ConfigError("eval_size must be >= 10")


@dataclass
class RunConfig:
    """Everything a run depends on.

    TOML sections: ``[world]``, ``[model]`` (with ``[model.strategy]`` and
    ``[model.freeze]``), ``[train]`` and the shorthand ``[fusion]``, whose
    ``kind``/``shared_sampler``/``adapt_pooling``/``residual_combine`` keys
    set the strategy and ``num_queries``/``layers``/``heads`` the sampler size.
    """

    world: WorldSpec = field(default_factory=WorldSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        world = _build(WorldSpec, raw.pop("world", {}))
        model_raw = dict(raw.pop("model", {}))
        strategy_raw = dict(model_raw.pop("strategy", {}))
        for key, value in raw.pop("fusion", {}).items():
            if key in _FUSION_MODEL_KEYS:
                model_raw[_FUSION_MODEL_KEYS[key]] = value
            else:
                strategy_raw[key] = value
        strategy = _build(FusionStrategy, strategy_raw)
        freeze = _build(FreezePlan, model_raw.pop("freeze", {}))
        model = _build(ModelConfig, model_raw, strategy=strategy, freeze=freeze)
        train = _build(TrainConfig, raw.pop("train", {}))
        if raw:
            raise ConfigError(f"unknown config sections {sorted(raw)}")
        return cls(world, model, train)


# ``[fusion]`` keys that live on ModelConfig; the rest belong to FusionStrategy
_FUSION_MODEL_KEYS = {"num_queries": "num_queries", "layers": "fusion_layers", "heads": "fusion_heads"}


def _build(kind, values: dict, **extra):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return kind(**values, **extra)


def load_config(path) -> RunConfig:
    """Read a TOML run config; ``MULTI_SEED`` in the environment overrides ``train.seed``."""
    with open(path, "rb") as fh:
        cfg = RunConfig.from_dict(tomllib.load(fh))
    if "MULTI_SEED" in os.environ:
        try:
            cfg.train.seed = int(os.environ["MULTI_SEED"])
        except ValueError as exc:
            raise ConfigError(f"MULTI_SEED must be an integer, got {os.environ['MULTI_SEED']!r}") from exc
    return cfg


# ---------------------------------------------------------------------------
# optimisation


class Schedule:
    """Linear warm-up from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""

    def __init__(self, base_lr: float, total_steps: int, warmup_steps: int):
        if warmup_steps < 0 or total_steps < 0 or warmup_steps > total_steps:
            raise ConfigError(f"invalid schedule: warmup {warmup_steps}, total {total_steps}")
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps

    @classmethod
    def for_run(cls, cfg: TrainConfig) -> "Schedule":
        warmup = min(cfg.steps, max(1, round(cfg.warmup_frac * cfg.steps))) if cfg.steps else 0
        return cls(cfg.lr, cfg.steps, warmup)

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        tail = self.total_steps - self.warmup_steps
        if tail <= 0:
            return self.base_lr
        return self.base_lr * max(0.0, (self.total_steps - step) / tail)


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0


class AdamW:
    """Adam with bias correction and decoupled (multiplicative) weight decay.

    Parameters without a gradient this step (frozen, or untouched by the
    enabled losses) are skipped entirely, decay included.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimState({}, {})

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        active = [p for p in self.params if p.requires_grad and p.grad is not None]
        if not active:
            raise ContractError("optimizer step with no populated gradients")
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p in active:
            key = id(p)
            g = p.grad
            m = st.m.get(key)
            if m is None:
                m = st.m[key] = np.zeros_like(p.data)
                st.v[key] = np.zeros_like(p.data)
            v = st.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, state: AdamW, lr: float | None = None) -> None:
    """Functional alias: one update of ``params`` through ``state``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        state.params = list(params)
    state.step(lr)


# ---------------------------------------------------------------------------
# metrics


def g_mean(r1: float, r5: float, r10: float) -> float:
    """Geometric mean of three recalls (any common scale)."""
    return float(np.cbrt(r1 * r5 * r10))


def retrieval_ranks(sim: np.ndarray) -> np.ndarray:
    """Rank of the true item (diagonal) for each query row; ties go to the lower item id."""
    sim = np.asarray(sim)
    diag = np.diag(sim)[:, None]
    ids = np.arange(sim.shape[1])
    ahead = (sim > diag) | ((sim == diag) & (ids[None, :] < np.arange(sim.shape[0])[:, None]))
    return ahead.sum(axis=1)


def recall_at(sim: np.ndarray, ks=(1, 5, 10)) -> dict:
    ranks = retrieval_ranks(sim)
    out = {f"r{k}": float(np.mean(ranks < k)) for k in ks}
    if set(ks) >= {1, 5, 10}:
        out["g_mean"] = g_mean(out["r1"], out["r5"], out["r10"])
    return out


def mcm_accuracy(logits: np.ndarray, answers) -> float:
    """Argmax accuracy; ``np.argmax`` resolves ties toward the lowest option index."""
    return float(np.mean(np.argmax(np.asarray(logits), axis=-1) == np.asarray(answers)))


def evaluate_retrieval(model: VLModel, batch, chunk: int = 100) -> dict:
    """Text-to-video retrieval over ``batch`` by contrastive similarity."""
    if len(batch) < 10:
        raise ContractError("retrieval evaluation needs at least 10 items")
    with T.no_grad():
        v, t = [], []
        for s in range(0, len(batch), chunk):
            v.append(model.video_repr(model.video_features(batch.frames[s:s + chunk])).data)
            text = _slice_text(batch.text, s, s + chunk)
            t.append(model.text_repr(model.text_features(text)).data)
    v = np.concatenate(v)
    t = np.concatenate(t)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    return recall_at(t @ v.T)


def _slice_text(text, a, b):
    from .encoders import TextInput

    mask = text.attention_mask[a:b]
    n = int(mask.sum(axis=1).max())
    return TextInput(text.token_ids[a:b, :n], mask[:, :n], text.segment_ids[a:b, :n])


def mcm_eval_prompts(batch, corpus, seed: int):
    rng = T.make_rng(seed, MCM_EVAL_STREAM)
    return [build_mcm_prompt(None, c, corpus, rng) for c in batch.captions]


def evaluate_mcm(model: VLModel, batch, prompts, vocab, chunk: int = 50) -> float:
    """Fraction of prompts whose highest-scoring option is the true caption."""
    if len(prompts) != len(batch):
        raise ContractError("one prompt per evaluation item is required")
    logits = []
    with T.no_grad():
        for s in range(0, len(batch), chunk):
            encoded = pad_texts([p.encode(vocab) for p in prompts[s:s + chunk]])
            v_feat = model.video_features(batch.frames[s:s + chunk])
            logits.append(model.mcm_logits(v_feat, encoded).data)
    return mcm_accuracy(np.concatenate(logits), [p.correct_option for p in prompts])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    config: RunConfig
    model: VLModel
    world: World
    history: list
    evals: list
    seconds: float

    def losses(self, name: str = "total") -> np.ndarray:
        key = name if name == "total" else f"l_{name}"
        return np.array([h[key] for h in self.history], dtype=np.float64)


class Trainer:
    """Owns the world, model, optimizer and evaluation sets for one run."""

    def __init__(self, cfg: RunConfig):
        cfg.train.validate()
        self.cfg = cfg
        self.world = build_world(cfg.world)
        if cfg.model.vocab_size < self.world.vocab.size:
            raise ConfigError(f"model vocab_size {cfg.model.vocab_size} < world vocabulary {self.world.vocab.size}")
        if cfg.model.d_in != cfg.world.d_in or cfg.model.max_frames < cfg.world.n_frames:
            raise ConfigError("model d_in / max_frames do not fit the world's patches and frames")
        seed = cfg.train.seed
        self.model = build_model(cfg)
        self.optim = AdamW(self.model.parameters(), cfg.train.lr, weight_decay=cfg.train.weight_decay)
        self.schedule = Schedule.for_run(cfg.train)
        corpus_pairs = generate_batch(self.world, cfg.train.corpus_size, seed, CORPUS_OFFSET).pairs
        self.corpus = build_answer_corpus(corpus_pairs)
        self.eval_batch = generate_batch(self.world, cfg.train.eval_size, seed, EVAL_OFFSET)
        self.mcm_batch = generate_batch(self.world, cfg.train.mcm_eval_size, seed, EVAL_OFFSET)
        self.mcm_prompts = mcm_eval_prompts(self.mcm_batch, self.corpus, seed)
        self.history: list = []
        self.evals: list = []

    def evaluate(self, step: int) -> dict:
        record = {"step": step}
        record.update(evaluate_retrieval(self.model, self.eval_batch))
        record["mcm_acc"] = evaluate_mcm(self.model, self.mcm_batch, self.mcm_prompts, self.world.vocab)
        self.evals.append(record)
        return record

    def train_step(self, step: int) -> dict:
        tc = self.cfg.train
        batch = generate_batch(self.world, tc.batch_size, tc.seed, step * tc.batch_size)
        rng = T.make_rng(tc.seed, 0x57E9, step)
        self.model.zero_grad()
        try:
            with T.Graph(keep_record=False):
                bundle = self.model.losses(batch, rng, vocab=self.world.vocab, corpus=self.corpus,
                                           enabled=tc.losses)
                T.backward(bundle.total)
        except NonFiniteError as exc:
            raise NonFiniteError(exc.op, f"training aborted at step {step}: {exc}") from exc
        self.optim.step(self.schedule(step))
        record = {"step": step, **bundle.values()}
        self.history.append(record)
        return record

    def run(self, out_dir=None) -> TrainResult:
        tc = self.cfg.train
        start = time.perf_counter()
        self.evaluate(0)
        for step in range(tc.steps):
            rec = self.train_step(step)
            if tc.eval_every and (step + 1) % tc.eval_every == 0 and step + 1 < tc.steps:
                self.evaluate(step + 1)
            if step % 50 == 0:
                log.info("step %d total %.4f", step, rec["total"])
        if tc.steps:
            self.evaluate(tc.steps)
        result = TrainResult(self.cfg, self.model, self.world, self.history, self.evals,
                             time.perf_counter() - start)
        if out_dir is not None:
            write_run(result, out_dir)
        return result


def build_model(cfg: RunConfig) -> VLModel:
    return VLModel(cfg.model, T.make_rng(cfg.train.seed, 0x30DE1))


def train(cfg: RunConfig, out_dir=None) -> TrainResult:
    """Run one pretraining job; deterministic given ``cfg``."""
    return Trainer(cfg).run(out_dir)


def write_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "evals.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.evals:
            fh.write(json.dumps(rec) + "\n")
    save_checkpoint(result.model, result.config, out)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: VLModel, cfg: RunConfig, out_dir) -> None:
    """``manifest.json`` (config and parameter layout) plus ``params.bin`` (little-endian f64)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").reshape(-1))
        offset += p.size
    (out / "params.bin").write_bytes(np.concatenate(chunks).tobytes())
    manifest = {"dtype": "<f8", "count": offset, "config": cfg.to_dict(), "params": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_checkpoint(path) -> tuple[VLModel, RunConfig]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(manifest["config"])
    model = build_model(cfg)
    flat = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
    if flat.size != manifest["count"]:
        raise ContractError(f"params.bin holds {flat.size} values, manifest declares {manifest['count']}")
    params = dict(model.named_parameters())
    if set(params) != {e["name"] for e in manifest["params"]}:
        raise ContractError("checkpoint parameter names do not match the configured model")
    for e in manifest["params"]:
        p = params[e["name"]]
        if list(p.shape) != e["shape"]:
            raise ContractError(f"shape mismatch for {e['name']}: {p.shape} vs {e['shape']}")
        p.data[...] = flat[e["offset"]:e["offset"] + p.size].reshape(p.shape)
    return model, cfg


def evaluate_checkpoint(path) -> dict:
    """Reload a checkpoint and recompute the final evaluation metrics."""
    model, cfg = load_checkpoint(path)
    trainer = Trainer(cfg)
    trainer.model = model
    return trainer.evaluate(cfg.train.steps)


# ---------------------------------------------------------------------------
# ablations


def ablation_variants(base: RunConfig) -> dict:
    """The comparison rows: full model, no Adapt-Pooling, unshared sampler, no MCM."""
    def variant(**changes):
        cfg = RunConfig.from_dict(base.to_dict())
        for key, value in changes.items():
            section, name = key.split("__")
            target = cfg.model.strategy if section == "strategy" else getattr(cfg, section)
            setattr(target, name, value)
        return cfg

    no_mcm = tuple(x for x in base.train.losses if x != "mcm")
    return {
        "TGMS (AP, SS, MCM)": variant(),
        "no Adapt-Pooling": variant(strategy__adapt_pooling=False),
        "unshared sampler": variant(strategy__shared_sampler=False),
        "no MCM in training": variant(train__losses=no_mcm),
    }


def ablation_table(results: dict) -> str:
    """Markdown table of final metrics per ablation row."""
    lines = ["| variant | AP | SS | MCM | R@1 | R@5 | R@10 | G-Mean | MCM acc |",
             "|---|---|---|---|---|---|---|---|---|"]
    for name, res in results.items():
        s = res.config.model.strategy
        e = res.evals[-1]
        mark = lambda b: "y" if b else "n"  # noqa: E731
        lines.append(
            f"| {name} | {mark(s.adapt_pooling)} | {mark(s.shared_sampler)} | "
            f"{mark('mcm' in res.config.train.losses)} | {100 * e['r1']:.1f} | {100 * e['r5']:.1f} | "
            f"{100 * e['r10']:.1f} | {100 * e['g_mean']:.1f} | {100 * e['mcm_acc']:.1f} |"
        )
    return "\n".join(lines)


def init_loss_reference(cfg: RunConfig, vocab_size: int) -> dict:
    """Uniform-prediction values of each loss: ln V, ln B, ln 2, ln 4."""
    return {"l_mlm": math.log(vocab_size), "l_vtc": math.log(cfg.train.batch_size),
            "l_vtm": math.log(2), "l_mcm": math.log(4)}
