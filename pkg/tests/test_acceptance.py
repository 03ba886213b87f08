"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from conftest import tiny_run
from golden import RENDER_CASES, SEEDED_BUILDS, SLOT_COUNTS_SEED_2024, seeded_builds
from vlfuse import tensor as T
from vlfuse.bench import BenchGrid, run_bench
from vlfuse.data import WorldSpec, build_answer_corpus, build_world, generate_batch
from vlfuse.encoders import add_time_embeddings, attach_adapter, encode_text, encode_video, VideoInput
from vlfuse.model import ModelConfig, VLModel
from vlfuse.objectives import build_mcm_prompt, render_mcm
from vlfuse.sampler import KINDS, AdaptPool, FusionModule, FusionStrategy, adapt_pool, sample
from vlfuse.trainer import (RunConfig, Trainer, ablation_table, ablation_variants, g_mean, init_loss_reference,
                            train)

TGMS, FLATTEN, DECODER = "SamplerCondenseText", "FlattenEncoder", "Decoder"


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
        assert ok, detail
    return emit


# -- 1: gradient integrity ----------------------------------------------------------------

MODULE_GROUPS = {
    "video encoder": ("encoders.video",),
    "text encoder": ("encoders.text",),
    "adapt-pooling": ("fusion.adapt_pool",),
    "sampler layers": ("fusion.layers", "fusion.queries"),
    "MLM head": ("mlm_head",),
    "VTC projections": ("video_proj", "text_proj"),
    "VTM head": ("vtm_head",),
    "MCM head": ("mcm_head",),
}


def test_criterion_1_gradient_integrity(verdict):
    spec = WorldSpec(n_frames=2, n_patches=3, d_in=8, caption_len=(3, 5))
    world = build_world(spec)
    cfg = ModelConfig(d=32, heads=2, video_layers=1, text_layers=1, fusion_layers=1, fusion_heads=2,
                      num_queries=4, ffn_mult=1, d_in=8)
    model = VLModel(cfg, T.make_rng(3))
    batch = generate_batch(world, 3, seed=5)
    corpus = build_answer_corpus(generate_batch(world, 16, seed=6).pairs)

    def loss(*_):
        return model.losses(batch, T.make_rng(9), vocab=world.vocab, corpus=corpus).total

    start = time.perf_counter()
    named = list(model.named_parameters())
    worst = {}
    for group, prefixes in MODULE_GROUPS.items():
        params = [p for n, p in named if n.startswith(prefixes)]
        report = T.grad_check(loss, params, tolerance=1e-4, h=1e-5, n_coords=100, rng=T.make_rng(17))
        worst[group] = (report.max_rel_error, report.n_checked)
    elapsed = time.perf_counter() - start
    ok = all(err <= 1e-4 and n >= 100 for err, n in worst.values()) and elapsed < 120
    top = max(worst, key=lambda g: worst[g][0])
    verdict(1, ok, f"{len(worst)} modules x 100 coords, worst rel err {worst[top][0]:.2e} ({top}), "
                   f"{elapsed:.1f}s")


# -- 2: Adapt-Pooling invariants ------------------------------------------------------------


def _pool_weights(z: np.ndarray, params: AdaptPool) -> np.ndarray:
    logits = (z @ params.w_reduce.data).swapaxes(-1, -2)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_criterion_2_adapt_pooling_invariants(verdict):
    rng = T.make_rng(2)
    worst_sum, hull_ok, degenerate_ok = 0.0, True, True
    for i in range(1000):
        d, n_s, n_i = int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 12))
        params = AdaptPool(d, n_s, rng, std=float(rng.uniform(0.1, 3.0)))
        z = rng.normal(size=(n_i, d)) * rng.uniform(0.1, 10.0)
        out = adapt_pool(T.Tensor(z), params).data
        worst_sum = max(worst_sum, float(np.abs(_pool_weights(z, params).sum(axis=-1) - 1.0).max()))
        slack = 1e-12 * (1 + np.abs(z).max())
        hull_ok &= bool(np.all(out >= z.min(axis=0) - slack) and np.all(out <= z.max(axis=0) + slack))
        if n_i == 1:
            degenerate_ok &= bool(np.array_equal(out, np.broadcast_to(z, out.shape)))
    ok = worst_sum <= 1e-9 and hull_ok and degenerate_ok
    verdict(2, ok, f"max |row sum - 1| {worst_sum:.1e}, convex hull {hull_ok}, N_i=1 exact {degenerate_ok}")


# -- 3/4/5: complexity ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def full_grid():
    grid = BenchGrid()
    return grid, {(r.strategy, r.n_v, r.n_t): r for r in run_bench(grid)}


def video_cross_pairs(n_v: int, n_t: int, grid: BenchGrid) -> int:
    """Measured cross-attention pairs of the TGMS video pass alone."""
    rng = T.make_rng(grid.seed, n_v, n_t)
    module = FusionModule(FusionStrategy(kind=TGMS), grid.d, rng, heads=grid.heads, layers=grid.layers,
                          num_queries=grid.n_q, ffn_mult=grid.ffn_mult)
    v = T.Tensor(rng.normal(size=(1, n_v * grid.k, grid.d)))
    t = T.Tensor(rng.normal(size=(1, n_t, grid.d)))
    with T.no_grad():
        condensed = module.condense(t, "text")
        with T.Graph(keep_record=False) as g:
            sample(v, condensed, module.pass_layers("video"), "video")
    return g.counters.pairs_by_tag["cross"]


def test_criterion_3_complexity_equalities(full_grid, verdict):
    grid, by = full_grid
    mismatches = [key for key, r in by.items() if r.analytic_pairs != r.measured_pairs]
    flatten = by[(FLATTEN, 16, 512)].measured_pairs
    cross = by[(TGMS, 16, 512)].pairs_by_tag["cross"]
    ok = (grid.k, grid.n_q) == (196, 16) and len(by) == 63 and not mismatches
    ok = ok and set(s for s, _, _ in by) == set(KINDS) and flatten == 13_307_904 and cross == 58_368
    verdict(3, ok, f"{len(by) - len(mismatches)}/{len(by)} exact, Flatten(16,512)={flatten:,}, "
                   f"TGMS cross={cross:,}")


def test_criterion_4_scaling_laws(full_grid, verdict):
    grid, by = full_grid
    k = grid.k
    doubling_v = all(video_cross_pairs(2 * n_v, n_t, grid) == 2 * video_cross_pairs(n_v, n_t, grid)
                     for n_v in (4, 8) for n_t in (64, 512))
    fixed_v = all(video_cross_pairs(n_v, 64, grid) == video_cross_pairs(n_v, 128, grid) ==
                  video_cross_pairs(n_v, 256, grid) for n_v in (4, 16))
    squared = all(
        Fraction(by[(FLATTEN, 2 * n_v, n_t)].measured_pairs, by[(FLATTEN, n_v, n_t)].measured_pairs)
        == Fraction(n_t + 2 * n_v * k, n_t + n_v * k) ** 2
        for n_v in (4, 8) for n_t in grid.n_t)
    ok = doubling_v and fixed_v and squared
    verdict(4, ok, f"TGMS video cross doubles {doubling_v}, flatten squared ratio {squared}, "
                   f"N_t-invariant {fixed_v}")


def test_criterion_5_memory_ordering(full_grid, verdict):
    grid, by = full_grid
    tgms, dec, flat = (by[(s, 16, 512)].peak_live for s in (TGMS, DECODER, FLATTEN))
    monotone = all(by[(s, a, n_t)].peak_live <= by[(s, b, n_t)].peak_live
                   for s in KINDS for n_t in grid.n_t for a, b in ((4, 8), (8, 16)))
    ok = tgms < dec < flat and monotone
    verdict(5, ok, f"peak live at (16,512): TGMS {tgms:,} < Decoder {dec:,} < Flatten {flat:,}; "
                   f"monotone in N_v {monotone}")


# -- 6: G-Mean -------------------------------------------------------------------------------------


def test_criterion_6_g_mean(verdict):
    rows = [((45.1, 72.4, 81.8), 64.4), ((48.7, 75.9, 83.9), 67.7)]
    got = [g_mean(*r) for r, _ in rows]
    ok = all(abs(g - want) <= 0.05 for g, (_, want) in zip(got, rows))
    verdict(6, ok, ", ".join(f"{g:.3f} vs {want}" for g, (_, want) in zip(got, rows)))


# -- 7: MCM prompts ---------------------------------------------------------------------------------


def test_criterion_7_mcm_prompts(verdict):
    rendered = [render_mcm(q, opts).encode("utf-8") == want.encode("utf-8") for q, opts, want in RENDER_CASES]
    built = [(p.correct_option, p.text.encode("utf-8")) == (slot, want.encode("utf-8"))
             for p, (slot, want) in zip(seeded_builds(), SEEDED_BUILDS)]
    corpus = [f"a clip of scene {i}" for i in range(50)]
    rng = T.make_rng(2024)
    slots, clean = Counter(), True
    for i in range(4000):
        correct = corpus[i % len(corpus)]
        p = build_mcm_prompt(None, correct, corpus, rng)
        slots[p.correct_option] += 1
        clean &= p.option_texts[p.correct_option] == correct
        clean &= all(o != correct for j, o in enumerate(p.option_texts) if j != p.correct_option)
    counts = [slots[i] for i in range(4)]
    n_golden = sum(rendered) + sum(built)
    ok = n_golden == 20 and counts == SLOT_COUNTS_SEED_2024 and all(abs(c - 1000) <= 60 for c in counts) and clean
    verdict(7, ok, f"{n_golden}/20 golden byte-exact, slot counts {counts}, distractors distinct {clean}")


# -- 8: learnability ---------------------------------------------------------------------------------

LOSS_TAIL = 50


def test_criterion_8_learnability(verdict):
    cfg = RunConfig()
    result = train(cfg)
    final = result.evals[-1]
    ref = init_loss_reference(cfg, cfg.model.vocab_size)
    tails = {k: float(result.losses(k[2:])[-LOSS_TAIL:].mean()) for k in ref}
    below = all(tails[k] < ref[k] for k in ref)
    ok = (cfg.train.steps <= 1000 and result.seconds <= 600 and final["mcm_acc"] >= 0.60
          and final["r1"] >= 0.20 and below)
    losses = ", ".join(f"{k[2:]} {tails[k]:.3f}<{ref[k]:.3f}" for k in ref)
    verdict(8, ok, f"{cfg.train.steps} steps in {result.seconds:.0f}s, MCM acc {final['mcm_acc']:.3f}, "
                   f"R@1 {final['r1']:.2f}, last-{LOSS_TAIL} loss means: {losses}")


# -- 9: ablations --------------------------------------------------------------------------------------


def ablation_base() -> RunConfig:
    """Half-width, two-layer model so the four runs finish in a few minutes."""
    cfg = RunConfig()
    m = cfg.model
    m.d, m.heads, m.video_layers, m.text_layers, m.fusion_layers, m.ffn_mult = 32, 2, 2, 2, 2, 2
    cfg.train.steps, cfg.train.lr = 200, 2e-3
    return cfg


def test_criterion_9_ablation_directionality(verdict, capsys):
    results = {name: train(cfg) for name, cfg in ablation_variants(ablation_base()).items()}
    with capsys.disabled():
        print("\n" + ablation_table(results))
    full = results["TGMS (AP, SS, MCM)"].evals[-1]["mcm_acc"]
    no_mcm = results["no MCM in training"].evals[-1]["mcm_acc"]
    verdict(9, full >= no_mcm, f"MCM acc with MCM {full:.3f} >= without {no_mcm:.3f}")


# -- 10: determinism and freezing -------------------------------------------------------------------------


def test_criterion_10_determinism_and_freezing(verdict):
    same = train(tiny_run(steps=20)).history == train(tiny_run(steps=20)).history

    frozen_ok = True
    for plan in [(1, 0), (0, 2), (2, 1)]:
        cfg = tiny_run(steps=300, eval_size=10, mcm_eval_size=10)
        cfg.model.freeze.frozen_video_layers, cfg.model.freeze.frozen_text_layers = plan
        trainer = Trainer(cfg)
        frozen = {n: p.data.copy() for n, p in trainer.model.named_parameters() if not p.requires_grad}
        trainer.run()
        frozen_ok &= bool(frozen) and all(np.array_equal(p.data, frozen[n])
                                          for n, p in trainer.model.named_parameters() if n in frozen)

    cfg = tiny_run()
    cfg.model.freeze.frozen_video_layers, cfg.model.freeze.frozen_text_layers = 2, 2
    model = Trainer(cfg).model
    world = build_world(cfg.world)
    batch = generate_batch(world, 4, seed=1)
    video, text = model.encoders.video, model.encoders.text

    def outputs():
        with T.no_grad():
            v = add_time_embeddings(encode_video(VideoInput(batch.frames), video), video).data
            return v, encode_text(batch.text, text).data

    before = outputs()
    rng = T.make_rng(4)
    attach_adapter(video, [0, 1], rng=rng)
    attach_adapter(text, [0, 1], rng=rng)
    after = outputs()
    adapters_ok = all(np.array_equal(a, b) for a, b in zip(before, after))

    ok = same and frozen_ok and adapters_ok
    verdict(10, ok, f"bit-identical curves {same}, frozen params unchanged over 300 steps {frozen_ok}, "
                    f"zero-init adapters exact {adapters_ok}")

