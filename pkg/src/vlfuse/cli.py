"""Command-line entry point: ``bench``, ``train``, ``eval`` and ``promptgen``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bench import emit_plot_data, load_grid, run_bench, summary_markdown
from .errors import ConfigError, DataError
from .objectives import build_mcm_prompt
from .tensor import make_rng
from .trainer import evaluate_checkpoint, load_config, train
from .vocab import DEFAULT_QUESTIONS


def read_lines(path) -> list[str]:
    """Non-empty lines of a UTF-8 text file, stripped."""
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_bench(args) -> int:
    grid = load_grid(args.grid)
    reports = run_bench(grid, args.out, parallel=args.parallel)
    emit_plot_data(reports, Path(args.out) / "plot")
    print(summary_markdown(reports), end="")
    mismatches = [r for r in reports if not r.matches]
    for r in mismatches:
        print(f"MISMATCH {r.strategy} N_v={r.n_v} N_t={r.n_t}: analytic {r.analytic_pairs} "
              f"measured {r.measured_pairs}", file=sys.stderr)
    return 1 if mismatches else 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, args.out)
    final = result.evals[-1]
    print(json.dumps({"steps": cfg.train.steps, "seed": cfg.train.seed, "seconds": round(result.seconds, 1),
                      **final}))
    return 0


def cmd_eval(args) -> int:
    print(json.dumps(evaluate_checkpoint(args.checkpoint)))
    return 0


def cmd_promptgen(args) -> int:
    corpus = read_lines(args.corpus)
    questions = read_lines(args.questions) if args.questions else list(DEFAULT_QUESTIONS)
    if len(set(corpus)) < 4:
        raise DataError("the corpus needs at least 4 distinct entries")
    rng = make_rng(args.seed)
    for _ in range(args.n):
        correct = corpus[int(rng.integers(len(corpus)))]
        prompt = build_mcm_prompt(None, correct, corpus, rng, questions=questions)
        print(f"{prompt.correct_option + 1}\t{prompt.text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="cost grid: analytic vs measured attention pairs and memory")
    p.add_argument("--grid", required=True, help="TOML grid file ([grid] section)")
    p.add_argument("--out", required=True, help="output directory for costs.csv, summary.md, plot/")
    p.add_argument("--parallel", type=int, default=1, help="worker threads (default 1)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="pretrain on the synthetic world")
    p.add_argument("--config", required=True, help="TOML run config")
    p.add_argument("--out", required=True, help="output directory for metrics and checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True, help="directory holding manifest.json and params.bin")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("promptgen", help="print multiple-choice prompts built from a caption corpus")
    p.add_argument("--corpus", required=True, help="text file, one caption per line")
    p.add_argument("--n", type=int, required=True, help="number of prompts")
    p.add_argument("--questions", help="text file, one question per line (default: built-in pool)")
    p.add_argument("--seed", type=int, default=int(os.environ.get("MULTI_SEED", 0)))
    p.set_defaults(func=cmd_promptgen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
