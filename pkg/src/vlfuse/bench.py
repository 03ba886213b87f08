"""Cost benchmarks: analytic vs measured attention pairs, mul-adds, parameters and peak memory."""

from __future__ import annotations

import csv
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import tensor as T
from .errors import ConfigError, ContractError
from .sampler import KINDS, CostModel, FusionModule, FusionStrategy, analytic_cost, cross_pairs

CSV_HEADER = ("strategy", "N_v", "N_t", "analytic_pairs", "measured_pairs", "mul_adds", "params", "peak_live",
              "wall_ms")


@dataclass
class BenchGrid:
    """Cartesian grid of fusion strategies, frame counts and text lengths.

    A single attention head keeps the largest flattened point (about 13M
    scores per layer) within desk memory; pair counts do not depend on it.
    """

    strategies: tuple = KINDS
    n_v: tuple = (4, 8, 16)
    n_t: tuple = (64, 256, 512)
    d: int = 64
    heads: int = 1
    n_q: int = 16
    k: int = 196
    layers: int = 1
    ffn_mult: int = 4
    seed: int = 0

    def validate(self) -> None:
        if not (self.strategies and self.n_v and self.n_t):
            raise ConfigError("bench grid axes must be nonempty")
        for s in self.strategies:
            if s not in KINDS:
                raise ConfigError(f"unknown strategy {s!r}")
        if min(self.n_v) < 1 or min(self.n_t) < 1 or min(self.d, self.heads, self.n_q, self.k, self.layers) < 1:
            raise ConfigError("bench grid sizes must be positive")

    def points(self):
        for s in self.strategies:
            for n_v in self.n_v:
                for n_t in self.n_t:
                    yield s, n_v, n_t


def load_grid(path) -> BenchGrid:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    raw = raw.get("grid", raw)
    names = set(BenchGrid.__dataclass_fields__)
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    grid = BenchGrid(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    grid.validate()
    return grid


@dataclass
class CostReport:
    strategy: str
    n_v: int
    n_t: int
    analytic_pairs: int
    measured_pairs: int
    mul_adds: int
    params: int
    peak_live: int
    wall_ms: float
    pairs_by_tag: dict = field(default_factory=dict)

    @property
    def matches(self) -> bool:
        return self.analytic_pairs == self.measured_pairs

    def row(self) -> list:
        return [self.strategy, self.n_v, self.n_t, self.analytic_pairs, self.measured_pairs, self.mul_adds,
                self.params, self.peak_live, f"{self.wall_ms:.1f}"]


def run_point(strategy: str | FusionStrategy, n_v: int, n_t: int, grid: BenchGrid) -> CostReport:
    """One forward and backward pass at batch 1 on random inputs.

    Pair and mul-add counts cover the forward pass; peak liveness covers
    forward and backward together.
    """
    strat = strategy if isinstance(strategy, FusionStrategy) else FusionStrategy(kind=strategy)
    rng = T.make_rng(grid.seed, KINDS.index(strat.kind), n_v, n_t)
    module = FusionModule(strat, grid.d, rng, heads=grid.heads, layers=grid.layers, num_queries=grid.n_q,
                          ffn_mult=grid.ffn_mult)
    v = T.Tensor(rng.normal(size=(1, n_v, grid.k, grid.d)), requires_grad=True)
    t = T.Tensor(rng.normal(size=(1, n_t, grid.d)), requires_grad=True)
    start = time.perf_counter()
    with T.Graph(keep_record=False) as g:
        out = module(v, t)
        forward = g.counters.snapshot()
        T.backward(T.mean(out))
        peak = g.counters.peak_live_scalars
    wall = 1000 * (time.perf_counter() - start)
    analytic = analytic_cost(strat, CostModel(n_v, grid.k, n_t, grid.n_q), grid.layers)
    return CostReport(strat.kind, n_v, n_t, analytic, forward["score_pairs"], forward["total_mul_adds"],
                      module.num_parameters(), peak, wall, forward["pairs_by_tag"])


def run_bench(grid: BenchGrid, out_dir=None, parallel: int = 1) -> list[CostReport]:
    """Evaluate every grid point; reports come back in grid order regardless of ``parallel``."""
    grid.validate()
    points = list(grid.points())
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            reports = list(pool.map(lambda p: run_point(*p, grid), points))
    else:
        reports = [run_point(*p, grid) for p in points]
    if out_dir is not None:
        write_reports(reports, out_dir)
    return reports


def write_reports(reports, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "costs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.row())
    (out / "summary.md").write_text(summary_markdown(reports), encoding="utf-8")


def summary_markdown(reports) -> str:
    lines = ["| strategy | N_v | N_t | analytic pairs | measured pairs | match | mul-adds | params | peak live |",
             "|---|---|---|---|---|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {r.strategy} | {r.n_v} | {r.n_t} | {r.analytic_pairs:,} | {r.measured_pairs:,} | "
                     f"{'yes' if r.matches else 'NO'} | {r.mul_adds:,} | {r.params:,} | {r.peak_live:,} |")
    bad = sum(not r.matches for r in reports)
    lines.append("")
    lines.append(f"{len(reports)} points, {bad} analytic/measured mismatches.")
    return "\n".join(lines) + "\n"


def read_reports(path) -> list[CostReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [CostReport(r["strategy"], int(r["N_v"]), int(r["N_t"]), int(r["analytic_pairs"]),
                       int(r["measured_pairs"]), int(r["mul_adds"]), int(r["params"]), int(r["peak_live"]),
                       float(r["wall_ms"])) for r in rows]


def emit_plot_data(reports, out_dir, strategies=None) -> list[Path]:
    """Per-strategy series ``<strategy>_by_nv.csv`` and ``<strategy>_by_nt.csv`` of peak liveness."""
    chosen = [r for r in reports if strategies is None or r.strategy in strategies]
    if not chosen:
        raise ContractError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in dict.fromkeys(r.strategy for r in chosen):
        rows = [r for r in chosen if r.strategy == name]
        for axis, key in (("nv", lambda r: (r.n_t, r.n_v)), ("nt", lambda r: (r.n_v, r.n_t))):
            path = out / f"{name}_by_{axis}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["N_t", "N_v", "peak_live"] if axis == "nv" else ["N_v", "N_t", "peak_live"])
                for r in sorted(rows, key=key):
                    w.writerow([*key(r), r.peak_live])
            paths.append(path)
    return paths


def sampler_cross_pairs(n_v: int, n_t: int, grid: BenchGrid) -> dict:
    """Analytic cross-attention terms of the text-guided sampler at one grid point."""
    m = CostModel(n_v, grid.k, n_t, grid.n_q)
    out = cross_pairs(m)
    return {k: v * grid.layers for k, v in out.items()}
