"""Training-step timing across sequence lengths, and the scaling report."""

from __future__ import annotations

import csv
import gc
import io
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig
from .nn import GumbelConfig, named_tensors
from .tasks import TaskBatch
from .training import AdamState, init_model, train_step

BENCH_CSV_HEADER = ["model", "seq_len", "reps", "median_step_s", "tokens_per_s", "flops",
                    "peak_alloc_bytes"]


@dataclass
class FlopCount:
    """Forward multiply-accumulate counts for one sequence.

    ``per_layer`` breaks one layer down by term; ``total`` covers all layers
    plus the vocabulary head.
    """

    per_layer: dict[str, int]
    head: int
    n_layers: int

    @property
    def layer_total(self) -> int:
        return sum(self.per_layer.values())

    @property
    def total(self) -> int:
        return self.n_layers * self.layer_total + self.head


def candidate_width(n: int, cfg: ModelConfig) -> int:
    if cfg.scoring_mode == "dense":
        return n
    raw = cfg.local_window + 3 + cfg.n_strided_anchors
    return min(cfg.candidate_budget, n, raw)


def flop_count(model_kind: str, n: int, cfg: ModelConfig) -> FlopCount:
    """Closed-form MAC count of a training-phase forward pass over ``n`` tokens.

    Pointer layers cost O(N·W·d + N·d²) with W the candidate width; attention
    layers cost O(N²·d + N·d²).
    """
    d = cfg.d_model
    ffn = 2 * cfg.ffn_mult * n * d * d
    if model_kind == "pointer":
        w = candidate_width(n, cfg)
        terms = {
            "projections": 3 * n * d * d,
            "chain_merge": 2 * n * d * d if cfg.chain_combine == "concat" else 0,
            "encode": n * d,
            "scores": n * w * d,
            "aggregate": n * w * d,
            "ffn": ffn,
        }
    elif model_kind == "vanilla":
        terms = {
            "projections": 4 * n * d * d,
            "attention_scores": n * n * d,
            "attention_values": n * n * d,
            "ffn": ffn,
        }
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    return FlopCount(terms, n * d * cfg.vocab_size, cfg.n_layers)


@dataclass
class BenchRecord:
    model: str
    seq_len: int
    reps: int
    batch: int
    median_step_wall_s: float
    tokens_per_s: float
    flop_estimate: int
    peak_alloc_estimate_bytes: int
    step_times: list[float] = field(default_factory=list, repr=False)
    error: str | None = None

    def csv_row(self) -> list:
        return [self.model, self.seq_len, self.reps, repr(self.median_step_wall_s),
                repr(self.tokens_per_s), self.flop_estimate, self.peak_alloc_estimate_bytes]


def synthetic_batch(seed: int, batch: int, n: int, vocab: int) -> TaskBatch:
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, size=(batch, n))
    targets = rng.integers(0, vocab, size=(batch, n))
    return TaskBatch(tokens, targets, np.ones((batch, n), bool), {"task": "synthetic"})


def time_training_step(model_kind: str, n: int, reps: int = 10, warmup: int = 2,
                       cfg: ModelConfig | None = None, seed: int = 0, batch: int = 4,
                       measure_memory: bool = True) -> BenchRecord:
    """Median wall time of full training steps (forward, backward, Adam) at length ``n``.

    Warmup steps are run and discarded.  Peak allocation comes from one extra
    untimed step under ``tracemalloc`` and is an allocator high-water estimate,
    not a measurement of resident memory.
    """
    if reps < 5:
        raise ValueError("reps must be >= 5")
    if warmup < 2:
        raise ValueError("warmup must be >= 2")
    if cfg is None:
        cfg = ModelConfig(vocab_size=32)
    cfg = replace(cfg, max_seq_len=max(cfg.max_seq_len, n))
    flops = batch * flop_count(model_kind, n, cfg).total
    try:
        params = init_model(model_kind, cfg, seed)
        named = named_tensors(params)
        state = AdamState.zeros_like(named)
        data = synthetic_batch(seed, batch, n, cfg.vocab_size)
        gumbel = GumbelConfig(1.0, 1.0, seed) if model_kind == "pointer" else None

        def step():
            train_step(model_kind, params, named, cfg, data, state, gumbel)

        for _ in range(warmup):
            step()
        times = []
        for _ in range(reps):
            gc.collect()
            t0 = time.perf_counter()
            step()
            times.append(time.perf_counter() - t0)
        peak = 0
        if measure_memory:
            gc.collect()
            tracemalloc.start()
            try:
                step()
                peak = tracemalloc.get_traced_memory()[1]
            finally:
                tracemalloc.stop()
    except MemoryError as exc:
        return BenchRecord(model_kind, n, reps, batch, math.nan, math.nan, flops, 0,
                           error=f"allocation failed: {exc or 'MemoryError'}")
    med = statistics.median(times)
    return BenchRecord(model_kind, n, reps, batch, med, batch * n / med, flops, peak, times)


def fit_loglog_slope(ns, ts) -> float:
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(ts, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ScalingReport:
    records: list[BenchRecord]
    slopes: dict[str, float]
    speedup: dict[int, float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_CSV_HEADER)
        for r in self.records:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def table(self) -> str:
        lengths = sorted({r.seq_len for r in self.records})
        by = {(r.model, r.seq_len): r for r in self.records}
        models = [m for m in ("pointer", "vanilla") if any(r.model == m for r in self.records)]
        width = 12

        def row(label, cells):
            return f"{label:<20}" + "".join(f"{c:>{width}}" for c in cells)

        lines = [row("Sequence Length", lengths), "Training Time (seconds)"]
        for m in models:
            lines.append(row(m, [f"{by[m, n].median_step_wall_s:.3f}" if (m, n) in by else "-"
                                 for n in lengths]))
        if self.speedup:
            lines.append(row("speedup", [f"{self.speedup[n]:.2f}x" if n in self.speedup else "-"
                                         for n in lengths]))
        lines.append("Throughput (tokens/second)")
        for m in models:
            lines.append(row(m, [f"{by[m, n].tokens_per_s:,.0f}" if (m, n) in by else "-"
                                 for n in lengths]))
        for m, s in self.slopes.items():
            lines.append(f"log-log slope ({m}): {s:.3f}")
        return "\n".join(lines)


def scaling_report(records: list[BenchRecord]) -> ScalingReport:
    """Per-model least-squares slope of ln(time) on ln(N), and vanilla/pointer speedup per N."""
    ok = [r for r in records if r.error is None]
    slopes = {}
    for m in dict.fromkeys(r.model for r in ok):
        pts = sorted((r.seq_len, r.median_step_wall_s) for r in ok if r.model == m)
        if len({n for n, _ in pts}) < 2:
            raise ValueError(f"model {m!r} needs at least two distinct sequence lengths")
        slopes[m] = fit_loglog_slope(*zip(*pts))
    if not slopes:
        raise ValueError("no successful benchmark records")
    t = {(r.model, r.seq_len): r.median_step_wall_s for r in ok}
    speedup = {n: t["vanilla", n] / t["pointer", n]
               for (m, n) in t if m == "pointer" and ("vanilla", n) in t}
    return ScalingReport(records, slopes, dict(sorted(speedup.items())))
