import csv
import io
import math

import pytest

from pointer_lab.bench import (
    BENCH_CSV_HEADER,
    BenchRecord,
    fit_loglog_slope,
    flop_count,
    scaling_report,
    time_training_step,
)
from pointer_lab.config import ModelConfig


def rec(model, n, t, batch=4):
    return BenchRecord(model, n, 5, batch, t, batch * n / t, 0, 0)


def test_tokens_per_s_arithmetic():
    r = rec("pointer", 512, 0.1)
    assert r.tokens_per_s == pytest.approx(20480)


@pytest.mark.parametrize("power", [1, 2])
def test_slope_of_constructed_power_law(power):
    ns = [256, 512, 1024, 2048]
    assert fit_loglog_slope(ns, [3e-7 * n ** power for n in ns]) == pytest.approx(power, abs=0.01)


def test_vanilla_reference_segment_slope():
    # two-point segment of the reference vanilla timings at 1024 and 2048
    assert fit_loglog_slope([1024, 2048], [1.04, 3.55]) == pytest.approx(1.77, abs=0.01)


def test_scaling_report_speedup_and_csv():
    ns = [256, 512, 1024]
    recs = [rec("pointer", n, 1e-4 * n) for n in ns] + [rec("vanilla", n, 1e-7 * n * n) for n in ns]
    rep = scaling_report(recs)
    assert rep.slopes["pointer"] == pytest.approx(1.0, abs=0.01)
    assert rep.slopes["vanilla"] == pytest.approx(2.0, abs=0.01)
    assert rep.speedup[1024] == pytest.approx(1e-7 * 1024 / 1e-4)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == BENCH_CSV_HEADER
    assert BENCH_CSV_HEADER == ["model", "seq_len", "reps", "median_step_s", "tokens_per_s", "flops",
                                "peak_alloc_bytes"]
    assert len(rows) - 1 == len(ns) * 2
    table = rep.table()
    assert "speedup" in table and "Throughput" in table


def test_scaling_report_needs_two_lengths():
    with pytest.raises(ValueError):
        scaling_report([rec("pointer", 256, 0.1)])
    with pytest.raises(ValueError):
        scaling_report([])


def test_flop_count_attention_term_reference_scale():
    cfg = ModelConfig(vocab_size=21, d_model=512, n_heads=8, max_seq_len=8192)
    term = flop_count("vanilla", 8192, cfg).per_layer["attention_scores"]
    assert abs(term - 3.4e10) / 3.4e10 < 0.1


def test_flop_count_pointer_linear_vanilla_quadratic():
    cfg = ModelConfig(vocab_size=21, d_model=16, n_heads=2, max_seq_len=1 << 16)
    for n in (1024, 4096):
        r = flop_count("pointer", 2 * n, cfg).layer_total / flop_count("pointer", n, cfg).layer_total
        assert r == pytest.approx(2.0)
    r = flop_count("vanilla", 16384, cfg).layer_total / flop_count("vanilla", 8192, cfg).layer_total
    assert 3.4 <= r <= 4.2


def test_flop_count_dense_pointer_is_quadratic():
    cfg = ModelConfig(vocab_size=21, d_model=16, n_heads=2, scoring_mode="dense", max_seq_len=1 << 16)
    r = flop_count("pointer", 16384, cfg).layer_total / flop_count("pointer", 8192, cfg).layer_total
    assert r > 3.4


def test_flop_count_unknown_model():
    with pytest.raises(ValueError):
        flop_count("rnn", 16, ModelConfig(vocab_size=4))


def test_time_training_step_validation():
    with pytest.raises(ValueError):
        time_training_step("pointer", 32, reps=1)
    with pytest.raises(ValueError):
        time_training_step("pointer", 32, reps=5, warmup=1)


@pytest.mark.parametrize("kind", ["pointer", "vanilla"])
def test_time_training_step_small(kind):
    cfg = ModelConfig(vocab_size=16, n_layers=1, d_model=16, n_heads=2, max_seq_len=64,
                      candidate_budget=12, local_window=4, n_strided_anchors=4)
    r = time_training_step(kind, 32, reps=5, warmup=2, cfg=cfg, batch=2)
    assert r.error is None
    assert len(r.step_times) == 5
    assert r.median_step_wall_s > 0
    assert r.tokens_per_s == 2 * 32 / r.median_step_wall_s
    assert r.peak_alloc_estimate_bytes > 0
    assert r.flop_estimate == 2 * flop_count(kind, 32, cfg).total


def test_allocation_failure_is_reported(monkeypatch):
    import pointer_lab.bench as bench

    def boom(*a, **k):
        raise MemoryError("simulated")

    monkeypatch.setattr(bench, "init_model", boom)
    r = bench.time_training_step("vanilla", 64, reps=5)
    assert r.error and "simulated" in r.error
    assert math.isnan(r.median_step_wall_s)
