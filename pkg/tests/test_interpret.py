import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointer_lab.config import ModelConfig
from pointer_lab.interpret import (
    bucket_edges,
    export_heatmap,
    extract_trace,
    hop_stats,
    pointer_heatmap,
    pooled_hop_stats,
    read_pgm,
    to_pgm_pixels,
)
from pointer_lab.nn import named_tensors
from pointer_lab.pointer import PointerTrace, init_pointer_model


def test_hop_stats_hand_case():
    s = hop_stats(PointerTrace(np.array([[2, 0, 2]]))).layers[0]
    assert s.mean == 1.0 and s.max == 2
    assert s.self_loop_fraction == pytest.approx(1 / 3)
    assert sum(s.histogram) == 3


def test_hop_stats_all_self():
    s = hop_stats(PointerTrace(np.tile(np.arange(7), (2, 1))))
    for layer in s.layers:
        assert layer.mean == 0 and layer.self_loop_fraction == 1
        assert layer.histogram[0] == 7


def test_bucket_edges_cover_range():
    assert bucket_edges(1) == [0, 1]
    assert bucket_edges(8) == [0, 1, 2, 4, 8]
    assert bucket_edges(9)[-1] >= 9


def brute_stats(ptrs):
    out = []
    for row in ptrs:
        dists = [abs(int(p) - i) for i, p in enumerate(row)]
        out.append((sum(dists) / len(dists), max(dists), sum(d == 0 for d in dists) / len(dists), dists))
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 4), st.integers(0, 10_000))
def test_hop_stats_matches_brute_force(n, layers, seed):
    ptrs = np.random.default_rng(seed).integers(0, n, (layers, n))
    hs = hop_stats(PointerTrace(ptrs))
    edges = hs.bucket_edges
    for s, (mean, mx, self_frac, dists) in zip(hs.layers, brute_stats(ptrs)):
        assert s.mean == pytest.approx(mean) and s.max == mx
        assert s.self_loop_fraction == pytest.approx(self_frac)
        assert 0 <= s.mean <= s.max <= n - 1
        hist = [sum(edges[b] <= d < edges[b + 1] for d in dists) for b in range(len(edges) - 1)]
        assert s.histogram == hist and sum(hist) == n
        assert sum(s.backward_histogram) + sum(s.forward_histogram) + hist[0] == n


def test_hop_stats_rejects_batched_trace():
    with pytest.raises(ValueError):
        hop_stats(PointerTrace(np.zeros((2, 3, 4), int)))


def test_heatmap_single_trace_one_per_row():
    t = PointerTrace(np.array([[0, 0, 1, 2], [0, 1, 1, 0]]))
    m = pointer_heatmap([t], 1)
    assert (m.sum(1) == 1).all() and m.max() == 1
    assert m[3, 0] == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 10), st.integers(0, 10_000))
def test_heatmap_matches_brute_tally(n, k, seed):
    rng = np.random.default_rng(seed)
    traces = [PointerTrace(rng.integers(0, n, (2, n))) for _ in range(k)]
    m = pointer_heatmap(traces, 1)
    ref = np.zeros((n, n), int)
    for t in traces:
        for i in range(n):
            ref[i, t.ptrs[1, i]] += 1
    np.testing.assert_array_equal(m, ref)
    assert (m.sum(1) == k).all() and m.sum() == n * k


def test_heatmap_errors():
    t = PointerTrace(np.zeros((2, 3), int))
    with pytest.raises(IndexError):
        pointer_heatmap([t], 2)
    with pytest.raises(ValueError):
        pointer_heatmap([t, PointerTrace(np.zeros((2, 4), int))], 0)


def test_pgm_pixels():
    np.testing.assert_array_equal(to_pgm_pixels([[0, 4], [4, 0]]).ravel(), [0, 255, 255, 0])
    np.testing.assert_array_equal(to_pgm_pixels(np.zeros((2, 2))), 0)
    assert to_pgm_pixels([[1, 2]]).tolist() == [[128, 255]]


def test_pgm_export(tmp_path):
    m = np.random.default_rng(0).integers(0, 9, (64, 64))
    path = export_heatmap(m, tmp_path / "h.pgm", "pgm")
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n64 64\n255\n")
    assert len(raw) == len(b"P5\n64 64\n255\n") + 64 * 64
    np.testing.assert_array_equal(read_pgm(path), to_pgm_pixels(m))


def test_pgm_non_square_header(tmp_path):
    path = export_heatmap(np.ones((2, 5)), tmp_path / "r.pgm")
    assert path.read_bytes().startswith(b"P5\n5 2\n255\n")
    assert read_pgm(path).shape == (2, 5)


def test_csv_export_round_trip(tmp_path):
    m = np.random.default_rng(1).integers(0, 100, (6, 6))
    path = export_heatmap(m, tmp_path / "h.csv", "csv")
    with path.open() as f:
        rows = [[int(x) for x in r] for r in csv.reader(f)]
    assert rows == m.tolist()


def test_export_errors(tmp_path):
    with pytest.raises(ValueError):
        export_heatmap(-np.ones((2, 2)), tmp_path / "x.pgm")
    with pytest.raises(ValueError):
        export_heatmap(np.ones((2, 2)), tmp_path / "x.png", "png")
    with pytest.raises(OSError):
        export_heatmap(np.ones((2, 2)), tmp_path / "missing" / "x.pgm")


def test_extract_trace_contract_and_no_side_effects():
    cfg = ModelConfig(vocab_size=8, n_layers=3, d_model=8, n_heads=2, max_seq_len=32,
                      candidate_budget=12, local_window=4, n_strided_anchors=4)
    params = init_pointer_model(cfg, 0)
    before = {k: t.data.copy() for k, t in named_tensors(params).items()}
    tokens = np.random.default_rng(0).integers(0, 8, 20)
    a = extract_trace(params, tokens, cfg)
    b = extract_trace(params, tokens, cfg)
    assert a.ptrs.shape == (3, 20)
    np.testing.assert_array_equal(a.ptrs, b.ptrs)
    assert (a.ptrs <= np.arange(20)).all()
    for k, t in named_tensors(params).items():
        np.testing.assert_array_equal(t.data, before[k])
        assert t.grad is None


def test_pooled_hop_stats():
    t1 = PointerTrace(np.array([[0, 0, 0]]))
    t2 = PointerTrace(np.array([[0, 1, 2]]))
    s = pooled_hop_stats([t1, t2]).layers[0]
    assert s.mean == pytest.approx((1.0 + 0.0) / 2)
    assert s.max == 2
    assert s.self_loop_fraction == pytest.approx((1 / 3 + 1) / 2)
    assert sum(s.histogram) == 6


def test_stats_json_fields():
    js = hop_stats(PointerTrace(np.array([[0, 0, 1]]))).to_json()
    assert {"layer", "mean", "max", "self_loop_fraction", "histogram"} <= set(js[0])
