"""Pointer-trace statistics and heatmap export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .pointer import PointerModelParams, PointerTrace, pointer_model_forward
from .tensor import no_grad


def extract_trace(params: PointerModelParams, tokens, cfg: ModelConfig) -> PointerTrace:
    """Hard-inference pointer trace for ``tokens`` ([N] or [B, N]); params are untouched."""
    with no_grad():
        _, trace = pointer_model_forward(tokens, params, cfg)
    return trace


def bucket_edges(n: int) -> list[int]:
    """Power-of-two distance buckets ``[0,1), [1,2), [2,4), ...`` covering ``0 .. n-1``."""
    edges = [0, 1]
    while edges[-1] < n:
        edges.append(edges[-1] * 2)
    return edges


@dataclass
class LayerHopStats:
    layer: int
    mean: float
    max: int
    self_loop_fraction: float
    histogram: list[int]
    backward_histogram: list[int]
    forward_histogram: list[int]

    def to_json(self) -> dict:
        return {"layer": self.layer, "mean": self.mean, "max": self.max,
                "self_loop_fraction": self.self_loop_fraction, "histogram": self.histogram,
                "signed_histogram": {"backward": self.backward_histogram,
                                     "forward": self.forward_histogram}}


@dataclass
class HopStats:
    layers: list[LayerHopStats]
    bucket_edges: list[int]

    def to_json(self) -> list[dict]:
        return [dict(s.to_json(), bucket_edges=self.bucket_edges) for s in self.layers]


def _bucketize(dist: np.ndarray, edges: list[int]) -> list[int]:
    return np.histogram(dist, bins=edges)[0].astype(int).tolist()


def hop_stats(trace: PointerTrace) -> HopStats:
    """Per-layer hop distances ``|p_i - i|`` of a single [L x N] trace.

    The signed histograms split non-zero hops into backward (``p_i < i``) and
    forward (``p_i > i``) pointers using the same buckets.
    """
    ptrs = np.asarray(trace.ptrs)
    if ptrs.ndim != 2:
        raise ValueError("hop_stats takes one [L x N] trace; use trace.split() on batches")
    n = ptrs.shape[1]
    edges = bucket_edges(n)
    pos = np.arange(n)
    out = []
    for layer, row in enumerate(ptrs):
        signed = row - pos
        dist = np.abs(signed)
        out.append(LayerHopStats(
            layer=layer,
            mean=float(dist.mean()),
            max=int(dist.max()),
            self_loop_fraction=float((dist == 0).mean()),
            histogram=_bucketize(dist, edges),
            backward_histogram=_bucketize(-signed[signed < 0], edges),
            forward_histogram=_bucketize(signed[signed > 0], edges),
        ))
    return HopStats(out, edges)


def pointer_heatmap(traces: list[PointerTrace], layer: int) -> np.ndarray:
    """Counts ``M[i, j]`` of samples in which position ``i`` pointed at ``j``."""
    if not traces:
        raise ValueError("no traces given")
    n = traces[0].seq_len
    m = np.zeros((n, n), dtype=np.int64)
    for t in traces:
        if t.seq_len != n:
            raise ValueError("traces have different sequence lengths")
        if not 0 <= layer < t.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {t.n_layers})")
        np.add.at(m, (np.arange(n), np.asarray(t.ptrs)[layer]), 1)
    return m


def to_pgm_pixels(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    top = m.max() if m.size else 0
    if top <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.floor(255.0 * m / top + 0.5).astype(np.uint8)


def export_heatmap(matrix, path, fmt: str = "pgm") -> Path:
    """Write a count matrix as plain CSV rows or a binary 8-bit PGM (P5)."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError("heatmap must be a 2-d matrix")
    if (m < 0).any():
        raise ValueError("heatmap counts must be non-negative")
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(m.astype(np.int64).tolist())
    elif fmt == "pgm":
        h, w = m.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_pgm_pixels(m).tobytes())
    else:
        raise ValueError(f"format must be 'csv' or 'pgm', got {fmt!r}")
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def pooled_hop_stats(traces: list[PointerTrace]) -> HopStats:
    """Hop statistics pooled over many same-length [L x N] traces."""
    if not traces:
        raise ValueError("no traces given")
    per = [hop_stats(t) for t in traces]
    if len({len(p.layers) for p in per}) != 1 or len({tuple(p.bucket_edges) for p in per}) != 1:
        raise ValueError("traces have different shapes")
    layers = []
    for layer in range(len(per[0].layers)):
        rows = [p.layers[layer] for p in per]
        layers.append(LayerHopStats(
            layer=layer,
            mean=float(np.mean([r.mean for r in rows])),
            max=max(r.max for r in rows),
            self_loop_fraction=float(np.mean([r.self_loop_fraction for r in rows])),
            histogram=np.sum([r.histogram for r in rows], axis=0).tolist(),
            backward_histogram=np.sum([r.backward_histogram for r in rows], axis=0).tolist(),
            forward_histogram=np.sum([r.forward_histogram for r in rows], axis=0).tolist(),
        ))
    return HopStats(layers, per[0].bucket_edges)
