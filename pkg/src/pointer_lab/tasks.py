"""Seeded synthetic long-range tasks: copy after a gap, and associative recall."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LayoutError(ValueError):
    """The requested task layout does not fit in the sequence."""


@dataclass(frozen=True)
class VocabSpec:
    """Payload symbols take ids ``0 .. payload_symbols-1``; the five specials follow."""

    payload_symbols: int = 16

    def __post_init__(self):
        if self.payload_symbols < 2:
            raise ValueError("need at least two payload symbols")

    @property
    def pad(self) -> int:
        return self.payload_symbols

    @property
    def copy(self) -> int:
        return self.payload_symbols + 1

    @property
    def blank(self) -> int:
        return self.payload_symbols + 2

    @property
    def query(self) -> int:
        return self.payload_symbols + 3

    @property
    def sep(self) -> int:
        return self.payload_symbols + 4

    @property
    def size(self) -> int:
        return self.payload_symbols + 5

    @property
    def n_keys(self) -> int:
        return self.payload_symbols // 2


@dataclass
class TaskBatch:
    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def rows(self):
        for i in range(self.inputs.shape[0]):
            yield {"input": self.inputs[i].tolist(), "target": self.targets[i].tolist(),
                   "mask": self.loss_mask[i].astype(int).tolist()}


def copy_layout_length(payload_len: int, distance: int) -> int:
    return 2 * payload_len + 1 + distance


def gen_copy_batch(seed: int, batch: int, seq_len: int, payload_len: int, distance: int,
                   vocab: VocabSpec) -> TaskBatch:
    """Rows laid out as ``payload | COPY | PAD*distance | BLANK*payload_len | PAD...``.

    Targets equal the inputs except that the BLANK slots hold the payload in
    order; the loss mask is set exactly on those slots.
    """
    if payload_len < 1 or distance < 0:
        raise LayoutError("payload_len must be >= 1 and distance >= 0")
    need = copy_layout_length(payload_len, distance)
    if need > seq_len:
        raise LayoutError(f"copy layout needs {need} positions, seq_len is {seq_len}")
    rng = np.random.default_rng(seed)
    payload = rng.integers(0, vocab.payload_symbols, size=(batch, payload_len))
    inputs = np.full((batch, seq_len), vocab.pad, dtype=np.int64)
    inputs[:, :payload_len] = payload
    inputs[:, payload_len] = vocab.copy
    start = payload_len + 1 + distance
    inputs[:, start:start + payload_len] = vocab.blank
    targets = inputs.copy()
    targets[:, start:start + payload_len] = payload
    mask = np.zeros((batch, seq_len), bool)
    mask[:, start:start + payload_len] = True
    meta = {"task": "copy", "distance": distance, "payload_len": payload_len}
    return TaskBatch(inputs, targets, mask, meta)


def parse_copy_row(row, vocab: VocabSpec) -> tuple[int, int, list[int]]:
    """Recover ``(payload_len, distance, payload)`` from one generated input row."""
    row = list(row)
    try:
        p = row.index(vocab.copy)
        first_blank = row.index(vocab.blank)
    except ValueError as exc:
        raise LayoutError("row lacks a COPY or BLANK marker") from exc
    payload = row[:p]
    if any(not 0 <= t < vocab.payload_symbols for t in payload):
        raise LayoutError("non-payload symbol before COPY")
    gap = row[p + 1:first_blank]
    if any(t != vocab.pad for t in gap):
        raise LayoutError("gap between COPY and BLANK is not all PAD")
    blanks = row[first_blank:first_blank + p]
    if len(blanks) != p or any(t != vocab.blank for t in blanks):
        raise LayoutError("BLANK run length does not match the payload")
    if any(t != vocab.pad for t in row[first_blank + p:]):
        raise LayoutError("trailing positions are not PAD")
    return p, first_blank - p - 1, payload


def gen_assoc_recall_batch(seed: int, batch: int, seq_len: int, n_pairs: int,
                           vocab: VocabSpec) -> TaskBatch:
    """Rows ``k1 v1 ... kn vn QUERY kq BLANK PAD...``; the BLANK's target is kq's value.

    Keys come from the lower half of the payload symbols and values from the
    upper half, so a key is never confused with a value.
    """
    if n_pairs < 1:
        raise LayoutError("n_pairs must be >= 1")
    if n_pairs > vocab.n_keys:
        raise LayoutError(f"{n_pairs} distinct keys requested, only {vocab.n_keys} available")
    need = 2 * n_pairs + 3
    if need > seq_len:
        raise LayoutError(f"recall layout needs {need} positions, seq_len is {seq_len}")
    rng = np.random.default_rng(seed)
    n_vals = vocab.payload_symbols - vocab.n_keys
    inputs = np.full((batch, seq_len), vocab.pad, dtype=np.int64)
    targets = inputs.copy()
    mask = np.zeros((batch, seq_len), bool)
    q_pos = 2 * n_pairs
    for b in range(batch):
        keys = rng.permutation(vocab.n_keys)[:n_pairs]
        vals = vocab.n_keys + rng.integers(0, n_vals, size=n_pairs)
        which = rng.integers(0, n_pairs)
        inputs[b, 0:q_pos:2] = keys
        inputs[b, 1:q_pos:2] = vals
        inputs[b, q_pos:q_pos + 3] = (vocab.query, keys[which], vocab.blank)
        targets[b] = inputs[b]
        targets[b, q_pos + 2] = vals[which]
        mask[b, q_pos + 2] = True
    meta = {"task": "assoc", "n_pairs": n_pairs}
    return TaskBatch(inputs, targets, mask, meta)


def token_accuracy(pred, targets, mask) -> float:
    pred, targets, mask = np.asarray(pred), np.asarray(targets), np.asarray(mask, bool)
    if pred.shape != targets.shape or mask.shape != targets.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {targets.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("token_accuracy: empty mask")
    return float((pred[mask] == targets[mask]).sum() / n)
