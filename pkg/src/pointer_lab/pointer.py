"""Pointer-chaining sequence model.

Every layer lets each position pick exactly one source position.  The pick is
conditioned on the previous layer's picks (the chain), aggregated through a
learned gate, and followed by a residual + FFN update.  Training relaxes the
pick with Gumbel-Softmax; inference uses a hard argmax and keeps only one
integer per position per layer.

Scoring has two modes.  ``dense`` scores every position (quadratic);
``candidate`` scores at most K positions per query: a local window, the
chain targets, self, and evenly strided anchors.  Both modes share the same
kernels over a sorted, padded candidate table, so a candidate table that
happens to list every position reproduces dense mode bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .nn import (
    FFNParams,
    GumbelConfig,
    LayerNormParams,
    LinearParams,
    embedding,
    ffn,
    gumbel_noise,
    gumbel_softmax,
    init_ffn,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_last,
    gather_rows,
    masked_fill,
    mul,
    reshape,
    sampled_dot,
    scale,
    sigmoid,
    sparse_mix,
)

MASKED_SCORE = -1e9


@dataclass
class PointerLayerParams:
    wq: LinearParams
    wk: LinearParams
    gate: LinearParams
    encode: LinearParams
    encode_norm: LayerNormParams
    chain_merge: LinearParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn: FFNParams


@dataclass
class PointerModelParams:
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[PointerLayerParams]
    ln_f: LayerNormParams
    head: LinearParams


@dataclass
class PointerTrace:
    """Selected source positions, ``ptrs[layer, (batch,) position]``."""

    ptrs: np.ndarray
    alphas: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def n_layers(self) -> int:
        return self.ptrs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ptrs.shape[-1]

    def split(self) -> list[PointerTrace]:
        """One [L x N] trace per batch row."""
        if self.ptrs.ndim == 2:
            return [self]
        return [PointerTrace(self.ptrs[:, b]) for b in range(self.ptrs.shape[1])]


def init_embeddings(rng: np.random.Generator, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    d = cfg.d_model
    tok = Tensor(rng.standard_normal((cfg.vocab_size, d)), requires_grad=True)
    pos = Tensor(rng.standard_normal((cfg.max_seq_len, d)), requires_grad=True)
    return tok, pos


def init_pointer_layer(rng: np.random.Generator, cfg: ModelConfig) -> PointerLayerParams:
    d = cfg.d_model
    return PointerLayerParams(
        wq=init_linear(rng, d, d),
        wk=init_linear(rng, d, d),
        gate=init_linear(rng, d, d),
        encode=init_linear(rng, 1, d),
        encode_norm=init_layer_norm(d),
        chain_merge=init_linear(rng, 2 * d, d),
        ln1=init_layer_norm(d),
        ln2=init_layer_norm(d),
        ffn=init_ffn(rng, d, cfg.ffn_mult * d),
    )


def init_pointer_model(cfg: ModelConfig, seed: int = 0) -> PointerModelParams:
    rng = np.random.default_rng(seed)
    tok, pos = init_embeddings(rng, cfg)
    layers = [init_pointer_layer(rng, cfg) for _ in range(cfg.n_layers)]
    return PointerModelParams(tok, pos, layers, init_layer_norm(cfg.d_model),
                              init_linear(rng, cfg.d_model, cfg.vocab_size))


# ---------------------------------------------------------------------------
# Chain conditioning
# ---------------------------------------------------------------------------


def encode_prev_pointer(prev_ptrs, n: int, p: PointerLayerParams, dtype=np.float32) -> Tensor:
    """LayerNorm(Linear(p / N)) per position; the indices themselves carry no gradient."""
    prev = np.asarray(prev_ptrs)
    if prev.size and (prev.min() < 0 or prev.max() >= n):
        raise IndexError(f"previous pointer out of range [0, {n})")
    frac = Tensor((prev / n)[..., None], dtype=dtype)
    return layer_norm(p.encode_norm, linear(p.encode, frac))


def chain_condition(h: Tensor, enc: Tensor, p: PointerLayerParams, combine: str = "concat") -> Tensor:
    if h.shape != enc.shape:
        raise ShapeError(f"chain_condition: {h.shape} vs {enc.shape}")
    if combine == "add":
        return add(h, enc)
    return linear(p.chain_merge, concat_last(h, enc))


# ---------------------------------------------------------------------------
# Candidate sets
# ---------------------------------------------------------------------------


def _anchors(limit: int, n: int) -> list[int]:
    return [k * limit // n for k in range(n)] if limit > 0 else []


def candidate_set(i: int, n: int, prev_ptrs, cfg: ModelConfig) -> list[int]:
    """Candidate source positions for query ``i`` in priority order.

    Priority runs local window, self, chain targets, strided anchors; the
    deduplicated list is cut at the candidate budget.  This is the readable
    single-position reference for :func:`candidate_table`.
    """
    w, k_budget = cfg.local_window, cfg.candidate_budget
    limit = i + 1 if cfg.causal else n
    first = prev_ptrs[i]
    raw = list(range(max(0, i - w), i)) + [i, first, prev_ptrs[first]]
    raw += _anchors(i if cfg.causal else n, cfg.n_strided_anchors)
    out: list[int] = []
    for j in raw:
        j = int(j)
        if 0 <= j < limit and j not in out:
            out.append(j)
    return out[:k_budget]


def candidate_table(prev_ptrs: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Sorted candidate table for a batch of rows.

    Returns ``(idx, valid)``, both [B, N, W].  Each row lists its candidates in
    ascending position order; unused slots point at the query itself and are
    flagged invalid.  In dense mode every position is a candidate.
    """
    prev = np.asarray(prev_ptrs)
    b, n = prev.shape
    pos = np.arange(n)
    if cfg.scoring_mode == "dense":
        idx = np.broadcast_to(pos, (b, n, n))
        valid = np.broadcast_to(pos[None, :] <= pos[:, None], (b, n, n)) if cfg.causal \
            else np.ones((b, n, n), bool)
        return idx, valid

    w, n_anchor = cfg.local_window, cfg.n_strided_anchors
    cols, oks = [], []
    for off in range(w, 0, -1):
        cols.append(np.broadcast_to(pos - off, (b, n)))
        oks.append(np.broadcast_to(pos - off >= 0, (b, n)))
    first = prev
    second = np.take_along_axis(prev, first, axis=1)
    for c in (np.broadcast_to(pos, (b, n)), first, second):
        cols.append(c)
        oks.append(c <= pos if cfg.causal else np.ones((b, n), bool))
    limit = pos if cfg.causal else np.full(n, n)
    for k in range(n_anchor):
        a = k * limit // n_anchor
        cols.append(np.broadcast_to(a, (b, n)))
        oks.append(np.broadcast_to(limit > 0, (b, n)))
    raw = np.stack(cols, axis=-1)
    ok = np.stack(oks, axis=-1)

    c = raw.shape[-1]
    same = raw[..., :, None] == raw[..., None, :]
    earlier = np.tril(np.ones((c, c), bool), k=-1)
    dup = (same & earlier & ok[..., None, :]).any(axis=-1)
    keep = ok & ~dup
    keep &= np.cumsum(keep, axis=-1) <= cfg.candidate_budget

    width = min(cfg.candidate_budget, n, c)
    big = np.iinfo(np.int64).max
    ordered = np.sort(np.where(keep, raw, big), axis=-1)[..., :width]
    valid = ordered != big
    idx = np.where(valid, ordered, pos[None, :, None])
    return idx, valid


# ---------------------------------------------------------------------------
# Scoring, selection, aggregation
# ---------------------------------------------------------------------------


def _global_index(idx: np.ndarray) -> np.ndarray:
    b, n, w = idx.shape
    return (idx + (np.arange(b) * n)[:, None, None]).reshape(b * n, w)


def pointer_scores(h_tilde: Tensor, idx: np.ndarray, valid: np.ndarray,
                   p: PointerLayerParams) -> Tensor:
    """Scaled dot-product scores of each query against its candidate table.

    ``h_tilde`` is [B, N, d]; the result is [B*N, W] with invalid slots
    (padding, and future positions under a causal mask) set to ``MASKED_SCORE``.
    """
    b, n, d = h_tilde.shape
    q = reshape(linear(p.wq, h_tilde), (b * n, d))
    k = reshape(linear(p.wk, h_tilde), (b * n, d))
    s = scale(sampled_dot(q, k, _global_index(idx)), 1.0 / np.sqrt(d))
    return masked_fill(s, valid.reshape(b * n, -1), MASKED_SCORE)


def select_hard(scores, valid=None) -> np.ndarray:
    """Rowwise argmax over the last axis; ties go to the lowest index."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    if valid is None:
        valid = s > MASKED_SCORE / 2
    valid = np.broadcast_to(valid, s.shape)
    if not valid.any(axis=-1).all():
        raise ValueError("select_hard: a row has no unmasked entry")
    return np.argmax(np.where(valid, s, -np.inf), axis=-1)


def aggregate(weights_or_ptrs, h: Tensor, p: PointerLayerParams, mode: str,
              idx: np.ndarray | None = None) -> Tensor:
    """Gated aggregation of the selected source rows.

    ``h`` is [B, N, d].  In ``soft`` mode ``weights_or_ptrs`` is a Tensor of
    selection weights, either [B*N, W] over the candidate table ``idx`` or
    [B, N, N] over all positions when ``idx`` is None.  In ``hard`` mode it
    holds integer positions [B, N].
    """
    b, n, d = h.shape
    flat = reshape(h, (b * n, d))
    if mode == "soft":
        w = weights_or_ptrs
        if idx is None:
            idx = np.broadcast_to(np.arange(n), (b, n, n))
            w = reshape(w, (b * n, n))
        mixed = sparse_mix(w, flat, _global_index(idx))
    elif mode == "hard":
        ptrs = np.asarray(weights_or_ptrs)
        if ptrs.shape != (b, n):
            raise ShapeError(f"hard aggregation expects pointers of shape {(b, n)}, got {ptrs.shape}")
        if ptrs.min() < 0 or ptrs.max() >= n:
            raise IndexError(f"pointer out of range [0, {n})")
        mixed = gather_rows(flat, (ptrs + (np.arange(b) * n)[:, None]).reshape(-1))
    else:
        raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")
    return mul(reshape(mixed, (b, n, d)), sigmoid(linear(p.gate, h)))


@dataclass
class LayerOutput:
    h: Tensor
    ptrs: np.ndarray
    alpha: Tensor | None = None
    scores: Tensor | None = None


def pointer_layer_forward(h: Tensor, prev_ptrs: np.ndarray, p: PointerLayerParams,
                          cfg: ModelConfig, gumbel: GumbelConfig | None = None,
                          stream: int = 0, noise: np.ndarray | None = None) -> LayerOutput:
    """One pointer layer.  ``gumbel=None`` selects hard inference.

    ``h`` is [B, N, d] and ``prev_ptrs`` [B, N].  In training the Gumbel
    noise comes from ``stream`` of the config's seed unless ``noise`` is given.
    """
    b, n, d = h.shape
    enc = encode_prev_pointer(prev_ptrs, n, p, h.dtype)
    h_tilde = chain_condition(h, enc, p, cfg.chain_combine)
    idx, valid = candidate_table(prev_ptrs, cfg)
    scores = pointer_scores(h_tilde, idx, valid, p)
    flat_idx = idx.reshape(b * n, -1)
    rows = np.arange(b * n)
    alpha = None
    if gumbel is None:
        slot = select_hard(scores, valid.reshape(b * n, -1))
        ptrs = flat_idx[rows, slot].reshape(b, n)
        z = aggregate(ptrs, h, p, "hard")
    else:
        if noise is None:
            noise = gumbel_noise(scores.shape, gumbel, stream, scores.dtype)
        alpha = gumbel_softmax(scores, gumbel, noise=noise)
        slot = select_hard(alpha.data, valid.reshape(b * n, -1))
        ptrs = flat_idx[rows, slot].reshape(b, n)
        z = aggregate(alpha, h, p, "soft", idx=idx)
    u = layer_norm(p.ln1, add(h, z))
    h_next = add(u, ffn(p.ffn, layer_norm(p.ln2, u)))
    return LayerOutput(h_next, ptrs, alpha, scores)


def embed_tokens(tokens: np.ndarray, tok_emb: Tensor, pos_emb: Tensor) -> Tensor:
    n = tokens.shape[-1]
    if n > pos_emb.shape[0]:
        raise ShapeError(f"sequence length {n} exceeds max_seq_len {pos_emb.shape[0]}")
    pos = gather_rows(pos_emb, np.arange(n))
    return add(embedding(tok_emb, tokens), pos)


def pointer_model_forward(tokens, params: PointerModelParams, cfg: ModelConfig,
                          gumbel: GumbelConfig | None = None,
                          keep_alpha: bool = False) -> tuple[Tensor, PointerTrace]:
    """Logits [..., N, V] and the pointer trace for a token array [N] or [B, N].

    The first layer chains from self-pointers.  Layer ``l`` draws its Gumbel
    noise from stream ``l`` of ``gumbel.rng_seed``.
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    b, n = tokens.shape
    h = embed_tokens(tokens, params.tok_emb, params.pos_emb)
    prev = np.broadcast_to(np.arange(n), (b, n))
    ptrs, alphas = [], []
    for layer_no, lp in enumerate(params.layers):
        out = pointer_layer_forward(h, prev, lp, cfg, gumbel, stream=layer_no)
        h, prev = out.h, out.ptrs
        ptrs.append(out.ptrs)
        if keep_alpha and out.alpha is not None:
            alphas.append(out.alpha.data)
    logits = linear(params.head, layer_norm(params.ln_f, h))
    trace = np.stack(ptrs)
    if single:
        logits = reshape(logits, logits.shape[1:])
        trace = trace[:, 0]
    return logits, PointerTrace(trace, alphas or None)
