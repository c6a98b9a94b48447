"""Vanilla multi-head self-attention transformer matched to the pointer model.

The block is the pointer block with the pointer mechanism swapped for
attention: ``u = LN1(H + MHA(H))``, ``H' = u + FFN(LN2(u))``.  Embeddings,
final norm and vocabulary head are identical, so timing differences isolate
the mixing mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .nn import (
    FFNParams,
    LayerNormParams,
    LinearParams,
    ffn,
    init_ffn,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)
from .pointer import embed_tokens, init_embeddings
from .tensor import ShapeError, Tensor, add, add_macs, record, reshape


@dataclass
class VanillaLayerParams:
    # per-head projections packed column-wise: head h owns columns h*dh:(h+1)*dh
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn: FFNParams


@dataclass
class VanillaModelParams:
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[VanillaLayerParams]
    ln_f: LayerNormParams
    head: LinearParams


def init_vanilla_model(cfg: ModelConfig, seed: int = 0) -> VanillaModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    tok, pos = init_embeddings(rng, cfg)
    layers = [
        VanillaLayerParams(
            wq=init_linear(rng, d, d), wk=init_linear(rng, d, d),
            wv=init_linear(rng, d, d), wo=init_linear(rng, d, d),
            ln1=init_layer_norm(d), ln2=init_layer_norm(d),
            ffn=init_ffn(rng, d, cfg.ffn_mult * d))
        for _ in range(cfg.n_layers)
    ]
    return VanillaModelParams(tok, pos, layers, init_layer_norm(d), init_linear(rng, d, cfg.vocab_size))


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _masked_scores(qb, kb, sc, future):
    s = (qb @ np.swapaxes(kb, -1, -2)) * sc
    if future is not None:
        s[:, future] = -np.inf
    return s


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool) -> Tensor:
    """softmax(Q K^T / sqrt(d_head) + mask) V per head, heads concatenated.

    Inputs are [B, N, d].  Only Q, K, V and the per-row log-sum-exp are kept
    for the backward pass; probabilities are recomputed one batch row at a
    time, bounding memory at O(H N^2) instead of O(L B H N^2).
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    b, n, d = q.shape
    if d % n_heads:
        raise ShapeError(f"d_model={d} not divisible by n_heads={n_heads}")
    qh, kh, vh = (_split_heads(t.data, n_heads) for t in (q, k, v))
    dt = q.dtype.type
    sc = dt(1.0 / np.sqrt(d // n_heads))
    future = np.triu(np.ones((n, n), bool), k=1) if causal else None
    out = np.empty_like(qh)
    lse = np.empty(qh.shape[:3], dtype=q.dtype)
    for i in range(b):
        s = _masked_scores(qh[i], kh[i], sc, future)
        m = s.max(axis=-1, keepdims=True)
        np.exp(s - m, out=s)
        tot = s.sum(axis=-1, keepdims=True)
        s /= tot
        out[i] = s @ vh[i]
        lse[i] = (m + np.log(tot))[..., 0]
    add_macs("attention", 2 * b * n * n * d)

    def vjp(g):
        gh = _split_heads(g, n_heads)
        dq, dk, dv = np.empty_like(qh), np.empty_like(kh), np.empty_like(vh)
        for i in range(b):
            p = _masked_scores(qh[i], kh[i], sc, future)
            p -= lse[i][..., None]
            np.exp(p, out=p)
            dv[i] = np.swapaxes(p, -1, -2) @ gh[i]
            dp = gh[i] @ np.swapaxes(vh[i], -1, -2)
            dp -= (gh[i] * out[i]).sum(axis=-1, keepdims=True)
            dp *= p
            dp *= sc
            dq[i] = dp @ kh[i]
            dk[i] = np.swapaxes(dp, -1, -2) @ qh[i]
        return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)

    return record("attention", (q, k, v), _merge_heads(out), vjp)


def attention_probs(h: Tensor, p: VanillaLayerParams, n_heads: int, causal: bool) -> np.ndarray:
    """Attention weights [B, heads, N, N] of one layer, for inspection."""
    q = _split_heads(linear(p.wq, h).data, n_heads)
    k = _split_heads(linear(p.wk, h).data, n_heads)
    n = h.shape[1]
    sc = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    future = np.triu(np.ones((n, n), bool), k=1) if causal else None
    probs = np.stack([_masked_scores(q[i], k[i], sc, future) for i in range(q.shape[0])])
    probs = np.exp(probs - probs.max(axis=-1, keepdims=True))
    return probs / probs.sum(axis=-1, keepdims=True)


def mha_forward(h: Tensor, p: VanillaLayerParams, n_heads: int, causal: bool) -> Tensor:
    att = attention(linear(p.wq, h), linear(p.wk, h), linear(p.wv, h), n_heads, causal)
    return linear(p.wo, att)


def vanilla_layer_forward(h: Tensor, p: VanillaLayerParams, cfg: ModelConfig) -> Tensor:
    u = layer_norm(p.ln1, add(h, mha_forward(h, p, cfg.n_heads, cfg.causal)))
    return add(u, ffn(p.ffn, layer_norm(p.ln2, u)))


def vanilla_model_forward(tokens, params: VanillaModelParams, cfg: ModelConfig) -> Tensor:
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    h = embed_tokens(tokens, params.tok_emb, params.pos_emb)
    for lp in params.layers:
        h = vanilla_layer_forward(h, lp, cfg)
    logits = linear(params.head, layer_norm(params.ln_f, h))
    return reshape(logits, logits.shape[1:]) if single else logits
