"""Parameterized building blocks shared by the pointer model and the baseline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    gather_rows,
    matmul,
    record,
    relu,
    scale,
    softmax_last,
)


@dataclass
class LinearParams:
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


@dataclass
class FFNParams:
    up: LinearParams
    down: LinearParams


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    noise_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.noise_scale not in (0, 1, 0.0, 1.0):
            raise ValueError("noise_scale must be 0 or 1")


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> LinearParams:
    # Glorot-uniform weights, zero bias
    limit = np.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_in, n_out))
    return LinearParams(Tensor(w, requires_grad=True),
                        Tensor(np.zeros(n_out), requires_grad=True))


def init_layer_norm(d: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(d), requires_grad=True),
                           Tensor(np.zeros(d), requires_grad=True), eps)


def init_ffn(rng: np.random.Generator, d: int, hidden: int | None = None) -> FFNParams:
    hidden = 4 * d if hidden is None else hidden
    return FFNParams(init_linear(rng, d, hidden), init_linear(rng, hidden, d))


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses/lists of Tensors into dotted names, in field order."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (Tensor, list, tuple)) or dataclasses.is_dataclass(val):
                out.update(named_tensors(val, f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            out.update(named_tensors(val, f"{prefix}.{i}" if prefix else str(i)))
    return out


def parameters(obj) -> list[Tensor]:
    return list(named_tensors(obj).values())


def count_parameters(obj) -> int:
    return sum(t.size for t in parameters(obj))


def cast_parameters(obj, dtype):
    """Deep copy of a parameter tree with every tensor converted to ``dtype``."""
    if isinstance(obj, Tensor):
        return Tensor(obj.data, requires_grad=obj.requires_grad, dtype=dtype)
    if dataclasses.is_dataclass(obj):
        changes = {f.name: cast_parameters(getattr(obj, f.name), dtype)
                   for f in dataclasses.fields(obj)}
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [cast_parameters(v, dtype) for v in obj]
    if isinstance(obj, tuple):
        return tuple(cast_parameters(v, dtype) for v in obj)
    return obj


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.in_features:
        raise ShapeError(f"linear expects trailing dim {p.in_features}, got {x.shape}")
    return add(matmul(x, p.weight), p.bias)


def layer_norm(p: LayerNormParams, x: Tensor) -> Tensor:
    """Normalize each row over the trailing dim (population variance), then scale and shift."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty dimension")
    if p.gamma.shape != (d,):
        raise ShapeError(f"layer_norm expects trailing dim {p.gamma.shape[0]}, got {x.shape}")
    xd, gd, bd = x.data, p.gamma.data, p.beta.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(p.eps))
    xhat = xc * inv
    out = xhat * gd + bd

    def vjp(g):
        gx = gg = gb = None
        if p.gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if p.beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record("layer_norm", (x, p.gamma, p.beta), out, vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return gather_rows(table, ids)


def ffn(p: FFNParams, x: Tensor) -> Tensor:
    return linear(p.down, relu(linear(p.up, x)))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set.

    ``logits`` is [..., V]; ``targets`` and ``mask`` match its leading shape.
    """
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    m = np.ones(t.shape, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    n = int(m.sum())
    if n == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(t.size)
    nll = lse - shifted[rows, t]
    loss = np.asarray(nll[m].sum() / n, dtype=logits.dtype)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1
        p *= (m / n)[:, None].astype(p.dtype)
        return ((p * g).reshape(logits.shape),)

    return record("cross_entropy", (logits,), loss, vjp)


def gumbel_noise(shape, cfg: GumbelConfig, stream: int = 0, dtype=np.float32) -> np.ndarray:
    """Seeded Gumbel(0, 1) samples from a Philox stream keyed by ``rng_seed``.

    ``stream`` selects an independent counter block, so callers (one per
    layer, say) can replay exactly the noise they consumed.
    """
    if cfg.noise_scale == 0:
        return np.zeros(shape, dtype=dtype)
    bitgen = np.random.Philox(key=int(cfg.rng_seed), counter=[0, 0, 0, int(stream)])
    u = np.random.Generator(bitgen).random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(scores: Tensor, cfg: GumbelConfig, stream: int = 0,
                   noise: np.ndarray | None = None) -> Tensor:
    """Rowwise softmax((scores + g) / tau)."""
    if noise is None:
        noise = gumbel_noise(scores.shape, cfg, stream, scores.dtype)
    perturbed = add(scores, Tensor(noise, dtype=scores.dtype))
    return softmax_last(scale(perturbed, 1.0 / cfg.tau))
