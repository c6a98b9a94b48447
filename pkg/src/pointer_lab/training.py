"""Adam, the Gumbel temperature schedule, the training loop and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baseline import init_vanilla_model, vanilla_model_forward
from .config import ModelConfig
from .nn import GumbelConfig, cross_entropy, named_tensors
from .pointer import init_pointer_model, pointer_model_forward
from .tasks import TaskBatch, VocabSpec, gen_assoc_recall_batch, gen_copy_batch, token_accuracy
from .tensor import NonFiniteError, Tape, Tensor, backward, no_grad

MODEL_KINDS = ("pointer", "vanilla")

# Sub-seed component ids: every random stream of a run derives from
# (seed, component id) so one seed reproduces the whole run.
SEED_COMPONENTS = {"init": 0, "data": 1, "gumbel": 2, "eval": 3, "probe": 4}


def sub_seed(seed: int, component: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), SEED_COMPONENTS[component], int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Models by kind
# ---------------------------------------------------------------------------


def init_model(kind: str, cfg: ModelConfig, seed: int):
    if kind == "pointer":
        return init_pointer_model(cfg, seed)
    if kind == "vanilla":
        return init_vanilla_model(cfg, seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_forward(kind: str, tokens, params, cfg: ModelConfig, gumbel: GumbelConfig | None = None):
    """Logits and (pointer model only) the pointer trace."""
    if kind == "pointer":
        return pointer_model_forward(tokens, params, cfg, gumbel)
    return vanilla_model_forward(tokens, params, cfg), None


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


def _from_dict(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise KeyError(f"unknown {section} config keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class TaskConfig:
    kind: str = "copy"
    payload_symbols: int = 16
    seq_len: int = 64
    payload_len: int = 8
    distance: int = 16
    n_pairs: int = 4

    def __post_init__(self):
        if self.kind not in ("copy", "assoc"):
            raise ValueError(f"task kind must be 'copy' or 'assoc', got {self.kind!r}")

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.payload_symbols)

    def batch(self, seed: int, batch_size: int) -> TaskBatch:
        if self.kind == "copy":
            return gen_copy_batch(seed, batch_size, self.seq_len, self.payload_len,
                                  self.distance, self.vocab)
        return gen_assoc_recall_batch(seed, batch_size, self.seq_len, self.n_pairs, self.vocab)

    @classmethod
    def from_dict(cls, d: dict) -> TaskConfig:
        return _from_dict(cls, d, "task")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    tau_start: float = 1.0
    tau_min: float = 0.1
    tau_decay: float = 0.99885
    seed: int = 0
    eval_every: int = 100
    eval_batches: int = 4
    clip_norm: float | None = None
    model_kind: str = "pointer"
    record_wall_time: bool = False
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self):
        if isinstance(self.task, dict):
            self.task = TaskConfig.from_dict(self.task)
        if not self.tau_start >= self.tau_min > 0:
            raise ValueError("need tau_start >= tau_min > 0")
        if not 0 < self.tau_decay <= 1:
            raise ValueError("need 0 < tau_decay <= 1")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.eval_batches < 1:
            raise ValueError("steps must be >= 0; batch_size, eval_every, eval_batches >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return _from_dict(cls, d, "train")


def temperature_at(step: int, cfg: TrainConfig) -> float:
    return max(cfg.tau_min, cfg.tau_start * cfg.tau_decay ** step)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], lr: float = 3e-4) -> AdamState:
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0, lr)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.  Missing gradients count as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)


def clip_gradients(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    norm = grad_norm(grads)
    if norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * np.float32(k)
    return norm


def grad_norm(grads: dict[str, np.ndarray | None]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                         for g in grads.values() if g is not None))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class EvalRecord:
    step: int
    loss: float
    accuracy: float
    tau: float
    wall_s: float


CSV_HEADER = ["step", "loss", "accuracy", "tau", "wall_s"]


@dataclass
class MetricsHistory:
    records: list[EvalRecord] = field(default_factory=list)

    def append(self, rec: EvalRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("metrics steps must increase")
        self.records.append(rec)

    def values(self) -> list[tuple]:
        """Records without wall time, for determinism comparisons."""
        return [(r.step, r.loss, r.accuracy, r.tau) for r in self.records]

    def to_csv(self, with_wall_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            wall = repr(r.wall_s) if with_wall_time else ""
            w.writerow([r.step, repr(r.loss), repr(r.accuracy), repr(r.tau), wall])
        return buf.getvalue()


@dataclass
class TrainResult:
    history: MetricsHistory
    params: object
    state: AdamState
    grad_norms: list[float]


def evaluate(kind: str, params, cfg: ModelConfig, batches: list[TaskBatch]) -> tuple[float, float]:
    """Masked loss and token accuracy under hard inference."""
    losses, hits, total = [], 0, 0
    with no_grad():
        for b in batches:
            logits, _ = model_forward(kind, b.inputs, params, cfg)
            losses.append(cross_entropy(logits, b.targets, b.loss_mask).item() * b.loss_mask.sum())
            pred = logits.data.argmax(axis=-1)
            hits += int((pred[b.loss_mask] == b.targets[b.loss_mask]).sum())
            total += int(b.loss_mask.sum())
    return float(sum(losses) / total), hits / total


def train_step(kind: str, params, named: dict[str, Tensor], cfg: ModelConfig, batch: TaskBatch,
               state: AdamState, gumbel: GumbelConfig | None, clip_norm: float | None = None):
    """Forward, backward and one Adam update; returns (loss, grad_norm)."""
    for p in named.values():
        p.grad = None
    with Tape() as tape:
        logits, _ = model_forward(kind, batch.inputs, params, cfg, gumbel)
        loss = cross_entropy(logits, batch.targets, batch.loss_mask)
    backward(loss, tape)
    grads = {k: p.grad for k, p in named.items()}
    norm = clip_gradients(grads, clip_norm) if clip_norm else grad_norm(grads)
    adam_step(named, grads, state)
    return loss.item(), norm


def train_loop(cfg: TrainConfig, model_cfg: ModelConfig, params=None,
               state: AdamState | None = None, log=None) -> TrainResult:
    """Train on freshly generated batches, evaluating with hard inference.

    Evaluation happens before the first step, every ``eval_every`` steps and
    after the last step, always on the same held-out batches.
    """
    kind = cfg.model_kind
    task = cfg.task
    if model_cfg.vocab_size < task.vocab.size:
        raise ValueError(f"vocab_size {model_cfg.vocab_size} < task vocabulary {task.vocab.size}")
    if params is None:
        params = init_model(kind, model_cfg, sub_seed(cfg.seed, "init"))
    named = named_tensors(params)
    if state is None:
        state = AdamState.zeros_like(named, cfg.lr)
    eval_set = [task.batch(sub_seed(cfg.seed, "eval", i), cfg.batch_size)
                for i in range(cfg.eval_batches)]
    history = MetricsHistory()
    norms: list[float] = []
    t0 = time.perf_counter()

    def do_eval(step):
        loss, acc = evaluate(kind, params, model_cfg, eval_set)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite eval loss at step {step}")
        rec = EvalRecord(step, loss, acc, temperature_at(step, cfg), time.perf_counter() - t0)
        history.append(rec)
        if log:
            log(rec)

    do_eval(0)
    for step in range(cfg.steps):
        batch = task.batch(sub_seed(cfg.seed, "data", step), cfg.batch_size)
        tau = temperature_at(step, cfg)
        gumbel = GumbelConfig(tau, 1.0, sub_seed(cfg.seed, "gumbel", step))
        loss, norm = train_step(kind, params, named, model_cfg, batch, state,
                                gumbel if kind == "pointer" else None, cfg.clip_norm)
        if not (math.isfinite(loss) and math.isfinite(norm)):
            raise NonFiniteError(
                f"non-finite training loss/gradient at step {step} (loss={loss}, grad_norm={norm}, tau={tau:.4g})")
        norms.append(norm)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            do_eval(step + 1)
    return TrainResult(history, params, state, norms)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"PTRC"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict


def _encode_checkpoint(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def _decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: {what} needs {n} bytes at offset {pos}, file has {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version: {version} (supported: {VERSION})")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"tensor #{i} name length"))
        try:
            name = take(nlen, f"tensor #{i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"tensor #{i} name is not valid UTF-8") from exc
        (ndim,) = struct.unpack("<B", take(1, f"tensor '{name}' ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"tensor '{name}' dims"))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"tensor '{name}' data"), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    (blen,) = struct.unpack("<I", take(4, "config length"))
    blob = take(blen, "config blob")
    if pos != len(buf):
        raise CorruptCheckpointError(f"trailing bytes after config blob: {len(buf) - pos}")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"config blob is not valid JSON: {exc}") from exc
    return Checkpoint(tensors, config)


def save_checkpoint(path, params, model_cfg: ModelConfig, state: AdamState | None = None,
                    model_kind: str = "pointer", extra: dict | None = None) -> None:
    tensors = {f"param.{k}": t.data for k, t in named_tensors(params).items()}
    config = {"model_kind": model_kind, "model": model_cfg.to_dict()}
    if state is not None:
        for k in state.m:
            tensors[f"adam.m.{k}"] = state.m[k]
            tensors[f"adam.v.{k}"] = state.v[k]
        config["adam"] = {"t": state.t, "lr": state.lr, "beta1": state.beta1,
                          "beta2": state.beta2, "eps": state.eps}
    if extra:
        config["extra"] = extra
    Path(path).write_bytes(_encode_checkpoint(tensors, config))


def read_checkpoint(path) -> Checkpoint:
    return _decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path):
    """Rebuild ``(params, model_cfg, state_or_None, model_kind, extra)`` from a file."""
    ck = read_checkpoint(path)
    try:
        kind = ck.config["model_kind"]
        model_cfg = ModelConfig.from_dict(ck.config["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"config field invalid or missing: {exc}") from exc
    if kind not in MODEL_KINDS:
        raise CorruptCheckpointError(f"config field 'model_kind' invalid: {kind!r}")
    params = init_model(kind, model_cfg, 0)
    named = named_tensors(params)
    for name, t in named.items():
        key = f"param.{name}"
        if key not in ck.tensors:
            raise CorruptCheckpointError(f"missing tensor '{key}'")
        if ck.tensors[key].shape != t.shape:
            raise CorruptCheckpointError(
                f"tensor '{key}' has shape {ck.tensors[key].shape}, expected {t.shape}")
        t.data = ck.tensors[key].copy()
    state = None
    if "adam" in ck.config:
        a = ck.config["adam"]
        try:
            state = AdamState({k: ck.tensors[f"adam.m.{k}"].copy() for k in named},
                              {k: ck.tensors[f"adam.v.{k}"].copy() for k in named},
                              int(a["t"]), a["lr"], a["beta1"], a["beta2"], a["eps"])
        except KeyError as exc:
            raise CorruptCheckpointError(f"optimizer state field missing: {exc}") from exc
    return params, model_cfg, state, kind, ck.config.get("extra")
