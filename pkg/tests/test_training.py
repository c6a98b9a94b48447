import math
import struct

import numpy as np
import pytest

from pointer_lab.config import ModelConfig
from pointer_lab.nn import named_tensors
from pointer_lab.tensor import NonFiniteError, Tensor
from pointer_lab.training import (
    CSV_HEADER,
    MAGIC,
    AdamState,
    BadMagicError,
    CorruptCheckpointError,
    EvalRecord,
    MetricsHistory,
    TaskConfig,
    TrainConfig,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    adam_step,
    clip_gradients,
    evaluate,
    init_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    sub_seed,
    temperature_at,
    train_loop,
)

TINY_TASK = TaskConfig(kind="copy", seq_len=16, payload_len=3, distance=2)


def tiny_model(**kw):
    base = dict(vocab_size=TINY_TASK.vocab.size, n_layers=2, d_model=8, n_heads=2, max_seq_len=16,
                candidate_budget=8, local_window=4, n_strided_anchors=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train(**kw):
    base = dict(steps=6, batch_size=4, eval_every=3, eval_batches=1, task=TINY_TASK)
    base.update(kw)
    return TrainConfig(**base)


# --- adam -------------------------------------------------------------------


def scalar_param(x=1.0):
    p = {"w": Tensor(np.array([x]), requires_grad=True)}
    return p, AdamState.zeros_like(p, lr=0.1)


def test_adam_zero_grad_leaves_params():
    p, st = scalar_param(2.0)
    adam_step(p, {"w": np.zeros(1, np.float32)}, st)
    assert p["w"].data[0] == np.float32(2.0)
    assert st.t == 1
    adam_step(p, {"w": None}, st)
    assert st.t == 2 and p["w"].data[0] == np.float32(2.0)


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_is_lr_times_sign(g):
    p, st = scalar_param(0.0)
    adam_step(p, {"w": np.array([g], np.float32)}, st)
    assert p["w"].data[0] == pytest.approx(-0.1 * math.copysign(1, g), rel=1e-5)


def test_adam_three_step_hand_trace():
    grads = [1.0, -2.0, 0.5]
    # reference written out from the update rule in float64
    x, m, v = 1.0, 0.0, 0.0
    ref = []
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        ref.append(x)
    p, st = scalar_param(1.0)
    got = []
    for g in grads:
        adam_step(p, {"w": np.array([g], np.float32)}, st)
        got.append(float(p["w"].data[0]))
    np.testing.assert_allclose(got, ref, rtol=1e-6)
    assert st.t == 3


def test_adam_shape_mismatch():
    p, st = scalar_param()
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2, np.float32)}, st)


def test_clip_gradients():
    g = {"a": np.array([3.0, 0.0], np.float32), "b": np.array([4.0], np.float32), "c": None}
    assert clip_gradients(g, 1.0) == pytest.approx(5.0)
    assert math.sqrt(float((g["a"] ** 2).sum() + (g["b"] ** 2).sum())) == pytest.approx(1.0, rel=1e-5)


# --- temperature ------------------------------------------------------------


def test_temperature_schedule():
    cfg = TrainConfig(tau_start=1.0, tau_min=0.001, tau_decay=0.999)
    assert temperature_at(0, cfg) == 1.0
    taus = [temperature_at(s, cfg) for s in range(0, 10_000, 37)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    assert temperature_at(4605, cfg) == pytest.approx(math.exp(4605 * math.log(0.999)), rel=1e-12)
    assert temperature_at(4605, cfg) == pytest.approx(0.01, rel=1e-2)
    cfg2 = TrainConfig(tau_start=1.0, tau_min=0.1, tau_decay=0.999)
    assert temperature_at(4605, cfg2) == 0.1


def test_default_schedule_reaches_floor_near_end():
    cfg = TrainConfig()
    assert temperature_at(cfg.steps, cfg) == pytest.approx(0.1, abs=1e-3)


@pytest.mark.parametrize("bad", [dict(tau_min=0.0), dict(tau_start=0.05), dict(tau_decay=1.5),
                                 dict(tau_decay=0.0), dict(model_kind="lstm"), dict(batch_size=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dicts_reject_unknown_keys():
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"stepz": 3})
    with pytest.raises(KeyError):
        TaskConfig.from_dict({"kind": "copy", "len": 3})


def test_sub_seeds_are_distinct_and_stable():
    seeds = {sub_seed(42, c, i) for c in ("init", "data", "gumbel", "eval", "probe") for i in range(3)}
    assert len(seeds) == 15
    assert sub_seed(42, "data", 1) == sub_seed(42, "data", 1)


# --- metrics ----------------------------------------------------------------


def test_metrics_history_steps_increase_and_csv():
    h = MetricsHistory()
    h.append(EvalRecord(0, 1.5, 0.25, 1.0, 0.1))
    h.append(EvalRecord(10, 1.0, 0.5, 0.9, 0.2))
    with pytest.raises(ValueError):
        h.append(EvalRecord(10, 1.0, 0.5, 0.9, 0.2))
    lines = h.to_csv(with_wall_time=False).splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "step,loss,accuracy,tau,wall_s"
    assert lines[1] == "0,1.5,0.25,1.0,"
    assert h.to_csv().splitlines()[2].endswith(",0.2")


# --- loop -------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["pointer", "vanilla"])
def test_train_loop_deterministic(kind):
    a = train_loop(tiny_train(model_kind=kind, seed=5), tiny_model())
    b = train_loop(tiny_train(model_kind=kind, seed=5), tiny_model())
    assert a.history.values() == b.history.values()
    assert [r.step for r in a.history.records] == [0, 3, 6]
    for k, t in named_tensors(a.params).items():
        np.testing.assert_array_equal(t.data, named_tensors(b.params)[k].data)
    c = train_loop(tiny_train(model_kind=kind, seed=6), tiny_model())
    assert c.history.values() != a.history.values()


def test_train_loop_zero_lr_keeps_loss():
    res = train_loop(tiny_train(lr=0.0, steps=4, eval_every=2), tiny_model())
    losses = [r.loss for r in res.history.records]
    assert losses == [losses[0]] * len(losses)
    assert all(math.isfinite(n) for n in res.grad_norms)


def test_train_loop_rejects_small_vocab():
    with pytest.raises(ValueError):
        train_loop(tiny_train(), tiny_model(vocab_size=10))


def test_train_loop_reports_non_finite():
    params = init_model("pointer", tiny_model(), 0)
    params.head.weight.data[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        train_loop(tiny_train(), tiny_model(), params=params)


def test_train_loop_loss_decreases_on_short_run():
    cfg = tiny_train(steps=60, eval_every=60, lr=3e-3, batch_size=8)
    res = train_loop(cfg, tiny_model(d_model=16))
    assert res.history.records[-1].loss < res.history.records[0].loss


# --- checkpoints ------------------------------------------------------------


@pytest.fixture
def trained():
    res = train_loop(tiny_train(), tiny_model())
    return res


def test_checkpoint_save_load_save_identical(tmp_path, trained):
    save_checkpoint(tmp_path / "a.ptrc", trained.params, tiny_model(), trained.state, extra={"note": 1})
    params, cfg, state, kind, extra = load_checkpoint(tmp_path / "a.ptrc")
    assert cfg == tiny_model() and kind == "pointer" and extra == {"note": 1}
    assert state.t == trained.state.t
    save_checkpoint(tmp_path / "b.ptrc", params, cfg, state, kind, extra)
    assert (tmp_path / "a.ptrc").read_bytes() == (tmp_path / "b.ptrc").read_bytes()


def test_checkpoint_restores_eval_loss_exactly(tmp_path, trained):
    cfg = tiny_model()
    batches = [TINY_TASK.batch(123, 8)]
    before = evaluate("pointer", trained.params, cfg, batches)
    save_checkpoint(tmp_path / "c.ptrc", trained.params, cfg, trained.state)
    params, *_ = load_checkpoint(tmp_path / "c.ptrc")
    assert evaluate("pointer", params, cfg, batches) == before


def test_checkpoint_restores_optimizer_state(tmp_path):
    cfg = tiny_model(n_layers=1)
    half = train_loop(tiny_train(steps=2, eval_every=2), cfg)
    save_checkpoint(tmp_path / "h.ptrc", half.params, cfg, half.state)
    params, _, state, _, _ = load_checkpoint(tmp_path / "h.ptrc")
    assert state.t == 2
    for k, t in named_tensors(half.params).items():
        np.testing.assert_array_equal(t.data, named_tensors(params)[k].data)
        np.testing.assert_array_equal(half.state.m[k], state.m[k])
        np.testing.assert_array_equal(half.state.v[k], state.v[k])


def test_checkpoint_layout(tmp_path, trained):
    save_checkpoint(tmp_path / "x.ptrc", trained.params, tiny_model())
    raw = (tmp_path / "x.ptrc").read_bytes()
    assert raw[:4] == MAGIC == b"PTRC"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1 and count == len(named_tensors(trained.params))
    (nlen,) = struct.unpack("<H", raw[12:14])
    assert raw[14:14 + nlen] == b"param.tok_emb"
    ck = read_checkpoint(tmp_path / "x.ptrc")
    assert ck.config["model"]["d_model"] == 8


def test_checkpoint_bad_magic(tmp_path, trained):
    path = tmp_path / "m.ptrc"
    save_checkpoint(path, trained.params, tiny_model())
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path, trained):
    path = tmp_path / "v.ptrc"
    save_checkpoint(path, trained.params, tiny_model())
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated_names_field(tmp_path, trained):
    path = tmp_path / "t.ptrc"
    save_checkpoint(path, trained.params, tiny_model())
    raw = path.read_bytes()
    path.write_bytes(raw[:60])
    with pytest.raises(TruncatedCheckpointError, match="param.tok_emb"):
        load_checkpoint(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(TruncatedCheckpointError, match="config"):
        load_checkpoint(path)


def test_checkpoint_corrupt_config(tmp_path, trained):
    path = tmp_path / "j.ptrc"
    save_checkpoint(path, trained.params, tiny_model())
    raw = bytearray(path.read_bytes())
    raw[-1:] = b"!"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError, match="config"):
        load_checkpoint(path)
    path.write_bytes(bytes(raw[:-1]) + b"}" + b"\x00")
    with pytest.raises(CorruptCheckpointError, match="trailing"):
        load_checkpoint(path)
