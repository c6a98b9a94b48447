"""Command-line entry point: train, bench, probe and gen subcommands.

Exit codes are stable: 0 ok, 2 config or usage error, 3 numeric failure,
4 I/O error or corrupt checkpoint.

A run config is a JSON object with optional sections ``model``, ``train``,
``task`` and an optional ``out`` directory.  Unknown keys anywhere are
rejected.  ``task.kind`` selects the task; when ``model.vocab_size`` is
omitted it is derived from the task vocabulary.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .bench import scaling_report, time_training_step
from .config import ModelConfig
from .interpret import export_heatmap, extract_trace, pointer_heatmap, pooled_hop_stats
from .tasks import LayoutError
from .tensor import NonFiniteError
from .training import (MODEL_KINDS, CheckpointError, TaskConfig, TrainConfig, init_model,
                       load_checkpoint, save_checkpoint, sub_seed, train_loop)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

RUN_SECTIONS = ("model", "train", "task", "out")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    out: str | None = None

    @property
    def task(self) -> TaskConfig:
        return self.train.task

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(RUN_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        for section in ("model", "train", "task"):
            if not isinstance(d.get(section, {}), dict):
                raise ConfigError(f"section {section!r} must be an object")
        try:
            task = TaskConfig.from_dict(dict(d.get("task", {})))
            train_d = dict(d.get("train", {}))
            if "task" in train_d:
                raise ConfigError("put task settings in the top-level 'task' section")
            train = TrainConfig.from_dict(dict(train_d, task=task))
            model_d = dict(d.get("model", {}))
            model_d.setdefault("vocab_size", task.vocab.size)
            model = ModelConfig.from_dict(model_d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc).strip("'\"")) from exc
        check_fits(model, task)
        out = d.get("out")
        if out is not None and not isinstance(out, str):
            raise ConfigError("'out' must be a string path")
        return cls(model, train, out)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        task = train.pop("task")
        return {"model": self.model.to_dict(), "train": train, "task": task, "out": self.out}


def check_fits(model: ModelConfig, task: TaskConfig) -> None:
    if model.vocab_size < task.vocab.size:
        raise ConfigError(f"model.vocab_size={model.vocab_size} < task vocabulary {task.vocab.size}")
    if model.max_seq_len < task.seq_len:
        raise ConfigError(f"model.max_seq_len={model.max_seq_len} < task.seq_len={task.seq_len}")
    try:
        task.batch(0, 1)
    except LayoutError as exc:
        raise ConfigError(f"task layout: {exc}") from exc


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def thread_cap() -> int:
    raw = os.environ.get("POINTER_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"POINTER_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"POINTER_LAB_THREADS must be a positive integer, got {raw!r}")
    return n


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        run = load_run_config(args.config)
        train = run.train
        if args.model is not None:
            train = replace(train, model_kind=args.model)
        if args.seed is not None:
            train = replace(train, seed=args.seed)
        out = args.out or run.out
        if out is None:
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    out = Path(out)

    def log(rec):
        if not args.quiet:
            print(f"step {rec.step:>6}  loss {rec.loss:.4f}  acc {rec.accuracy:.4f}  tau {rec.tau:.4f}",
                  file=sys.stderr)

    try:
        result = train_loop(train, run.model, log=log)
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    final = result.history.records[-1]
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.history.to_csv(train.record_wall_time))
        save_checkpoint(out / "checkpoint.ptrc", result.params, run.model, result.state,
                        train.model_kind, extra={"task": asdict(train.task), "seed": train.seed})
        summary = {"final_loss": final.loss, "final_accuracy": final.accuracy,
                   "steps": train.steps, "model_kind": train.model_kind, "seed": train.seed}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    except OSError as exc:
        return _fail(EXIT_IO, f"writing outputs to {out}: {exc}")
    print(json.dumps({"final_loss": final.loss, "final_accuracy": final.accuracy}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _parse_list(raw: str, what: str, cast):
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if not items:
        raise ConfigError(f"--{what} is empty")
    try:
        return [cast(s) for s in items]
    except ValueError:
        raise ConfigError(f"--{what}: cannot parse {raw!r}") from None


def cmd_bench(args) -> int:
    try:
        lengths = _parse_list(args.lengths, "lengths", int)
        if any(n < 2 for n in lengths) or len(set(lengths)) != len(lengths):
            raise ConfigError(f"--lengths must be distinct integers >= 2, got {lengths}")
        models = _parse_list(args.models, "models", str)
        bad = [m for m in models if m not in MODEL_KINDS]
        if bad:
            raise ConfigError(f"unknown models {bad}; expected some of {list(MODEL_KINDS)}")
        if args.reps < 5:
            raise ConfigError("--reps must be >= 5")
        if args.warmup < 2:
            raise ConfigError("--warmup must be >= 2")
        if len(lengths) < 2:
            raise ConfigError("need at least two lengths to fit a scaling slope")
        cfg = ModelConfig(vocab_size=args.vocab, n_layers=args.layers, d_model=args.d_model,
                          n_heads=args.heads, max_seq_len=max(lengths),
                          candidate_budget=args.candidate_budget)
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))

    records = []
    for m in models:
        for n in lengths:
            rec = time_training_step(m, n, args.reps, args.warmup, cfg, args.seed, args.batch)
            if rec.error:
                print(f"{m} N={n}: {rec.error}", file=sys.stderr)
            elif not args.quiet:
                print(f"{m:<8} N={n:<6} median {rec.median_step_wall_s:.4f}s", file=sys.stderr)
            records.append(rec)
    try:
        report = scaling_report(records)
    except ValueError as exc:
        return _fail(EXIT_NUMERIC, f"cannot build scaling report: {exc}")
    table = report.table()
    try:
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "bench.csv").write_text(report.to_csv())
            (out / "bench_table.txt").write_text(table + "\n")
            (out / "bench_summary.json").write_text(json.dumps(
                {"slopes": report.slopes, "speedup": {str(k): v for k, v in report.speedup.items()}},
                indent=2) + "\n")
        else:
            sys.stdout.write(report.to_csv())
    except OSError as exc:
        return _fail(EXIT_IO, f"writing outputs: {exc}")
    print(table)
    if any(r.error for r in records):
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def _probe_model(args):
    """(params, model_cfg, task_cfg) from a checkpoint or a fresh random init."""
    if args.checkpoint:
        params, model_cfg, _, kind, extra = load_checkpoint(args.checkpoint)
        if kind != "pointer":
            raise ConfigError(f"probe needs a pointer checkpoint, got {kind!r}")
        task_d = (extra or {}).get("task", {})
        task = TaskConfig.from_dict(dict(task_d, kind=args.task or task_d.get("kind", "copy")))
    else:
        if args.config:
            run = load_run_config(args.config)
            model_cfg, task = run.model, run.task
            if args.task:
                task = replace(task, kind=args.task)
        else:
            task = TaskConfig(kind=args.task or "copy")
            model_cfg = ModelConfig(vocab_size=task.vocab.size, n_layers=2, d_model=64,
                                    max_seq_len=task.seq_len)
        params = init_model("pointer", model_cfg, sub_seed(args.seed, "init"))
    check_fits(model_cfg, task)
    return params, model_cfg, task


def cmd_probe(args) -> int:
    try:
        threads = thread_cap()
        if args.samples < 1:
            raise ConfigError("--samples must be >= 1")
        params, model_cfg, task = _probe_model(args)
        if args.layer == "all":
            layers = list(range(model_cfg.n_layers))
        else:
            try:
                layers = [int(args.layer)]
            except ValueError:
                raise ConfigError(f"--layer must be 'all' or an integer, got {args.layer!r}") from None
            if not 0 <= layers[0] < model_cfg.n_layers:
                raise ConfigError(f"--layer {layers[0]} out of range [0, {model_cfg.n_layers})")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_IO, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, f"reading checkpoint: {exc}")

    batch = task.batch(sub_seed(args.seed, "probe"), args.samples)
    traces = extract_trace(params, batch.inputs, model_cfg).split()
    stats = pooled_hop_stats(traces)
    out = Path(args.out)

    def export(layer):
        m = pointer_heatmap(traces, layer)
        export_heatmap(m, out / f"layer_{layer}.pgm", "pgm")
        export_heatmap(m, out / f"layer_{layer}.csv", "csv")

    try:
        out.mkdir(parents=True, exist_ok=True)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(export, layers))
        payload = [s for s in stats.to_json() if s["layer"] in layers]
        (out / "hop_stats.json").write_text(json.dumps(payload, indent=2) + "\n")
    except OSError as exc:
        return _fail(EXIT_IO, f"writing outputs to {out}: {exc}")
    for s in payload:
        print(f"layer {s['layer']}: mean hop {s['mean']:.2f}  max {s['max']}  "
              f"self-loops {s['self_loop_fraction']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    try:
        task = TaskConfig(kind=args.task, payload_symbols=args.payload_symbols, seq_len=args.seq_len,
                          payload_len=args.payload_len, distance=args.distance, n_pairs=args.pairs)
        if args.batch < 1:
            raise ConfigError("--batch must be >= 1")
        batch = task.batch(args.seed, args.batch)
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    lines = "".join(json.dumps(r) + "\n" for r in batch.rows())
    if args.out:
        try:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{args.task}.jsonl").write_text(lines)
        except OSError as exc:
            return _fail(EXIT_IO, f"writing outputs: {exc}")
    else:
        sys.stdout.write(lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointer-lab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True, help="path to the JSON run config")
    t.add_argument("--model", choices=MODEL_KINDS, help="override train.model_kind")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--out", help="output directory (overrides 'out' in the config)")
    t.add_argument("--quiet", action="store_true", help="no progress lines on stderr")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="time training steps across sequence lengths")
    b.add_argument("--lengths", default="256,512,1024,2048", help="comma-separated sequence lengths")
    b.add_argument("--models", default="pointer,vanilla", help="comma-separated model kinds")
    b.add_argument("--reps", type=int, default=10, help="timed steps per point (>= 5)")
    b.add_argument("--warmup", type=int, default=2, help="discarded warmup steps (>= 2)")
    b.add_argument("--d-model", type=int, default=256)
    b.add_argument("--layers", type=int, default=6)
    b.add_argument("--heads", type=int, default=8)
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--candidate-budget", type=int, default=32)
    b.add_argument("--vocab", type=int, default=32)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="directory for bench.csv and bench_table.txt (default: CSV to stdout)")
    b.add_argument("--quiet", action="store_true", help="no progress lines on stderr")
    b.set_defaults(func=cmd_bench)

    pr = sub.add_parser("probe", help="pointer heatmaps and hop statistics")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained pointer checkpoint")
    src.add_argument("--random-init", action="store_true", help="probe an untrained model")
    pr.add_argument("--config", help="run config for --random-init (default: a small copy-task model)")
    pr.add_argument("--task", choices=("copy", "assoc"), help="task to draw probe inputs from")
    pr.add_argument("--layer", default="all", help="'all' or a layer index")
    pr.add_argument("--samples", type=int, default=100, help="number of probe sequences")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True, help="output directory")
    pr.set_defaults(func=cmd_probe)

    g = sub.add_parser("gen", help="dump task batches as JSON lines")
    g.add_argument("--task", choices=("copy", "assoc"), default="copy")
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seq-len", type=int, default=64)
    g.add_argument("--payload-len", type=int, default=8)
    g.add_argument("--distance", type=int, default=16)
    g.add_argument("--pairs", type=int, default=4)
    g.add_argument("--payload-symbols", type=int, default=16)
    g.add_argument("--out", help="directory for <task>.jsonl (default: stdout)")
    g.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
