"""Command-line entry point: train, eval, predict, bench, synth, schema.

Conventions:

* The resolved configuration is echoed as one ``config: {...}`` line on
  stderr for every run; stdout carries only the command's output.
* Operational errors are reported as a single JSON line on stderr with a
  stable ``code`` string.  Exit codes: 0 success, 2 usage/input error,
  3 runtime/numeric failure.
* ``MMGR_THREADS`` caps worker threads (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data, training
from .errors import ConfigError, MmgrError
from .graphs import (
    Modality,
    NodeKind,
    QuestionGraph,
    Topology,
    batch_graphs,
    build_graph,
    input_dims,
)
from .layers import ModelSpec, init_model, load_model, save_model
from .metrics import evaluate, f1
from .tensor import make_rng, softmax_rows


def worker_count() -> int:
    raw = os.environ.get("MMGR_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    return cap if cap > 0 else (os.cpu_count() or 1)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"config: {json.dumps(resolved)}", file=sys.stderr)


def _topology(name: str) -> Topology:
    return Topology(name)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    dataset = data.load_dataset(args.manifest, args.stores)
    config = training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        base_lr=args.lr,
        lr_step_epochs=args.lr_step,
        class_weights=(1.0, args.w_pos),
        seed=args.seed,
        early_stop_f1=args.early_stop_f1,
    )
    topology = _topology(args.topology)

    def progress(record):
        print(f"epoch {record['epoch']}: {json.dumps(record)}", file=sys.stderr)

    result = training.fit(
        dataset, config, topology, args.gated, log_path=args.log, on_epoch=progress
    )
    save_model(result.model, args.out)
    print(
        json.dumps(
            {
                "best_epoch": result.best_epoch,
                "best_val_f1": result.best_f1,
                "epochs_run": len(result.log),
                "model": str(args.out),
                "log": str(args.log),
            }
        )
    )
    return 0


def cmd_eval(args) -> int:
    dataset = data.load_dataset(args.manifest, args.stores)
    model = load_model(args.model)
    split = dataset.split(args.split)
    report = evaluate(model, split, dataset.store, macro=args.macro, workers=worker_count())
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.render_table())
    return 0


def cmd_predict(args) -> int:
    dataset = data.load_dataset(args.manifest, args.stores)
    model = load_model(args.model)
    if args.qid is not None:
        instances = [
            inst for split in dataset.splits.values() for inst in split if inst.qid == args.qid
        ]
        if not instances:
            raise ConfigError(f"unknown question id {args.qid!r}")
    else:
        instances = dataset.split(args.split)
        if not instances:
            raise ConfigError(f"split {args.split!r} is empty")
    for inst in instances:
        graph = build_graph(inst, dataset.store, model.topology)
        batch = batch_graphs([graph])
        logits, _ = model.forward(batch)
        probs = softmax_rows(logits)[:, 1]
        sources = []
        positives = []
        for i in range(batch.n_nodes):
            if not batch.has_label[i]:
                continue
            predicted = int(logits[i, 1] > logits[i, 0])
            record = {
                "sid": batch.source_ids[i],
                "modality": batch.modalities[i].value,
                "p_positive": float(probs[i]),
                "predicted": predicted,
            }
            sources.append(record)
            if predicted:
                positives.append(batch.source_ids[i])
        print(json.dumps({"qid": inst.qid, "positive_sources": positives, "sources": sources}))
    return 0


def cmd_bench(args) -> int:
    if args.model:
        model = load_model(args.model, expect_topology=Topology.STAR)
    else:
        model = init_model(ModelSpec(Topology.STAR, gated=args.gated), args.seed)

    # one star graph holding every source, scored in a single forward pass
    rng = make_rng(args.seed + 1)
    dims = input_dims(Topology.STAR)
    kinds = [NodeKind.QUESTION] + [
        NodeKind.IMAGE_SOURCE if i % 2 == 0 else NodeKind.TEXT_SOURCE
        for i in range(args.nodes)
    ]
    graph = QuestionGraph(
        topology=Topology.STAR,
        graph_id="bench",
        kinds=kinds,
        features=[rng.standard_normal(dims[k]) for k in kinds],
        has_label=np.array([k is not NodeKind.QUESTION for k in kinds]),
        labels=np.zeros(args.nodes + 1, dtype=np.int64),
        edges=np.array([(0, i) for i in range(1, args.nodes + 1)], dtype=np.int64),
        modalities=[None]
        + [Modality.IMAGE if i % 2 == 0 else Modality.TEXT for i in range(args.nodes)],
        source_ids=[None] + [f"s{i}" for i in range(args.nodes)],
    )
    batch = batch_graphs([graph])

    timings = []
    forwards_per_pass = []
    for _ in range(args.repeat):
        before = model.forward_count
        started = time.perf_counter()
        logits, _ = model.forward(batch)
        timings.append((time.perf_counter() - started) * 1e3)
        forwards_per_pass.append(model.forward_count - before)
    assert logits.shape == (args.nodes + 1, 2)

    timings_arr = np.asarray(timings)
    report = {
        "nodes": args.nodes,
        "repeat": args.repeat,
        "forwards_per_pass": sorted(set(forwards_per_pass)),
        "single_pass": forwards_per_pass == [1] * args.repeat,
        "min_ms": float(timings_arr.min()),
        "median_ms": float(np.median(timings_arr)),
        "p95_ms": float(np.percentile(timings_arr, 95)),
    }
    print(json.dumps(report))
    return 0


def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(
        n_train=args.train,
        n_dev=args.dev,
        n_test=args.test,
        sources_per_question=args.sources,
        positives_per_question=args.positives,
        noise_scale=args.noise,
        seed=args.seed,
    )
    paths = data.generate_synthetic(spec, args.out)
    print(
        json.dumps(
            {
                "manifest": str(paths.manifest),
                "stores": [str(p) for p in paths.stores],
                "questions": spec.n_questions,
            }
        )
    )
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(data.manifest_schema(), indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmgr",
        description="Graph-convolution engine for multimodal multihop source retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--manifest", required=True, type=Path, help="JSON Lines manifest path")
        p.add_argument(
            "--stores", required=True, type=Path, nargs="+", help="MMQF feature store paths"
        )

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    add_data_flags(p)
    p.add_argument("--topology", choices=[t.value for t in Topology], default="star",
                   help="graph construction (default: star)")
    p.add_argument("--gated", action="store_true", help="use edge-gated convolutions")
    p.add_argument("--epochs", type=int, default=200, help="training epochs (default: 200)")
    p.add_argument("--batch", type=int, default=32, help="graphs per batch (default: 32)")
    p.add_argument("--lr", type=float, default=2e-5, help="base learning rate (default: 2e-5)")
    p.add_argument("--lr-step", type=int, default=10,
                   help="epochs between 0.9x lr decays (default: 10)")
    p.add_argument("--w-pos", type=float, default=10.0,
                   help="positive class weight (default: 10)")
    p.add_argument("--seed", type=int, default=0, help="seed for init and shuffling (default: 0)")
    p.add_argument("--early-stop-f1", type=float, default=None,
                   help="stop once dev F1 reaches this value (default: off)")
    p.add_argument("--out", required=True, type=Path, help="checkpoint output path")
    p.add_argument("--log", required=True, type=Path, help="JSON Lines epoch log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    add_data_flags(p)
    p.add_argument("--model", required=True, type=Path, help="checkpoint path")
    p.add_argument("--split", choices=list(data.SPLITS), default="test",
                   help="split to evaluate (default: test)")
    p.add_argument("--report", type=Path, default=None, help="write the JSON report here")
    p.add_argument("--macro", action="store_true",
                   help="also report per-question macro averages")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="emit per-source probabilities and the positive set")
    add_data_flags(p)
    p.add_argument("--model", required=True, type=Path, help="checkpoint path")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--qid", default=None, help="predict a single question id")
    group.add_argument("--split", choices=list(data.SPLITS), default=None,
                       help="predict every question in a split")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="time one-pass scoring of N sources in a star graph")
    p.add_argument("--nodes", type=int, default=50, help="source count (default: 50)")
    p.add_argument("--repeat", type=int, default=10, help="timed repetitions (default: 10)")
    p.add_argument("--model", type=Path, default=None,
                   help="checkpoint to benchmark (default: fresh star model)")
    p.add_argument("--gated", action="store_true",
                   help="gated convolutions for the fresh model")
    p.add_argument("--seed", type=int, default=0, help="seed for the fresh model and features")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--train", type=int, default=200, help="train questions (default: 200)")
    p.add_argument("--dev", type=int, default=50, help="dev questions (default: 50)")
    p.add_argument("--test", type=int, default=50, help="test questions (default: 50)")
    p.add_argument("--sources", type=int, default=10, help="sources per question (default: 10)")
    p.add_argument("--positives", type=int, default=2,
                   help="positive sources per question (default: 2)")
    p.add_argument("--noise", type=float, default=0.1, help="noise scale (default: 0.1)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("schema", help="print the manifest JSON schema")
    p.set_defaults(func=cmd_schema)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return args.func(args)
    except MmgrError as exc:
        print(json.dumps({"code": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(json.dumps({"code": "not_found", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(json.dumps({"code": "internal", "message": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
