"""Command-line front end for the whole workflow.

Verbs: gen-data, pretrain-teacher, serve-sentinel, run, eval, sweep. Every
verb takes --config (flat JSON) plus repeatable --set key=value overrides;
flags win over the file. Exit codes: 0 success, 2 bad config, 3 protocol
failure, 4 feedback budget exhausted. Set SENTINELZSL_LOG=DEBUG (or any
logging level name) for more chatter on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import datasets, evaluation, pipeline, protocol, sentinel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_BUDGET = 4

logger = logging.getLogger(__name__)


def _setup_logging() -> None:
    level_name = os.environ.get("SENTINELZSL_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> config_mod.RunConfig:
    document = {}
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            document = json.load(fh)
        if not isinstance(document, dict):
            raise sentinel.ConfigError("config document must be a JSON object")
    for item in args.set or []:
        key, value = config_mod.parse_override(item)
        document[key] = value
    return config_mod.from_dict(document)


def _emit(document: dict) -> None:
    json.dump(document, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_gen_data(args) -> int:
    """Write the three-file CSV dataset for the configured synthetic spec."""
    cfg = _load_config(args)
    dataset = pipeline.build_dataset(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in
             ("features.csv", "labels.csv", "semantics.csv")]
    clashes = [str(p) for p in paths if p.exists()]
    if clashes and not args.force:
        raise sentinel.ConfigError(
            f"refusing to overwrite {', '.join(clashes)}; pass --force")
    datasets.export_csv(dataset, *paths)
    _emit({"written": [str(p) for p in paths],
           "rows": int(len(dataset.labels)),
           "classes": int(dataset.num_classes)})
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    """Train and save the data-owner's teacher model."""
    cfg = _load_config(args)
    dataset = pipeline.build_dataset(cfg)
    teacher, log = pipeline.build_teacher(cfg, dataset)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_model(out / "teacher.json", teacher, "teacher",
                        teacher_mode=cfg.teacher_mode)
    with open(out / "teacher_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry) + "\n")
    summary = {
        "model": str(out / "teacher.json"),
        "train_accuracy": 100.0 * log[-1]["accuracy"],
        "eval": evaluation.evaluate_teacher(teacher, dataset,
                                            cfg.teacher_mode),
    }
    if cfg.dp_enabled:
        summary["epsilon"] = log[-1]["epsilon"]
    _emit(summary)
    return EXIT_OK


def cmd_serve_sentinel(args) -> int:
    """Serve one protocol session over TCP.

    Rebuilds the dataset and teacher from the config (deterministic), then
    announces {"event": "listening", "port": N} on stdout so a parent
    process can connect.
    """
    cfg = _load_config(args)
    dataset = pipeline.build_dataset(cfg)
    teacher, _ = pipeline.build_teacher(cfg, dataset)
    server = pipeline.make_server(cfg, dataset, teacher)

    def announce(port: int) -> None:
        print(json.dumps({"event": "listening", "port": port}), flush=True)

    protocol.serve_forever_tcp(server, host=cfg.host, port=cfg.port,
                               on_listening=announce)
    return EXIT_OK


def cmd_run(args) -> int:
    """Full two-party run; writes artifacts and prints the report."""
    cfg = _load_config(args)
    report = pipeline.run_experiment(cfg)
    _emit(report)
    if report["aborted"]:
        logger.warning("session ran out of feedback budget; report is partial")
        return EXIT_BUDGET
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate a saved model file against the configured dataset."""
    cfg = _load_config(args)
    _emit(pipeline.evaluate_artifact(cfg, args.model))
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise sentinel.ConfigError(f"bad sweep values {text!r}") from None
    if not values:
        raise sentinel.ConfigError("sweep needs at least one value")
    return values


def cmd_sweep(args) -> int:
    """Seed-averaged metric table along one axis, as CSV."""
    cfg = _load_config(args)
    values: list = _parse_values(args.values)
    if args.axis == "noise_dim":
        values = [int(v) for v in values]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    rows = pipeline.run_sweep(cfg, args.axis, values, seeds)
    sinks = [sys.stdout]
    if args.out:
        sinks.append(open(args.out, "w", encoding="utf-8", newline=""))
    try:
        for sink in sinks:
            writer = csv.DictWriter(sink, fieldnames=list(rows[0].keys()),
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    finally:
        for sink in sinks[1:]:
            sink.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sentinelzsl",
        description="Two-party zero-shot learning behind a sentinel gate.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("gen-data", help="write the synthetic dataset as CSV")
    common(p)
    p.add_argument("--force", action="store_true",
                   help="overwrite existing dataset files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="train and save the teacher")
    common(p)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("serve-sentinel",
                       help="serve one feedback session over TCP")
    common(p)
    p.set_defaults(func=cmd_serve_sentinel)

    p = sub.add_parser("run", help="full two-party training run")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a saved model file")
    common(p)
    p.add_argument("--model", required=True, help="saved model JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metric table along one axis (CSV)")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=sorted(pipeline.SWEEP_AXES))
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated seeds to average over")
    p.add_argument("--out", help="also write the CSV table to this file")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (sentinel.ConfigError, datasets.DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except protocol.BudgetExceededError as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except protocol.ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
