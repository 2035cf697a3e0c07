"""Command-line entry point: run experiments, inspect partitions, make data.

Exit codes: 0 success, 2 invalid configuration or malformed file content,
3 I/O failure (missing or unreadable files). Log verbosity comes from the
ISOFED_LOG environment variable (error, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_run_config, write_resolved_config
from .data import DataError, DataIOError, dirichlet_partition, load_mds1, partition_table, save_mds1
from .metrics import CSV_HEADER, MetricsError, evaluate
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .orchestrator import ConfigError, build_context, run_experiment, write_metrics_csv, write_trace
from .synth import make_blob_dataset

log = logging.getLogger("isofed")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _setup_logging():
    level_name = os.environ.get("ISOFED_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: ISOFED_LOG={level_name!r} not in {sorted(levels)}, using error", file=sys.stderr)
        level_name = "error"
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def _load_datasets(run_cfg):
    train = load_mds1(run_cfg.train_path, split="train")
    test = load_mds1(run_cfg.test_path, split="test")
    return train, test


def cmd_run(args) -> int:
    run_cfg = load_run_config(args.config, args.seed, args.threads, args.out)
    out_dir = Path(run_cfg.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"error: output directory {out_dir} is not empty (use --force)", file=sys.stderr)
        return EXIT_CONFIG
    train, test = _load_datasets(run_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)

    state = run_experiment(run_cfg.experiment, train, test)

    write_resolved_config(run_cfg, out_dir / "resolved_config.ini")
    write_metrics_csv(state, out_dir / "metrics.csv")
    write_trace(state, out_dir / "trace.jsonl")
    save_checkpoint(state.w_glob, out_dir / "final.isop")
    final = state.history[-1]
    log.info("run finished: %s", final.csv_row())
    print(f"wrote {out_dir}/metrics.csv trace.jsonl resolved_config.ini final.isop")
    return EXIT_OK


def cmd_partition(args) -> int:
    run_cfg = load_run_config(args.config, args.seed, args.threads, args.out)
    train = load_mds1(run_cfg.train_path, split="train")
    shards = dirichlet_partition(train, run_cfg.experiment.partition)
    table = partition_table(train, shards)

    header = ["client", "role"] + [f"class_{c}" for c in range(train.num_classes)] + ["total"]
    lines = [",".join(header)]
    for shard in shards:
        row = [str(shard.client_id), shard.role.value]
        row += [str(int(n)) for n in table[shard.client_id]]
        row.append(str(int(table[shard.client_id].sum())))
        lines.append(",".join(row))
    text = "\n".join(lines)
    print(text)
    out_dir = Path(run_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "partition.csv").write_text(text + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    dataset = make_blob_dataset(args.classes, args.samples, args.seed)
    out = Path(args.out_path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_mds1(dataset, out)
    counts = np.bincount(dataset.labels, minlength=args.classes)
    print(f"wrote {out}: {len(dataset)} samples, {args.classes} classes, per-class {counts.tolist()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    dataset = load_mds1(args.dataset, split="test")
    head_classes = dict(zip(params.names, params.shapes)).get("head.b", (0,))[0]
    if head_classes != dataset.num_classes:
        print(
            f"error: checkpoint has {head_classes} classes but dataset has {dataset.num_classes}",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    report = evaluate(params, dataset)
    print(CSV_HEADER)
    print(report.csv_row())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isofed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config file (INI)")
        p.add_argument("--out", default=None, help="override [output] dir")
        p.add_argument("--force", action="store_true", help="allow non-empty output dir")
        p.add_argument("--threads", type=int, default=None, help="worker pool cap")
        p.add_argument("--seed", type=int, default=None, help="override experiment seed")

    run_p = sub.add_parser("run", help="execute a federated training experiment")
    common(run_p)
    run_p.set_defaults(fn=cmd_run)

    part_p = sub.add_parser("partition", help="print and save the client partition table")
    common(part_p)
    part_p.set_defaults(fn=cmd_partition)

    synth_p = sub.add_parser("synth", help="generate a synthetic blob dataset (MDS1)")
    synth_p.add_argument("out_path", help="output .mds1 path")
    synth_p.add_argument("--classes", type=int, default=8)
    synth_p.add_argument("--samples", type=int, default=10000)
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.set_defaults(fn=cmd_synth)

    eval_p = sub.add_parser("eval", help="evaluate an ISOP checkpoint on an MDS1 dataset")
    eval_p.add_argument("checkpoint")
    eval_p.add_argument("dataset")
    eval_p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DataIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DataError, CheckpointError, MetricsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
