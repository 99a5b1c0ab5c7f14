"""Command-line harness: ``run``, ``cost``, ``sweep``, ``save-cache``, ``load-cache``.

Exit codes: 0 success, 2 bad configuration, 3 I/O failure, 4 malformed cache file.
Relative ``--output`` paths resolve under ``$SPARSEKV_OUTPUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import cost
from .compressor import CorruptCacheError, decompress, measure_size
from .container import ContainerError, load_cache, save_cache
from .pipeline import RunConfig, compress_for_config, report_json, run_pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
OUTPUT_DIR_ENV = "SPARSEKV_OUTPUT_DIR"


def _resolve(path: str | None) -> str | None:
    if path is None or os.path.isabs(path):
        return path
    base = os.environ.get(OUTPUT_DIR_ENV)
    return os.path.join(base, path) if base else path


def _emit(text: str, path: str | None) -> None:
    path = _resolve(path)
    if path is None:
        sys.stdout.write(text + "\n")
        return
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text + "\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if isinstance(default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=default)
        elif f.name == "output":
            p.add_argument(flag, default=None, help="write the result here instead of stdout")
        else:
            p.add_argument(flag, type=type(default), default=default)


def _run_config(args) -> RunConfig:
    cfg = RunConfig(**{f.name: getattr(args, f.name) for f in fields(RunConfig)})
    cfg.validate()
    return cfg


def _cost_params(args) -> cost.CostParams:
    return cost.CostParams(args.seq_len, args.head_dim, args.block_size, args.s_key, args.s_value)


def cmd_run(args) -> int:
    cfg = _run_config(args)
    report = run_pipeline(cfg)
    _emit(report_json(report, include_timings=not args.no_timings), cfg.output)
    return EXIT_OK


def cmd_cost(args) -> int:
    p = _cost_params(args)
    report = cost.cost_report(p)
    report["design_space"] = [
        {"config": r.config, "sparse_operands": list(r.sparse_operands),
         "prefill": r.prefill, "decode": r.decode}
        for r in cost.design_space_table()
    ]
    _emit(json.dumps(report, indent=2, sort_keys=True), args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = cost.CostParams(args.seq_len, args.head_dim, args.block_size)
    rows = cost.sweep(args.step, base)
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) for k, v in r.items()})
        _emit(buf.getvalue().rstrip("\n"), args.output)
    else:
        _emit(json.dumps(rows, indent=2), args.output)
    return EXIT_OK


def cmd_save_cache(args) -> int:
    cfg = _run_config(args)
    c, _ = compress_for_config(cfg, args.cache, args.head)
    path = _resolve(args.path)
    n = save_cache(path, c)
    _emit(json.dumps({"path": path, "bytes": n, "blocks": c.num_blocks,
                      "dense_count": c.dense_count, "sparse_count": c.sparse_count}), None)
    return EXIT_OK


def cmd_load_cache(args) -> int:
    c = load_cache(_resolve(args.path))
    x = decompress(c)
    summary = {
        "axis": c.axis,
        "seq_len": c.seq_len,
        "head_dim": c.head_dim,
        "block_size": c.block_size,
        "blocks": c.num_blocks,
        "dense_count": c.dense_count,
        "sparse_count": c.sparse_count,
        "index_map": c.index_map.tolist(),
        "sizes": measure_size(c).as_dict(),
        "sha256": hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest(),
    }
    _emit(json.dumps(summary, indent=2), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsekv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="prune, compress and attend; report vs the dense oracle")
    _add_run_flags(p)
    p.add_argument("--no-timings", action="store_true", help="omit wall-clock timings")
    p.set_defaults(func=cmd_run)

    for name, helptext in (("cost", "closed-form cost report"), ("sweep", "cost grid over S_K x S_V")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--seq-len", type=int, default=4096)
        p.add_argument("--head-dim", type=int, default=128)
        p.add_argument("--block-size", type=int, default=64)
        p.add_argument("--output", default=None)
        if name == "cost":
            p.add_argument("--s-key", type=float, default=0.0)
            p.add_argument("--s-value", type=float, default=0.0)
            p.set_defaults(func=cmd_cost)
        else:
            p.add_argument("--step", type=float, default=0.25)
            p.add_argument("--csv", action="store_true")
            p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("save-cache", help="compress a synthetic cache and write it to a file")
    p.add_argument("path")
    _add_run_flags(p)
    p.add_argument("--cache", choices=("key", "value"), default="key")
    p.add_argument("--head", type=int, default=0)
    p.set_defaults(func=cmd_save_cache)

    p = sub.add_parser("load-cache", help="validate a cache file and summarize it")
    p.add_argument("path")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_load_cache)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContainerError, CorruptCacheError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
