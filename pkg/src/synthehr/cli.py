"""Command-line entry point: ``synthehr run|report|validate|gen|simulate``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .schema import SchemaError, load_schema, parse_row, write_table


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    remote = {k: getattr(args, k) for k in ("endpoint", "model", "temperature", "cache_dir")
              if getattr(args, k, None) is not None}
    if remote:
        cfg = replace(cfg, remote=replace(cfg.remote, **remote))
    if getattr(args, "backend", None):
        cfg = replace(cfg, arms=tuple(replace(a, backend=args.backend) for a in cfg.arms))
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _output(args, cfg) -> Path:
    return Path(args.output) if args.output else cfg.resolve(cfg.output_dir)


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _output(args, cfg)
    result = harness.run(cfg, out)
    print(f"{len(result.cells)} cells: {len(result.computed)} computed, {len(result.skipped)} reused, "
          f"{len(result.failed)} failed")
    for cid in result.failed:
        print(f"  failed {cid}: {result.results[cid]['error']}", file=sys.stderr)
    report = harness.emit_report(out)
    print(f"master table: {result.master_csv}")
    print(f"report: {report.files[0]}")
    return report.exit_code


def cmd_report(args) -> int:
    out = Path(args.output_dir)
    if not (out / "master.csv").exists():
        print(f"{out}: no master.csv (has the run started?)", file=sys.stderr)
        return 2
    report = harness.emit_report(out)
    print(report.markdown, end="")
    return report.exit_code


def cmd_validate(args) -> int:
    try:
        schema = load_schema(args.schema)
    except (OSError, SchemaError) as exc:
        print(f"schema: {exc}", file=sys.stderr)
        return 2
    with open(args.csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        missing = [n for n in schema.names if n not in header]
        extra = [h for h in header if h not in schema]
        if missing or extra:
            print(f"header mismatch: missing {missing}, unexpected {extra}")
            return 1
        n_rows = n_bad = 0
        for lineno, cells in enumerate(reader, start=2):
            n_rows += 1
            if len(cells) != len(header):
                n_bad += 1
                print(f"line {lineno}: {len(cells)} cells, expected {len(header)}")
                continue
            _, problems = parse_row(schema, dict(zip(header, cells)))
            if problems:
                n_bad += 1
                for p in problems:
                    print(f"line {lineno}, column {p.feature}: {p.code} ({p.detail!r})")
    print(f"{n_rows} rows checked, {n_bad} invalid")
    return 1 if n_bad else 0


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _output(args, cfg)
    cells = {c.cell_id: c for c in harness.plan_cells(cfg)}
    if args.cell not in cells:
        print(f"unknown cell {args.cell!r}; cells in this config:", file=sys.stderr)
        for cid in cells:
            print(f"  {cid}", file=sys.stderr)
        return 2
    ctx = harness.prepare_context(cfg)
    cell_dir = out / "generated" / args.cell
    try:
        table, log, _ = harness.generate_cell(cells[args.cell], cfg, ctx, cell_dir)
    except RuntimeError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(f"{table.n_rows} rows ({log.n_rejected} rejected) -> {cell_dir / 'synthetic.csv'}")
    return 0


def cmd_cells(args) -> int:
    cfg = _config(args)
    for c in harness.plan_cells(cfg):
        print(f"{c.cell_id}\t{c.arm}\t{c.strategy}\t{c.n_features}\t{c.n_samples}\t{c.backend}")
    return 0


def cmd_simulate(args) -> int:
    from .simulate import simulate_cohort
    from .schema import write_schema
    table = simulate_cohort(args.rows, seed=args.seed)
    write_table(args.csv, table)
    if args.schema:
        write_schema(args.schema, table.schema)
    print(f"{table.n_rows} rows -> {args.csv}")
    return 0


def _remote_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=harness.BACKENDS, help="override every arm's backend")
    p.add_argument("--endpoint", help="base URL of an OpenAI-compatible API")
    p.add_argument("--model", help="model name sent to the remote endpoint")
    p.add_argument("--temperature", type=float)
    p.add_argument("--cache-dir", dest="cache_dir", help="response cache directory")
    p.add_argument("--output", help="output directory (default: the config's output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthehr", description="Synthetic EHR generation and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run (or resume) an experiment sweep")
    p.add_argument("config", help="JSON config path, or a built-in name: " + ", ".join(harness.BUILTIN_CONFIGS))
    p.add_argument("--workers", type=int, help="parallel cell workers")
    _remote_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="emit markdown tables and plot data for a run directory")
    p.add_argument("output_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check every row of a CSV against a schema")
    p.add_argument("schema")
    p.add_argument("csv")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen", help="generate the synthetic table of one cell only")
    p.add_argument("config")
    p.add_argument("--cell", required=True, help="cell id (see the 'cells' command)")
    _remote_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("cells", help="list the cell ids a config expands to")
    p.add_argument("config")
    p.set_defaults(func=cmd_cells)

    p = sub.add_parser("simulate", help="write a simulated ICU cohort as CSV")
    p.add_argument("csv")
    p.add_argument("--rows", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema", help="also write the cohort's schema descriptor here")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (harness.ConfigError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
