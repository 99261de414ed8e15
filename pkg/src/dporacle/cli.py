"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .core import SplittableRng
from .harness import (ConfigError, ExperimentConfig, build_instance, emit_report, load_config,
                      read_rows, records_csv, run_experiment, scatter_svg, sweep)
from .instances import save_instance
from .privacy import PrivacyError, evaluate_chain, format_budget


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dporacle", description="oracle-complexity experiments for private "
                                             "convex optimization")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, default=None)
        sp.add_argument("--parallel", type=int, default=1)
        sp.add_argument("--no-timing", action="store_true",
                        help="write wall_ms = 0 so output is bit-reproducible")

    common(sub.add_parser("gen-instance", help="sample an instance and write it to --out"))
    common(sub.add_parser("run", help="run all trials of one config"))
    common(sub.add_parser("sweep", help="run a [sweep] grid, resuming from --out"))
    sp = sub.add_parser("account", help="evaluate a privacy accounting chain")
    sp.add_argument("chain", nargs="?", type=Path, help="chain file ('-' for stdin)")
    sp.add_argument("--config", type=Path, default=None)
    sp = sub.add_parser("report", help="CSV -> SVG scatter of calls vs the swept parameter")
    sp.add_argument("csv", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--x", default=None, help="x column (default: the one that varies)")
    return p


def _load(args) -> tuple[ExperimentConfig, object]:
    cfg, grid = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_override("run.seed", args.seed).validate()
    if args.parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    return cfg, grid


def _cmd_gen_instance(args) -> int:
    cfg, _ = _load(args)
    if args.out is None:
        raise ConfigError("gen-instance needs --out")
    inst = build_instance(dataclasses.replace(cfg, instance=dataclasses.replace(
        cfg.instance, file="")), SplittableRng(cfg.run.seed).child("instance"))
    save_instance(inst, args.out)
    print(f"wrote {type(inst).__name__} d={inst.d} n={inst.n} to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg, _ = _load(args)
    recs = run_experiment(cfg, args.parallel, timing=False if args.no_timing else None)
    text = records_csv(recs)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    failed = sum(1 for r in recs if r.error)
    if failed:
        print(f"{failed} of {len(recs)} trials failed", file=sys.stderr)
    return 0


def _cmd_sweep(args) -> int:
    cfg, grid = _load(args)
    if grid is None:
        raise ConfigError("config has no [sweep] section")
    if args.out is None:
        raise ConfigError("sweep needs --out")
    sweep(grid, cfg, args.out, args.parallel, timing=False if args.no_timing else None)
    print(f"wrote {args.out}")
    return 0


def _cmd_account(args) -> int:
    src = args.chain or args.config
    if src is None:
        raise ConfigError("account needs a chain file")
    try:
        text = sys.stdin.read() if str(src) == "-" else Path(src).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read chain: {exc}") from exc
    try:
        budget = evaluate_chain(text)
    except PrivacyError as exc:
        raise ConfigError(str(exc)) from exc
    print(format_budget(budget))
    return 0


def _cmd_report(args) -> int:
    try:
        rows = read_rows(args.csv)
    except (OSError, KeyError) as exc:
        raise ConfigError(f"cannot read {args.csv}: {exc}") from exc
    if not rows:
        raise ConfigError("no records to report")
    if args.out.suffix == ".csv":
        emit_report(rows, "csv", args.out)
    else:
        args.out.write_text(scatter_svg(rows, args.x)[0])
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {"gen-instance": _cmd_gen_instance, "run": _cmd_run, "sweep": _cmd_sweep,
             "account": _cmd_account, "report": _cmd_report}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
