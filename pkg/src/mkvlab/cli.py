"""Command line entry point: ``mkvlab run|preset|schema``."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from pydantic import ValidationError

from . import config as config_mod
from .runner import EXIT_ERROR, execute
from .sim import default_workers


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {path}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def _workers(arg: int | None, cfg) -> int:
    if arg is not None:
        return max(1, arg)
    if cfg.workers is not None:
        return cfg.workers
    return default_workers()


def _execute(cfg, out: str | None, workers: int | None, verbose: bool) -> int:
    out_dir = Path(out or cfg.output_dir or f"mkvlab-out/{cfg.name or cfg.kind}")
    try:
        code = execute(cfg, out_dir, _workers(workers, cfg))
    except Exception as exc:  # noqa: BLE001 - any failure is reported as exit 1
        print(f"error: {exc}", file=sys.stderr)
        if verbose:
            traceback.print_exc()
        return EXIT_ERROR
    report = json.loads((out_dir / "report.json").read_text())
    for name, ok in sorted(report["verdicts"].items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"artifacts in {out_dir}")
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mkvlab", description="McKean-Vlasov particle system laboratory")
    parser.add_argument("-v", "--verbose", action="store_true", help="print tracebacks on errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (overrides output_dir in the config)")
    p_run.add_argument("--workers", type=int, help="worker processes; falls back to MKVLAB_WORKERS")

    p_pre = sub.add_parser("preset", help="run a built-in preset, or list presets when no name is given")
    p_pre.add_argument("name", nargs="?")
    p_pre.add_argument("--out")
    p_pre.add_argument("--seed", type=int, help="master seed override")
    p_pre.add_argument("--workers", type=int)
    p_pre.add_argument("--show", action="store_true", help="print the preset config instead of running it")

    sub.add_parser("schema", help="print the JSON schema of experiment configs")

    args = parser.parse_args(argv)
    if args.command == "schema":
        print(json.dumps(config_mod.schema(), indent=2))
        return 0
    if args.command == "preset":
        if not args.name:
            print("\n".join(config_mod.presets()))
            return 0
        try:
            cfg = config_mod.preset(args.name, master_seed=args.seed)
        except (KeyError, ValidationError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        if args.show:
            print(cfg.model_dump_json(indent=2))
            return 0
        return _execute(cfg, args.out, args.workers, args.verbose)
    try:
        cfg = config_mod.load(args.config)
    except ValidationError as exc:
        print(_format_validation(exc), file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return _execute(cfg, args.out, args.workers, args.verbose)


if __name__ == "__main__":
    sys.exit(main())
