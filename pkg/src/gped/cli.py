"""Command-line entry point: ``gped <stage> --config PATH``."""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ConfigError
from .pipeline import STAGES, Run, StageError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def build_parser():
    p = argparse.ArgumentParser(prog="gped", description="Posterior distillation experiments.")
    p.add_argument("subcommand", choices=("validate",) + STAGES + ("all",))
    p.add_argument("--config", required=True, metavar="PATH", help="TOML experiment configuration")
    p.add_argument("--out", default="out", metavar="DIR", help="output root (default: out)")
    p.add_argument("--seed", type=int, default=None, metavar="U64", help="override run.seed")
    p.add_argument("--workers", type=int, default=1, metavar="N", help="parallel jobs for sweeps and search")
    p.add_argument("--no-timestamp", action="store_true", help="omit generation times from SVG plots")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        manifest = load_config(args.config, args.seed)
    except ConfigError as err:
        for path, rule in err.errors:
            print(f"invalid: {path}: {rule}", file=sys.stderr)
        return EXIT_INVALID
    run = Run(manifest, args.out, workers=args.workers, timestamp=not args.no_timestamp)
    if args.subcommand == "validate":
        path = run.write_manifest()
        print(f"valid; manifest written to {path}")
        return EXIT_OK
    try:
        out = run.run(args.subcommand)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.subcommand} finished; artifacts in {out}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
