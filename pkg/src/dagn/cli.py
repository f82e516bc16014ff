"""Command-line entry point.

    dagn train-encoders --config run.ini
    dagn train-dagn --config run.ini --encoders runs/encoders.ckpt
    dagn restore --checkpoint runs/dagn.ckpt photo.jpg --out-dir restored
    dagn evaluate --model identity --eval-dir LIVE1 --qf 10 20 30 40
    dagn sweep-lambda --config run.ini --grid 0.1 1 10
    dagn ablate --config run.ini

Exit status: 0 success, 2 invalid configuration or input, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import COMMANDS, load_run_config
from .errors import DagnError, ManifestMismatch, ValidationError

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagn", description="JPEG artifacts reduction with decoupled guidance")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [common] and [%s] sections" % name)
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--qf", type=int, nargs="+")
        p.add_argument("--variant", choices=["baseline", "cigm", "csgm", "cfm", "full"])
        p.add_argument("--width-scale", dest="width_scale", help="channel multiplier, e.g. 1/8")
        p.add_argument("--train-dir", dest="train_dir")
        p.add_argument("--eval-dir", dest="eval_dir")
        if name == "train-dagn":
            p.add_argument("--encoders", help="stage-one checkpoint")
        if name == "restore":
            p.add_argument("--checkpoint")
            p.add_argument("inputs", nargs="+", help="image files or folders")
        if name == "evaluate":
            p.add_argument("--model", help="'identity' or a stage-two checkpoint")
        if name == "sweep-lambda":
            p.add_argument("--grid", type=float, nargs="+")
            p.add_argument("--target", dest="sweep_target", choices=["ci", "cs", "both"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        rc = load_run_config(args.command, args.config, overrides)
    except (ValidationError, ManifestMismatch, FileNotFoundError) as exc:
        print(f"dagn {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    from .reporting import RUNNERS

    try:
        RUNNERS[args.command](rc)
    except (ValidationError, ManifestMismatch) as exc:
        print(f"dagn {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DagnError, OSError, RuntimeError) as exc:
        print(f"dagn {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
