"""weight-export command line: checkpoint conversion or tiny test weights."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, export, make_tiny
from .vggw1 import FormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weight-export",
        description="Convert a VGG19 checkpoint to the VGGW1 weight container",
    )
    parser.add_argument("--source", help="checkpoint (.npz, or .pth/.pt with torch)")
    parser.add_argument("--out", required=True, help="output VGGW1 path")
    parser.add_argument("--tiny", action="store_true",
                        help="emit seeded random weights at 1/8 width instead "
                             "of converting a checkpoint")
    parser.add_argument("--seed", type=int, default=0, help="seed for --tiny")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.tiny:
            make_tiny(args.out, seed=args.seed)
            print(f"wrote tiny random weights (seed {args.seed}) to {args.out}")
        else:
            if not args.source:
                raise ExportError("--source is required unless --tiny is given")
            export(args.source, args.out, verbose=True)
            print(f"wrote {args.out}")
    except (ExportError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
