"""``faud-adapter``: expose one model on stdin/stdout.

Examples::

    faud-adapter --model constant:5
    faud-adapter --model linear:16:seed=3
    faud-adapter --model checkpoint:runs/train/cnn_cbam_s0.fckpt
    faud-adapter --model pyfunc:mypkg.scoring:predict --n-classes 4

stdout carries protocol frames only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys

from .models import ModelSpecError, resolve_model
from .server import AdapterSession


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faud-adapter",
        description="Serve a classifier over the faud-bb JSON-lines protocol.",
    )
    parser.add_argument(
        "--model",
        required=True,
        help="model spec: constant:<k> | linear:<size>[:seed=<s>] | "
        "checkpoint:<path> | pyfunc:<module>:<attr>",
    )
    parser.add_argument(
        "--n-classes",
        type=int,
        default=None,
        help="class count for pyfunc models without an n_classes attribute",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        predict, n_classes = resolve_model(args.model, args.n_classes)
    except ModelSpecError as exc:
        print(f"faud-adapter: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"faud-adapter: {exc}", file=sys.stderr)
        return 2
    AdapterSession(predict, n_classes).run()
    return 0


if __name__ == "__main__":
    sys.exit(main())
