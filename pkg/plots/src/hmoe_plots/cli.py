"""Command line: ``hmoe-plots render <telemetry dir> <out dir>``."""

from __future__ import annotations

import argparse
import sys

from .render import render_figures
from .schema import SchemaError


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="hmoe-plots", description="Render figures from exported telemetry")
    sub = parser.add_subparsers(dest="command", required=True)
    p_render = sub.add_parser("render", help="render all figure kinds")
    p_render.add_argument("telemetry_dir")
    p_render.add_argument("out_dir")
    try:
        args = parser.parse_args(argv)
        specs = render_figures(args.telemetry_dir, args.out_dir)
        for spec in specs:
            print(f"wrote {spec.output_path}")
        return 0
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
