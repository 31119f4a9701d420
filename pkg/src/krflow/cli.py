"""Command line entry point.

    krflow run <scenario-file> [--out DIR] [--eps-ladder LIST] [--grid-refine K] [--quiet]
    krflow check <trajectory-dir>
    krflow oracle <scenario-file> [--out DIR]
    krflow presets

Exit codes: 0 all checks pass, 2 a check failed, 3 solver failure,
4 input/output problem (unreadable or invalid scenario, unwritable output).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from typing import List, Optional

from . import __version__
from .background import list_presets
from .scenario import (
    EXIT_IO,
    EXIT_OK,
    ScenarioError,
    _as_list,
    check_directory,
    load_scenario,
    run_oracle,
    run_scenario,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are input problems, not check failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the scenario)")
    common.add_argument("--quiet", action="store_true", help="only print the final status line")
    p = _Parser(prog="krflow", description="Radial Kähler-Ricci flow laboratory")
    p.add_argument("--version", action="version", version=f"krflow {__version__}")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    r = sub.add_parser("run", parents=[common], help="run a scenario and check the estimates")
    r.add_argument("scenario")
    r.add_argument("--eps-ladder", metavar="LIST", help="comma separated, strictly decreasing")
    r.add_argument("--grid-refine", metavar="K", type=int, default=0, help="rerun at doubled resolution K times")
    c = sub.add_parser("check", parents=[common], help="re-check trajectories written by run")
    c.add_argument("directory")
    o = sub.add_parser("oracle", parents=[common], help="solve the limit Kähler-Einstein equation")
    o.add_argument("scenario")
    sub.add_parser("presets", parents=[common], help="list the preset registry")
    return p


def _load(path: str, args):
    try:
        cfg = load_scenario(path)
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return None
    except ScenarioError as exc:
        print(f"invalid scenario {path}:", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return None
    if getattr(args, "eps_ladder", None):
        ladder = _as_list(args.eps_ladder)
        if not ladder or any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
            print("--eps-ladder must be positive and strictly decreasing", file=sys.stderr)
            return None
        cfg = replace(cfg, eps_ladder=tuple(ladder))
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "presets":
        print(list_presets())
        return EXIT_OK
    if args.verb == "check":
        res = check_directory(args.directory)
    else:
        cfg = _load(args.scenario, args)
        if cfg is None:
            return EXIT_IO
        if args.verb == "run":
            if args.grid_refine < 0:
                print("--grid-refine must be >= 0", file=sys.stderr)
                return EXIT_IO
            res = run_scenario(cfg, args.out, grid_refine=args.grid_refine, quiet=args.quiet)
        else:
            res = run_oracle(cfg, args.out)
    if res.report is not None and not args.quiet:
        print(res.report.to_text(), end="")
    for f in res.files if not args.quiet else ():
        print(f"wrote {f}")
    stream = sys.stdout if res.exit_code == EXIT_OK else sys.stderr
    print(res.message, file=stream)
    if res.diagnostics and res.exit_code != EXIT_OK:
        for k, v in res.diagnostics.items():
            print(f"  {k}: {v}", file=stream)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
