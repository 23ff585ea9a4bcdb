"""``dsgdlab`` command line: run, describe, list and check experiments.

Exit codes: 0 success, 1 validation (including usage errors and failed
checks), 2 divergence, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..errors import DsgdLabError
from .runner import all_checks, describe_derived, run_experiment
from .shipped import list_experiments, load_experiment

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsgdlab", description="Decentralized SGD transient-time experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(p):
        p.add_argument("--out", help="output root directory (overrides config output)")
        p.add_argument("--seeds", type=_positive_int, help="number of seeds")
        p.add_argument("--threads", type=_positive_int, help="worker threads")
        p.add_argument("--stride", type=_positive_int, help="record every k-th iteration")

    p_run = sub.add_parser("run", help="run an experiment and write its artifacts")
    p_run.add_argument("config", help="path to a TOML config or a shipped experiment name")
    overrides(p_run)
    p_desc = sub.add_parser("describe", help="print the resolved config and derived quantities")
    p_desc.add_argument("config", help="path to a TOML config or a shipped experiment name")
    overrides(p_desc)
    sub.add_parser("list", help="list shipped experiments")
    p_check = sub.add_parser("check", help="run the lemma-inequality suite")
    p_check.add_argument("config", nargs="?", default="lemma_checks", help="lemma config (default: lemma_checks)")
    overrides(p_check)
    return parser


def _load(args):
    cfg = load_experiment(args.config)
    return cfg.with_overrides(seeds=args.seeds, threads=args.threads, stride=args.stride, output=args.out)


def _cmd_run(args) -> int:
    cfg = _load(args)
    res = run_experiment(cfg)
    print(f"wrote {res.out_dir}")
    for name, ok in all_checks(res.summary).items():
        print(f"  {name}: {'pass' if ok else 'FAIL'}")
    return EXIT_OK


def _cmd_describe(args) -> int:
    cfg = _load(args)
    sys.stdout.write(f"# config hash: {cfg.hash()}\n")
    for line in describe_derived(cfg):
        sys.stdout.write(f"# {line}\n")
    sys.stdout.write(cfg.to_toml())
    return EXIT_OK


def _cmd_list(args) -> int:
    for name, desc in list_experiments():
        print(f"{name:<20} {desc}")
    return EXIT_OK


def _cmd_check(args) -> int:
    cfg = _load(args)
    if cfg.experiment != "lemmas":
        raise DsgdLabError(f"check needs a lemmas experiment, {cfg.name!r} is {cfg.experiment!r}")
    res = run_experiment(cfg)
    lem = res.summary["lemmas"]
    ok = True
    for key in ("consensus", "td_one_step"):
        part = lem[key]
        ok &= part["passed"]
        print(f"{part['name']}: {part['fraction']:.4f} of {part['checked']} steps hold "
              f"(need {lem['required_fraction']}) {'pass' if part['passed'] else 'FAIL'}")
    print(json.dumps({"out": str(res.out_dir)}))
    return EXIT_OK if ok else EXIT_VALIDATION


_COMMANDS = {"run": _cmd_run, "describe": _cmd_describe, "list": _cmd_list, "check": _cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DsgdLabError as exc:
        print(f"dsgdlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dsgdlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
