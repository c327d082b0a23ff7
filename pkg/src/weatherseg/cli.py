"""Command-line entry point: ``weatherseg {generate,train,eval,ablate,plot}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import HELP, RunConfig, field_type, load_config
from .errors import ConfigError, WeatherSegError
from .metrics import format_record
from .runner import ABLATION_SUITES, cmd_ablate, cmd_eval, cmd_plot, cmd_train
from .weather import BenchmarkProfile, generate_benchmark

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file; flags override it")
    defaults = RunConfig()
    for f in fields(RunConfig):
        default = getattr(defaults, f.name)
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        flag = "--" + f.name.replace("_", "-")
        help_text = f"{HELP.get(f.name, '')} (default: {default})"
        if field_type(f.name) == "bool":
            parser.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction, help=help_text)
        else:
            parser.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(), help=help_text)


def _run_config(args) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value if isinstance(value, bool) else str(value)
    return load_config(args.config, overrides).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weatherseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write the synthetic weather benchmark")
    gen.add_argument("--root", required=True, help="output directory")
    gen.add_argument("--profile", help="key = value benchmark profile file")
    gen.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="profile override")

    train = sub.add_parser("train", help="train one run per seed")
    _add_run_flags(train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--root", help="dataset root (default: manifest directory)")

    ab = sub.add_parser("ablate", help="run an ablation suite")
    ab.add_argument("--suite", required=True, choices=sorted(ABLATION_SUITES))
    _add_run_flags(ab)

    pl = sub.add_parser("plot", help="re-plot a run or ablation directory")
    pl.add_argument("directory")
    return parser


def _profile(args) -> BenchmarkProfile:
    values = {}
    if args.profile:
        from .sequence import read_key_values

        values.update(read_key_values(Path(args.profile)))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    try:
        return BenchmarkProfile.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid profile: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "generate":
            print(generate_benchmark(args.root, _profile(args)))
        elif args.command == "train":
            print(cmd_train(_run_config(args)))
        elif args.command == "eval":
            print(format_record(cmd_eval(args.checkpoint, args.manifest, args.root)))
        elif args.command == "ablate":
            rows, suite_dir = cmd_ablate(args.suite, _run_config(args))
            print((suite_dir / "table.md").read_text(), end="")
        elif args.command == "plot":
            for path in cmd_plot(args.directory):
                print(path)
    except ConfigError as exc:
        print(f"weatherseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WeatherSegError, OSError, RuntimeError) as exc:
        print(f"weatherseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
