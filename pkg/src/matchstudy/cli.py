"""Command-line entry point: ``matchstudy <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, fixture_config_path
from .errors import ConfigError, DataError, MatchStudyError, NumericalError
from .pipeline import Pipeline, StudyConfig, config_template, dumps
from .synthetic import SyntheticSpec, generate_synthetic, write_shape_fixture

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OTHER = 0, 2, 3, 4, 1

# subcommand -> (last stage to run, report keys shown, text tables shown)
SUBCOMMANDS = {
    "run": ("sensitivity", ("primary", "secondary", "dose", "sensitivity"),
            ("tables/results.tsv", "tables/sensitivity.tsv")),
    "match": ("matching", ("matching",), ("tables/composition_{}.tsv",)),
    "balance": ("balance", ("balance",), ("tables/balance_{}.tsv",)),
    "test": ("dose", ("primary", "falsification", "secondary", "dose"),
             ("tables/results.tsv",)),
    "sensitivity": ("sensitivity", ("sensitivity",), ("tables/sensitivity.tsv",)),
}


def exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_OTHER


def build_parser():
    parser = argparse.ArgumentParser(
        prog="matchstudy",
        description="Matched-cohort analysis: eligibility, optimal full matching, balance, "
                    "ordered hypothesis tests and sensitivity to hidden bias.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--print-config-template", action="store_true",
                        help="print a configuration with every key at its default and exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command")
    helps = {
        "run": "full pipeline",
        "synth": "write a synthetic cohort and schema",
        "match": "eligibility through Matches 1-4",
        "balance": "matching plus balance tables and Love plots",
        "test": "matching plus primary, secondary and dose tests",
        "sensitivity": "full pipeline, printing the sensitivity table",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON configuration (default: bundled fixture)")
        p.add_argument("--seed", type=int, help="seed for randomized steps")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("json", "text"), default="text")
        if name == "synth":
            p.add_argument("--shape-fixture", action="store_true",
                           help="write the eligibility-shape fixture instead")
    return parser


def _load_config(args):
    path = args.config or fixture_config_path()
    config = StudyConfig.from_json(path)
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_dir = args.out
    return config


def _synth(args):
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out or "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    if args.shape_fixture:
        write_shape_fixture(out, seed)
        paths = [str(out / "wls_shape.csv"), str(out / "wls_shape.schema.json")]
    else:
        raw = {}
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    raw = json.load(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
            if "cohort_path" in raw:
                raw = raw.get("synthetic") or {}
            if args.seed is None and "seed" in raw:
                seed = int(raw.pop("seed"))
        try:
            spec = SyntheticSpec.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from None
        paths = [str(p) for p in generate_synthetic(spec, seed, out / "cohort.csv")]
    if args.format == "json":
        print(json.dumps({"seed": seed, "files": paths}, indent=2))
    else:
        print("\n".join(paths))


def _analysis(args):
    stop, keys, tables = SUBCOMMANDS[args.command]
    config = _load_config(args)
    pipe = Pipeline(config)
    report, manifest = pipe.run(stop_after=stop)
    if args.format == "json":
        print(dumps({k: report[k] for k in keys if k in report}), end="")
        return
    root = Path(config.output_dir)
    for rel in tables:
        for name in ([rel.format(k) for k in config.matches] if "{}" in rel else [rel]):
            path = root / name
            if path.exists():
                print(f"== {name}")
                print(path.read_text(encoding="utf-8"))
    print(f"artifacts: {root} ({len(manifest['files'])} files)")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config_template:
        print(json.dumps(config_template(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "synth":
            _synth(args)
        else:
            _analysis(args)
    except MatchStudyError as exc:
        stage = getattr(exc, "stage", None)
        where = f" in stage '{stage}'" if stage else ""
        print(f"matchstudy: {type(exc).__name__}{where}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
