"""Command line entry point: ``useradapt <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .harness import ConfigError, ExperimentConfig
from .stream import save_streams

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
ANALYSIS_OF = {"transfer": "transfer", "probe": "probe", "grads": "grads"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="useradapt", description="Online user adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the experiment seed")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        return sp

    common(sub.add_parser("gen", help="generate synthetic streams as JSONL"))
    common(sub.add_parser("pretrain", help="pretrain and save the population model"))
    for name, text in (("adapt", "run online adaptation for the configured methods"),
                       ("transfer", "adapt, then compute the user transfer matrix"),
                       ("probe", "adapt, then linear-probe the adapted feature stages"),
                       ("grads", "adapt, then measure gradient alignment over updates")):
        sp = common(sub.add_parser(name, help=text))
        sp.add_argument("--parallel", type=int, help="worker processes")
        sp.add_argument("--method", action="append", choices=harness.METHODS,
                        help="method to run (repeatable); replaces the configured list")
        sp.add_argument("--grid", action="store_true", help="enable grid search on tuning users")
    rp = sub.add_parser("report", help="re-emit tables from a saved run record")
    rp.add_argument("--out", type=Path, required=True, help="directory holding record.json")
    rp.add_argument("--record", type=Path, help="record file (default: <out>/record.json)")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg.seed = args.seed
        if cfg.data.synthetic is not None:
            cfg.data.synthetic = replace(cfg.data.synthetic, seed=args.seed)
    if getattr(args, "parallel", None) is not None:
        cfg.parallel = args.parallel
    if getattr(args, "method", None):
        cfg.methods = list(dict.fromkeys(args.method))
    if getattr(args, "grid", False):
        cfg.grid_search = True
    extra = ANALYSIS_OF.get(args.command)
    if extra and extra not in cfg.analyses:
        cfg.analyses = [*cfg.analyses, extra]
    return cfg.validate()


def cmd_gen(args) -> None:
    cfg = load_config(args)
    collection, _ = harness.build_collection(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_streams(collection, args.out / "streams.jsonl")
    print(args.out / "streams.jsonl")


def cmd_pretrain(args) -> None:
    cfg = load_config(args)
    collection, _ = harness.build_collection(cfg)
    pop = harness.population_model(cfg, collection)
    path = harness.save_population(pop, args.out)
    print(f"{path}.json {pop.digest()}")


def cmd_adapt(args) -> None:
    cfg = load_config(args)
    record = harness.run_experiment(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    harness.save_record(record, args.out / "record.json")
    for path in harness.emit_reports(record, args.out):
        print(path)


def cmd_report(args) -> None:
    path = args.record or args.out / "record.json"
    try:
        record = harness.load_record(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read run record {path}: {exc}") from None
    for p in harness.emit_reports(record, args.out):
        print(p)


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "transfer": cmd_adapt,
            "probe": cmd_adapt, "grads": cmd_adapt, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past config parsing is a runtime error
        logging.getLogger(__name__).debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
