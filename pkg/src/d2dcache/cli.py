"""Command-line entry point: ``d2dcache list | show | run | validate``."""

import argparse
import logging
import os
import sys
from pathlib import Path

from d2dcache import config as cfgmod
from d2dcache import experiments

OUTPUT_DIR_ENV = "D2DCACHE_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("d2dcache")


def _parser():
    p = argparse.ArgumentParser(prog="d2dcache",
                                description="Delay-aware D2D caching experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list registered scenarios")

    show = sub.add_parser("show", help="print a scenario's default config as YAML")
    show.add_argument("scenario")

    run = sub.add_parser("run", help="run a scenario and write CSV plus figure")
    run.add_argument("scenario")
    run.add_argument("--config", help="YAML config to start from instead of the defaults")
    run.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config entry (dotted keys allowed)")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--out", help=f"CSV path (default: ${OUTPUT_DIR_ENV}/<scenario>.csv)")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for replicates")
    run.add_argument("--no-plot", action="store_true", help="skip the figure")
    run.add_argument("-q", "--quiet", action="store_true")

    val = sub.add_parser("validate", help="check a YAML config file")
    val.add_argument("config")
    return p


def _resolve(args):
    if args.config:
        cfg = cfgmod.load(args.config)
        if cfg.scenario != args.scenario:
            raise cfgmod.ConfigError(
                f"config is for scenario {cfg.scenario!r}, not {args.scenario!r}")
    else:
        cfg = experiments.default_config(args.scenario)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    if args.jobs < 1:
        raise cfgmod.ConfigError("--jobs must be at least 1")
    return cfg


def _out_path(args, cfg):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_DIR_ENV, "results")) / f"{cfg.scenario}.csv"


def _run(args):
    cfg = _resolve(args)
    out = _out_path(args, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    log.info("running %s (seed %d, %d replicate(s))", cfg.scenario, cfg.seed, cfg.replicates)
    table = experiments.run_scenario(cfg, jobs=args.jobs)
    experiments.emit_csv(table, out)
    out.with_suffix(".yaml").write_text(cfg.dump(), encoding="utf-8")
    print(out)
    if not args.no_plot:
        from d2dcache.plotting import plot_table

        fig = plot_table(table, out.with_suffix(".png"), title=cfg.scenario)
        if fig:
            print(fig)
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list":
            for s in experiments.registered_scenarios():
                print(f"{s.name:28s} {s.description}")
            return EXIT_OK
        if args.command == "show":
            print(experiments.default_config(args.scenario).dump(), end="")
            return EXIT_OK
        if args.command == "validate":
            cfg = cfgmod.load(args.config)
            print(f"ok: {cfg.scenario}")
            return EXIT_OK
        return _run(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any failure while running is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
