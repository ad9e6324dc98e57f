"""Command line entry point: ``osslab run|compare|ablate|gen-data``."""
from __future__ import annotations

import argparse
import logging
import sys

from .data import ConfigError, FormatError
from .harness import ExperimentConfig, HarnessError, ablation_suite, compare, gen_data, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osslab", description="Open-set semi-supervised experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed of a config")
    run.add_argument("config")
    run.add_argument("--seed-override", type=int)
    ev = run.add_mutually_exclusive_group()
    ev.add_argument("--eval-teacher", dest="eval_model", action="store_const", const="teacher")
    ev.add_argument("--eval-student", dest="eval_model", action="store_const", const="student")
    run.add_argument("--resume", metavar="CHECKPOINT")

    cmp = sub.add_parser("compare", help="tabulate finished runs")
    cmp.add_argument("dirs", nargs="+")
    cmp.add_argument("--out", help="also write the table as CSV")

    abl = sub.add_parser("ablate", help="run the five ablation variants of a scomatch config")
    abl.add_argument("config")
    abl.add_argument("--seed-override", type=int)
    ev = abl.add_mutually_exclusive_group()
    ev.add_argument("--eval-teacher", dest="eval_model", action="store_const", const="teacher")
    ev.add_argument("--eval-student", dest="eval_model", action="store_const", const="student")

    gen = sub.add_parser("gen-data", help="write a config's data split as CSV")
    gen.add_argument("spec")
    gen.add_argument("out")
    gen.add_argument("--seed-override", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
            summary = run_experiment(cfg, args.seed_override, args.eval_model, args.resume)
            for k, v in summary["final"].items():
                print(f"{k}: {v['mean']:.4f} ± {v['std']:.4f}")
        elif args.command == "compare":
            print(compare(args.dirs, args.out))
        elif args.command == "ablate":
            cfg = ExperimentConfig.load(args.config)
            changes = {}
            if args.seed_override is not None:
                changes["seeds"] = [args.seed_override]
            if args.eval_model:
                changes["eval_model"] = args.eval_model
            if changes:
                cfg = cfg.with_overrides(**changes)
            _, table = ablation_suite(cfg)
            print(table)
        elif args.command == "gen-data":
            gen_data(args.spec, args.out, args.seed_override)
    except (ConfigError, FormatError, HarnessError, FileNotFoundError) as e:
        print(f"osslab: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # partial logs are already flushed to disk
        logging.getLogger("osslab").exception("run failed")
        print(f"osslab: run failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
