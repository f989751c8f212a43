"""Command-line pipeline driver: one subcommand per stage.

Exit codes: 0 success, 2 config error, 3 missing stage input,
4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .pipeline import (
    MissingInputError,
    run_all,
    stage_ablate_sff,
    stage_ablate_strategy,
    stage_evaluate,
    stage_gen_bench,
    stage_pseudo_label,
    stage_train_detectors,
    stage_train_downstream,
    stage_train_lat,
    stage_transfer,
)
from .training import NumericalDivergenceError

STAGES = {
    "gen-bench": lambda cfg, args: stage_gen_bench(cfg),
    "train-detectors": lambda cfg, args: stage_train_detectors(cfg),
    "pseudo-label": lambda cfg, args: stage_pseudo_label(cfg),
    "train-lat": lambda cfg, args: stage_train_lat(cfg),
    "transfer": lambda cfg, args: stage_transfer(cfg, dump_attention=args.dump_attention),
    "train-downstream": lambda cfg, args: stage_train_downstream(cfg),
    "evaluate": lambda cfg, args: stage_evaluate(cfg),
    "ablate-sff": lambda cfg, args: stage_ablate_sff(cfg),
    "ablate-strategy": lambda cfg, args: stage_ablate_strategy(cfg),
    "run-all": lambda cfg, args: run_all(cfg, dump_attention=args.dump_attention),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labeltransfer",
        description="Cross-dataset annotation transfer pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="run-config TOML file")
        p.add_argument(
            "--workers", type=int, default=1,
            help="worker count; execution is deterministic and currently sequential",
        )
        if name in ("transfer", "run-all"):
            p.add_argument(
                "--dump-attention", action="store_true",
                help="write per-image attention matrices to a diagnostic file",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if not hasattr(args, "dump_attention"):
        args.dump_attention = False
    try:
        STAGES[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MissingInputError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 3
    except NumericalDivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        tail = e.loss_history[-10:]
        print(f"last losses: {tail}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
