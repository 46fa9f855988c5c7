"""Command-line entry points for the experiment pipeline.

Subcommands run the pipeline stages in order:

    lenctl synth_data       --config cfg.ini --out runs/a
    lenctl train_extractor  --config cfg.ini --out runs/a
    lenctl train_reward     --config cfg.ini --out runs/a   (trained reward only)
    lenctl sft              --config cfg.ini --out runs/a
    lenctl rl               --config cfg.ini --out runs/a
    lenctl eval             --config cfg.ini --out runs/a
    lenctl filter_eval      --config cfg.ini --out runs/a
    lenctl report           --out runs/a
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import ExperimentConfig, load_config
from .ppo import ConfigError


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="INI config file (defaults apply if omitted)")
    sub.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    sub.add_argument("--out", default="out", help="output directory for artifacts and metrics")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lenctl", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = p.add_subparsers(dest="command", required=True)
    for name in ("synth_data", "train_extractor", "train_reward", "sft", "rl",
                 "eval", "filter_eval", "report"):
        sub = subs.add_parser(name)
        _add_common(sub)
        if name in ("eval", "filter_eval"):
            sub.add_argument("--checkpoint", default=None, help="explicit policy checkpoint path")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.corpus.seed = args.seed + 11
        cfg.policy.seed = args.seed
        cfg.sft.seed = args.seed + 1
        cfg.ppo.seed = args.seed + 2
        cfg.extractor.seed = args.seed + 3
        cfg.reward_model.seed = args.seed + 4
        cfg.critic.seed = args.seed + 5
        cfg.eval_seed = args.seed + 99
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            text, curves = harness.report(args.out)
            print(text)
            for name, path in curves.items():
                print(f"{name}: {path}")
            return 0
        cfg = _load(args)
        if args.command == "synth_data":
            summary = harness.stage_synth_data(cfg, args.out)
        elif args.command == "train_extractor":
            summary = harness.stage_train_extractor(cfg, args.out)
        elif args.command == "train_reward":
            summary = harness.stage_train_reward(cfg, args.out)
        elif args.command == "sft":
            summary = harness.stage_sft(cfg, args.out)
        elif args.command == "rl":
            summary = harness.stage_rl(cfg, args.out)
        elif args.command == "eval":
            summary = harness.stage_eval(cfg, args.out, args.checkpoint)
        elif args.command == "filter_eval":
            summary = harness.stage_filter_eval(cfg, args.out, args.checkpoint)
        else:  # pragma: no cover
            raise AssertionError(args.command)
        print(json.dumps(summary, sort_keys=True))
        return 0
    except harness.DependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
