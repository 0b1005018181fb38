"""Entry point for the ratinglab command line."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from src.config import LabConfig, load_config
from src.errors import LabError, NumericError
from src.harness import (
    cmd_bounds,
    cmd_eval,
    cmd_generate,
    cmd_gradcheck,
    cmd_sweep,
    cmd_train,
    load_plan,
)
from src.logger import setup_logging
from src.oracle import BoundParams
from src.resource_monitor import monitoring
from src.serialization import dumps_json, load_spec
from src.synth_env import CorruptionSpec, RatingMode, RatingModel
from src.trainer import TrainMode

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _add_env_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("environment")
    group.add_argument("--num-prompts", type=int)
    group.add_argument("--num-responses", type=int)
    group.add_argument("--r-max", type=float)
    group.add_argument("--reward-seed", type=int)


def _add_rating_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--rating", choices=[RatingMode.EXACT.value, RatingMode.GAUSSIAN.value], default="EXACT"
    )
    parser.add_argument("--rating-variance", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ratinglab",
        description="Rating-augmented preference alignment on synthetic tabular instances.",
    )
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--config", default="config.yaml", help="YAML or JSON settings file")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="sample an environment and a dataset")
    generate.add_argument("--n", type=int, default=1000)
    _add_rating_options(generate)
    generate.add_argument("--swap-fraction", type=float, default=0.0)
    generate.add_argument("--noise-variance", type=float, default=0.0)
    generate.add_argument("--obs-prob", type=float, default=1.0)
    _add_env_options(generate)

    train = commands.add_parser("train", help="train a policy for one algorithm")
    train.add_argument("--env", required=True, help="environment JSON")
    train.add_argument("--data", help="dataset JSON-lines (EMPIRICAL mode)")
    train.add_argument("--spec", required=True, help="algorithm spec: JSON file or inline object")
    train.add_argument("--mode", choices=[mode.value for mode in TrainMode])
    train.add_argument("--steps", type=int)
    train.add_argument("--lr", type=float, dest="learning_rate")
    train.add_argument("--log-every", type=int)
    train.add_argument("--grad-clip", type=float)
    train.add_argument("--tol", type=float)
    _add_rating_options(train)

    evaluate = commands.add_parser("eval", help="evaluate a saved policy")
    evaluate.add_argument("--env", required=True)
    evaluate.add_argument("--policy", required=True)
    evaluate.add_argument("--spec", required=True)
    evaluate.add_argument("--data")

    sweep = commands.add_parser("sweep", help="run a multi-seed sweep plan")
    sweep.add_argument("--plan", required=True, help="YAML or JSON sweep plan")
    sweep.add_argument("--workers", type=int)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of a loss")
    gradcheck.add_argument("--spec", required=True)
    gradcheck.add_argument("--n", type=int, default=64)
    gradcheck.add_argument("--step", type=float, default=1e-5)
    _add_env_options(gradcheck)

    bounds = commands.add_parser("bounds", help="print rate diagnostics")
    bounds.add_argument("--n", type=int, default=1000)
    bounds.add_argument("--r-max", type=float)
    bounds.add_argument("--err-rating", type=float, required=True)
    bounds.add_argument("--variance", type=float, default=0.01)
    bounds.add_argument("--c-conc", type=float, default=1.0)
    bounds.add_argument("--c-star", type=float)
    bounds.add_argument("--beta", type=float, default=0.1)
    bounds.add_argument("--p-rat", type=float)
    bounds.add_argument("--p-rank", type=float)
    return parser


def _env_overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "num_prompts": args.num_prompts,
        "num_responses": args.num_responses,
        "r_max": args.r_max,
        "reward_seed": args.reward_seed,
    }


def _rating(args: argparse.Namespace) -> RatingModel:
    return RatingModel(RatingMode(args.rating), args.rating_variance)


def run(args: argparse.Namespace, config: LabConfig) -> int:
    out = Path(args.out)
    if args.command == "generate":
        corruption = CorruptionSpec(args.swap_fraction, args.noise_variance, args.obs_prob)
        summary = cmd_generate(
            config.env_spec(**_env_overrides(args)), args.n, _rating(args), corruption, out, args.seed
        )
        print(dumps_json(summary), end="")
        return EXIT_OK

    if args.command == "train":
        cfg = config.train_config(
            seed=args.seed,
            mode=args.mode,
            steps=args.steps,
            learning_rate=args.learning_rate,
            log_every=args.log_every,
            grad_clip=args.grad_clip,
            tol=args.tol,
        )
        summary = cmd_train(args.env, args.data, load_spec(args.spec), cfg, out, _rating(args))
        print(dumps_json(summary), end="")
        return EXIT_OK

    if args.command == "eval":
        print(dumps_json(cmd_eval(args.env, args.policy, load_spec(args.spec), args.data)), end="")
        return EXIT_OK

    if args.command == "sweep":
        plan = load_plan(args.plan, config.environment)
        with monitoring(
            config.monitor_interval,
            log_path=config.resource_log_path,
            summary_path=config.resource_summary_path,
            alert_thresholds=config.resource_alerts,
            alert_cooldown=config.alert_cooldown_seconds,
        ):
            result = cmd_sweep(
                plan,
                config.train_config(seed=args.seed),
                out,
                workers=args.workers or config.workers,
                bound_settings=config.bounds,
                beta1_min=config.beta1_min,
            )
        failures = sum(1 for row in result.rows if not row.ok)
        print(dumps_json({"rows": len(result.rows), "failed": failures, "out": str(out)}), end="")
        return EXIT_OK

    if args.command == "gradcheck":
        report = cmd_gradcheck(
            load_spec(args.spec), config.env_spec(**_env_overrides(args)), args.seed, args.n, args.step
        )
        print(dumps_json(report), end="")
        return EXIT_OK if report["passed"] else EXIT_NUMERIC

    if args.command == "bounds":
        r_max = args.r_max if args.r_max is not None else config.env_spec().r_max
        report = cmd_bounds(
            config.bound_params(args.n, r_max),
            args.err_rating,
            args.variance,
            args.c_conc,
            beta=args.beta,
            beta1_min=config.beta1_min,
            c_star_value=args.c_star,
            p_rat=args.p_rat,
            p_rank=args.p_rank,
        )
        print(dumps_json(report), end="")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command!r}")  # pragma: no cover


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logger = setup_logging(config.log_path, config.log_level)
    logger.debug("Running %s", args.command)
    try:
        return run(args, config)
    except NumericError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LabError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
