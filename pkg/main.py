"""
Path of Destruction - level generation by learned iterative repair
-------------------------------------------------------------------
Command-line driver for the whole pipeline:

    python main.py dataset   --game zelda --goals fixtures/zelda5 --count 50000 --seed 7
    python main.py train     --dataset runs/dataset.jsonl --obs 5 --epochs 500 --seed 1
    python main.py generate  --checkpoint runs --trials 10 --seed 3
    python main.py eval      --checkpoints a,b,c --trials 500
    python main.py solve     --game sokoban --level level.txt
    python main.py reproduce obs-sweep --scale desk
    python main.py reproduce obs-sweep --scale paper   # published settings, very slow

A `--config` YAML file sets defaults; explicit flags override it.
Exit codes: 0 success, 1 I/O error, 2 invalid input or configuration.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.models.config import RunConfig, SCALES, write_run_manifest
from src.models.evaluation import evaluate, export_level_vectors
from src.models.experiments import EXPERIMENTS, load_goal_set, run_experiment, write_loss_log
from src.models.games import check_playable, get_game, GAMES
from src.models.generator import RepairNetwork, batch_generate, write_traces
from src.models.neuralnet import (
    CHECKPOINT_MANIFEST, CHECKPOINT_WEIGHTS, checkpoint_extra, load_checkpoint, save_checkpoint, train,
)
from src.models.podgen import Traversal, build_dataset, load_dataset
from src.models.tilemap import parse_level

logger = logging.getLogger("pod")

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def channel_list(text: str) -> List[int]:
    try:
        channels = [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}") from None
    if len(channels) != 3 or min(channels) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive channel counts, got {text!r}")
    return channels


def path_list(text: str) -> List[str]:
    return [part for part in text.split(",") if part]


# flag dest -> RunConfig field, per command; flags left at None keep the config value
OVERRIDES: Dict[str, Dict[str, str]] = {
    "dataset": {"game": "game", "goals": "goals", "goal_limit": "goal_limit", "traversal": "traversal",
                "count": "dataset_size", "seed": "dataset_seed", "stop_hamming": "stop_hamming",
                "stop_histogram": "stop_histogram", "out": "out"},
    "train": {"game": "game", "obs": "obs_size", "epochs": "epochs", "batch": "batch_size",
              "lr": "learning_rate", "channels": "conv_channels", "out": "out"},
    "generate": {"game": "game", "traversal": "traversal", "trials": "trials", "max_passes": "max_passes",
                 "seed": "generation_seed", "out": "out"},
    "eval": {"game": "game", "goals": "goals", "goal_limit": "goal_limit", "traversal": "traversal",
             "trials": "trials", "max_passes": "max_passes", "seed": "generation_seed",
             "threshold": "unique_threshold", "out": "out"},
    "solve": {"game": "game"},
    "reproduce": {"out": "out"},
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides: Dict[str, Any] = {}
    for dest, field_name in OVERRIDES[args.command].items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[field_name] = value
    if args.command == "train" and args.seed is not None:
        overrides["seeds"] = [args.seed]
    return config.with_overrides(**overrides)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_dataset(args: argparse.Namespace, config: RunConfig) -> int:
    game = get_game(config.game)
    goals = load_goal_set(config)
    out_dir = Path(config.out)
    summary = build_dataset(game, goals, config.dataset_config(), out_dir / "dataset.jsonl",
                            show_progress=not args.quiet)
    write_run_manifest(out_dir, [config.save(out_dir / "config.yaml"), summary.path])
    print(f"✅ examples={summary.example_count} trajectories={summary.trajectory_count}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    game = get_game(config.game)
    dataset = load_dataset(args.dataset, game)
    seed = config.seeds[0]

    state, start_epoch = None, 0
    spec = config.network_spec()
    if args.resume:
        state, spec = load_checkpoint(args.resume)
        start_epoch = int(checkpoint_extra(args.resume).get("epochs_trained", 0))
        seed = state.seed
        logger.info("Resuming from %s after %d epochs", args.resume, start_epoch)
    RepairNetwork(state=state, spec=spec).check_game(game)

    result = train(dataset, spec, config.train_config(), seed, state=state,
                   show_progress=not args.quiet, start_epoch=start_epoch)

    out_dir = Path(config.out)
    save_checkpoint(result.state, spec, out_dir, extra={
        "game": game.game_id,
        "epochs_trained": start_epoch + config.epochs,
        "dataset_goal_set_hash": dataset.header.get("goal_set_hash"),
    })
    loss_log = write_loss_log(result.loss_history, out_dir / "loss.csv")
    write_run_manifest(out_dir, [out_dir / CHECKPOINT_MANIFEST, out_dir / CHECKPOINT_WEIGHTS, loss_log])
    print(f"✅ epochs={start_epoch + config.epochs} final_loss={result.loss_history[-1]:.6f}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    game = get_game(config.game)
    network = RepairNetwork.from_checkpoint(args.checkpoint)
    traces = batch_generate(network, game, config.generation_config(), config.trials,
                            workers=args.workers, show_progress=not args.quiet)
    out_dir = Path(config.out)
    path = write_traces(traces, out_dir / "traces.jsonl", game)
    write_run_manifest(out_dir, [path])
    playable = sum(t.playable for t in traces)
    print(f"✅ trials={len(traces)} playable={playable}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    game = get_game(config.game)
    goals = load_goal_set(config)
    networks = [RepairNetwork.from_checkpoint(path) for path in args.checkpoints]
    if not networks:
        raise ValueError("--checkpoints needs at least one checkpoint directory")

    report, traces = evaluate(networks, game, config.generation_config(), config.trials, goals,
                              threshold=config.unique_threshold, workers=args.workers,
                              show_progress=not args.quiet)
    out_dir = Path(config.out)
    produced = [report.write(out_dir / "report.json")]
    if args.vectors:
        playable = [t.final_level for per_network in traces for t in per_network if t.playable]
        produced.append(export_level_vectors(playable, goals, out_dir / args.vectors, game))
    write_run_manifest(out_dir, produced)
    print(
        f"✅ playable={report.playable_pct:.2f}+-{report.playable_pct_std:.2f} "
        f"playable_unique={report.playable_unique_pct:.2f}+-{report.playable_unique_pct_std:.2f} "
        f"duplicates={report.duplicate_pct:.2f}"
    )
    return EXIT_OK


def cmd_solve(args: argparse.Namespace, config: RunConfig) -> int:
    game = get_game(config.game)
    level = parse_level(Path(args.level).read_text(encoding="utf-8"), game.alphabet)
    print(check_playable(game, level))
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace, config: RunConfig) -> int:
    out_dir = Path(config.out) / args.experiment
    reports = run_experiment(args.experiment, out_dir, scale=args.scale, show_progress=not args.quiet,
                             workers=args.workers, base=config)
    print(f"📊 {args.experiment} at {args.scale} scale")
    for name, report in reports.items():
        print(
            f"   {name}: playable={report.playable_pct:.2f}+-{report.playable_pct_std:.2f} "
            f"playable_unique={report.playable_unique_pct:.2f}+-{report.playable_unique_pct_std:.2f} "
            f"duplicates={report.duplicate_pct:.2f}"
        )
    return EXIT_OK


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "solve": cmd_solve,
    "reproduce": cmd_reproduce,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pod", description="Path of Destruction level generator")
    parser.add_argument("--config", help="YAML run configuration; flags override it")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    games = sorted(GAMES)
    traversals = [t.value for t in Traversal]

    p = sub.add_parser("dataset", help="build a training dataset by destroying goal levels")
    p.add_argument("--game", choices=games)
    p.add_argument("--goals", help="directory of goal level .txt files")
    p.add_argument("--goal-limit", type=positive_int, help="use only the first N goal levels")
    p.add_argument("--count", type=positive_int, help="minimum number of examples")
    p.add_argument("--seed", type=int)
    p.add_argument("--traversal", choices=traversals)
    p.add_argument("--stop-hamming", type=float)
    p.add_argument("--stop-histogram", type=float)
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a repair network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--game", choices=games)
    p.add_argument("--obs", type=positive_int, help="observation crop size")
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--batch", type=positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=channel_list, help="conv channels, e.g. 16,16,32")
    p.add_argument("--resume", help="checkpoint directory to continue training from")
    p.add_argument("--out")

    p = sub.add_parser("generate", help="generate levels with a trained network")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--game", choices=games)
    p.add_argument("--trials", type=positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--traversal", choices=traversals)
    p.add_argument("--max-passes", type=positive_int)
    p.add_argument("--workers", type=positive_int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="score networks over many generation trials")
    p.add_argument("--checkpoints", type=path_list, required=True, help="comma-separated checkpoint dirs")
    p.add_argument("--game", choices=games)
    p.add_argument("--goals")
    p.add_argument("--goal-limit", type=positive_int)
    p.add_argument("--trials", type=positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--traversal", choices=traversals)
    p.add_argument("--max-passes", type=positive_int)
    p.add_argument("--threshold", type=float, help="uniqueness threshold (normalized hamming)")
    p.add_argument("--vectors", help="also write playable levels as one-hot CSV under --out")
    p.add_argument("--workers", type=positive_int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("solve", help="check a single level's playability")
    p.add_argument("--game", choices=games)
    p.add_argument("--level", required=True)

    p = sub.add_parser("reproduce", help="run one of the experiment sweeps end to end")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--scale", choices=sorted(SCALES), default="desk")
    p.add_argument("--workers", type=positive_int, default=1)
    p.add_argument("--out")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        print("\nInterrupted by user.", file=sys.stderr)
        return 130
    except ValueError as e:
        logger.debug("Invalid input", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        logger.debug("I/O failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
