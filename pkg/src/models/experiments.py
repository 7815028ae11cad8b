"""
End-to-end pipeline (dataset -> networks -> evaluation) and the sweeps that
reproduce the observation-size, goal-set-size, multi-game and duplicate
experiments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .config import RunConfig, write_run_manifest
from .evaluation import MetricsReport, evaluate
from .games import get_game
from .generator import RepairNetwork
from .neuralnet import save_checkpoint, train
from .podgen import GoalSetError, build_dataset, load_dataset
from .tilemap import LevelGrid, load_levels

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parents[2]

EXPERIMENTS = ("obs-sweep", "goal-sweep", "games", "duplicates")


@dataclass(frozen=True)
class ExperimentCell:
    name: str
    config: RunConfig


def resolve_goal_path(goals: Union[str, Path]) -> Path:
    """Relative paths are tried against the working directory, then the repo root."""
    path = Path(goals)
    if path.is_absolute() or path.exists():
        return path
    return REPO_ROOT / path


def load_goal_set(config: RunConfig) -> List[LevelGrid]:
    game = get_game(config.game)
    path = resolve_goal_path(config.goals)
    if not path.exists():
        raise GoalSetError(f"Goal directory {config.goals} does not exist")
    levels = load_levels(path, game.alphabet)
    if config.goal_limit is not None:
        levels = levels[:config.goal_limit]
    if not levels:
        raise GoalSetError(f"No goal levels found in {config.goals}")
    return levels


def write_loss_log(history: Sequence[float], path: Union[str, Path]) -> Path:
    path = Path(path)
    lines = ["epoch,loss"] + [f"{i + 1},{loss!r}" for i, loss in enumerate(history)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def run_pipeline(
        config: RunConfig,
        out_dir: Union[str, Path],
        show_progress: bool = False,
        workers: int = 1,
) -> MetricsReport:
    """Build one dataset, train one network per seed, evaluate them together."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    game = get_game(config.game)
    goals = load_goal_set(config)
    produced = [config.save(out_dir / "config.yaml")]

    summary = build_dataset(game, goals, config.dataset_config(), out_dir / "dataset.jsonl", show_progress)
    produced.append(summary.path)
    dataset = load_dataset(summary.path, game)

    spec = config.network_spec()
    networks = []
    for seed in config.seeds:
        logger.info("Training %s network with seed %d", game.game_id, seed)
        result = train(dataset, spec, config.train_config(), seed, show_progress=show_progress)
        checkpoint = save_checkpoint(result.state, spec, out_dir / f"net_seed{seed}",
                                     extra={"config_digest": config.digest()})
        produced.append(write_loss_log(result.loss_history, checkpoint / "loss.csv"))
        produced.extend([checkpoint / "manifest.json", checkpoint / "weights.bin"])
        networks.append(RepairNetwork(state=result.state, spec=spec))

    report, _ = evaluate(
        networks, game, config.generation_config(), config.trials, goals,
        threshold=config.unique_threshold, workers=workers, show_progress=show_progress,
    )
    produced.append(report.write(out_dir / "report.json"))
    write_run_manifest(out_dir, produced)
    return report


def experiment_cells(
        experiment_id: str,
        scale: str = "desk",
        base: Optional[RunConfig] = None,
) -> List[ExperimentCell]:
    """Sweep cells on top of `base` (defaults otherwise) at the given scale."""
    base = (base or RunConfig()).with_scale(scale)

    if experiment_id == "obs-sweep":
        return [ExperimentCell(f"obs{size}", base.with_overrides(obs_size=size)) for size in (5, 9, 15)]

    if experiment_id == "goal-sweep":
        return [
            ExperimentCell("goal1", base.with_overrides(goal_limit=1)),
            ExperimentCell("goal5", base),
            ExperimentCell("goal50", base.with_overrides(goals="fixtures/zelda50")),
        ]

    if experiment_id == "games":
        return [
            ExperimentCell("zelda", base.with_overrides(game="zelda", goals="fixtures/zelda5", obs_size=5)),
            ExperimentCell("sokoban", base.with_overrides(game="sokoban", goals="fixtures/sokoban5", obs_size=3)),
            ExperimentCell("dave", base.with_overrides(game="dave", goals="fixtures/dave5", obs_size=5)),
        ]

    if experiment_id == "duplicates":
        return [ExperimentCell("zelda_goal50", base.with_overrides(goals="fixtures/zelda50"))]

    raise ValueError(f"Unknown experiment '{experiment_id}', expected one of {list(EXPERIMENTS)}")


def run_experiment(
        experiment_id: str,
        out_dir: Union[str, Path],
        scale: str = "desk",
        show_progress: bool = False,
        workers: int = 1,
        base: Optional[RunConfig] = None,
) -> Dict[str, MetricsReport]:
    out_dir = Path(out_dir)
    reports = {}
    for cell in experiment_cells(experiment_id, scale, base):
        logger.info("Running %s/%s", experiment_id, cell.name)
        reports[cell.name] = run_pipeline(cell.config, out_dir / cell.name, show_progress, workers)
    return reports
