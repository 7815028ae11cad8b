"""
Level generation by iterative learned repair.

A noise level is swept location by location; at each location the network
sees the cropped neighbourhood and its most likely tile is written back.
Generation stops as soon as the level is playable or the step budget of
`max_passes` full sweeps runs out.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .games import GameSpec, PlayabilityResult, check_playable
from .neuralnet import NetworkSpec, NetworkState, forward, load_checkpoint
from .podgen import Traversal, crop_observation, derive_rng, sample_start_level
from .tilemap import LevelGrid, Location, serialize_level

logger = logging.getLogger(__name__)


class Termination(Enum):
    PLAYABLE = "playable"
    BUDGET = "budget"


@dataclass(frozen=True)
class RepairNetwork:
    """Read-only network used for inference; safe to share between threads."""
    state: NetworkState
    spec: NetworkSpec

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "RepairNetwork":
        state, spec = load_checkpoint(path)
        return cls(state=state, spec=spec)

    def check_game(self, game: GameSpec) -> None:
        if self.spec.action_count != game.alphabet.size:
            raise ValueError(
                f"Network predicts {self.spec.action_count} tiles, {game.game_id} has {game.alphabet.size}"
            )
        if self.spec.input_shape[2] != game.alphabet.size + 1:
            raise ValueError(
                f"Network expects {self.spec.input_shape[2]} observation channels, "
                f"{game.game_id} needs {game.alphabet.size + 1}"
            )


@dataclass(frozen=True)
class GenerationConfig:
    traversal: Traversal = Traversal.RANDOM
    max_passes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_passes < 1:
            raise ValueError(f"Max passes must be at least 1, got {self.max_passes}")
        if self.seed < 0:
            raise ValueError(f"Seed must be non-negative, got {self.seed}")

    def step_budget(self, game: GameSpec) -> int:
        return self.max_passes * game.level_height * game.level_width


@dataclass(frozen=True)
class GenerationStep:
    location: Location
    action: int


@dataclass(frozen=True)
class GenerationTrace:
    start_level: LevelGrid
    final_level: LevelGrid
    terminated_by: Termination
    log: Tuple[GenerationStep, ...]
    # playability of final_level
    result: PlayabilityResult

    @property
    def steps(self) -> int:
        return len(self.log)

    @property
    def playable(self) -> bool:
        return self.result.playable

    def replay(self) -> LevelGrid:
        cells = self.start_level.to_array()
        for step in self.log:
            cells[step.location] = step.action
        return LevelGrid(cells)


def repair_action(network: RepairNetwork, level: LevelGrid, location: Location) -> int:
    """Most likely tile at `location`; ties go to the lowest tile index."""
    observation = crop_observation(level, location, network.spec.observation_spec)
    return int(np.argmax(forward(network.state, network.spec, observation)))


def generate_level(
        network: RepairNetwork,
        game: GameSpec,
        config: GenerationConfig,
        rng: np.random.Generator,
) -> GenerationTrace:
    network.check_game(game)
    start = sample_start_level(game, rng)

    result = check_playable(game, start)
    if result.playable:
        return GenerationTrace(start, start, Termination.PLAYABLE, (), result)

    height, width = game.shape
    level = start
    log: List[GenerationStep] = []
    for _ in range(config.max_passes):
        if config.traversal is Traversal.SEQUENTIAL:
            order = np.arange(height * width)
        else:
            order = rng.permutation(height * width)
        for flat in order:
            location = divmod(int(flat), width)
            # the argmax is written even when it keeps the current tile
            action = repair_action(network, level, location)
            level = level.with_tile(location, action)
            log.append(GenerationStep(location, action))

            result = check_playable(game, level)
            if result.playable:
                return GenerationTrace(start, level, Termination.PLAYABLE, tuple(log), result)

    return GenerationTrace(start, level, Termination.BUDGET, tuple(log), result)


def batch_generate(
        network: RepairNetwork,
        game: GameSpec,
        config: GenerationConfig,
        trials: int,
        master_seed: Optional[int] = None,
        workers: int = 1,
        show_progress: bool = False,
) -> List[GenerationTrace]:
    """
    Run independent trials; trial i uses derive_rng(master_seed, i).

    Results come back in trial order whatever the worker count.
    """
    if trials < 1:
        raise ValueError(f"Trials must be at least 1, got {trials}")
    network.check_game(game)
    seed = config.seed if master_seed is None else master_seed

    def run(index: int) -> GenerationTrace:
        return generate_level(network, game, config, derive_rng(seed, index))

    progress = tqdm(total=trials, desc="Generating", unit="level", disable=not show_progress)
    traces: List[GenerationTrace] = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for trace in pool.map(run, range(trials)):
                traces.append(trace)
                progress.update(1)
    else:
        for index in range(trials):
            traces.append(run(index))
            progress.update(1)
    progress.close()

    playable = sum(t.playable for t in traces)
    logger.info("Generated %d %s levels, %d playable", trials, game.game_id, playable)
    return traces


def write_traces(traces: List[GenerationTrace], path: Union[str, Path], game: GameSpec) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, trace in enumerate(traces):
            f.write(json.dumps({
                "trial": i,
                "terminated_by": trace.terminated_by.value,
                "steps": trace.steps,
                "final": serialize_level(trace.final_level, game.alphabet),
            }) + "\n")
    return path
