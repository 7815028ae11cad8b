"""
Training set generation by destroying goal levels into noise.

Each trajectory starts from a goal level and copies tiles of a sampled noise
level over it, one location at a time, until the level matches the noise.
Every edit becomes a training example: the level right after the edit, the
edited location, and the tile that was there before (the repair target).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .games import GameSpec, check_playable
from .tilemap import (
    DimensionMismatchError,
    LevelGrid,
    Location,
    goal_set_hash,
    hamming_distance,
    parse_level,
    serialize_level,
)

logger = logging.getLogger(__name__)

# one-hot cube of shape (crop, crop, channels)
Observation = np.ndarray


class Traversal(Enum):
    SEQUENTIAL = "sequential"
    RANDOM = "random"


class GoalSetError(ValueError):
    """Raised for empty goal sets or goal levels that fail validation."""


class DatasetError(ValueError):
    """Raised when a dataset file is empty, malformed or for another game."""


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for item `index` of a run seeded with `seed`."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


@dataclass(frozen=True)
class ObservationSpec:
    crop_size: int
    # alphabet size + 1; the last channel marks cells past the map edge
    channel_count: int

    def __post_init__(self):
        if self.crop_size < 3 or self.crop_size % 2 == 0:
            raise ValueError(f"Crop size must be odd and >= 3, got {self.crop_size}")
        if self.channel_count < 3:
            raise ValueError(f"Need at least 2 tiles plus the border channel, got {self.channel_count}")

    @classmethod
    def for_game(cls, game: GameSpec, crop_size: Optional[int] = None) -> "ObservationSpec":
        crop = game.default_obs_size if crop_size is None else crop_size
        return cls(crop_size=crop, channel_count=game.alphabet.size + 1)

    @property
    def border_channel(self) -> int:
        return self.channel_count - 1

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.crop_size, self.crop_size, self.channel_count)


@dataclass(frozen=True)
class TrajectoryStep:
    location: Location
    destroy_value: int
    repair_value: int


@dataclass(frozen=True)
class Trajectory:
    start_level: LevelGrid
    goal_level: LevelGrid
    steps: Tuple[TrajectoryStep, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def replay_destroy(self) -> LevelGrid:
        """Apply destroy values in order to the goal level."""
        cells = self.goal_level.to_array()
        for step in self.steps:
            cells[step.location] = step.destroy_value
        return LevelGrid(cells)

    def replay_repair(self, level: Optional[LevelGrid] = None) -> LevelGrid:
        """Apply repair values in reverse order, from the start level by default."""
        cells = (self.start_level if level is None else level).to_array()
        for step in reversed(self.steps):
            cells[step.location] = step.repair_value
        return LevelGrid(cells)


@dataclass(frozen=True)
class TrainingExample:
    # level right after the destructive edit
    level_snapshot: LevelGrid
    location: Location
    target: int


@dataclass(frozen=True)
class DatasetConfig:
    target_example_count: int = 100_000
    traversal: Traversal = Traversal.RANDOM
    seed: int = 0
    # 0.0 means destroy until the level equals the start level
    stop_hamming: float = 0.0
    # L1 distance between tile shares; None disables the histogram criterion
    stop_histogram: Optional[float] = None

    def __post_init__(self):
        if self.target_example_count < 1:
            raise ValueError(f"Target example count must be positive, got {self.target_example_count}")
        if self.seed < 0:
            raise ValueError(f"Seed must be non-negative, got {self.seed}")
        if not 0.0 <= self.stop_hamming < 1.0:
            raise ValueError(f"Hamming stop threshold must be in [0, 1), got {self.stop_hamming}")
        if self.stop_histogram is not None and not 0.0 <= self.stop_histogram < 2.0:
            raise ValueError(f"Histogram stop threshold must be in [0, 2), got {self.stop_histogram}")


@dataclass
class DatasetSummary:
    path: Path
    example_count: int
    trajectory_count: int
    goal_set_hash: str


@dataclass
class Dataset:
    """Examples held as compact arrays; observations are cropped on demand."""
    game_id: str
    levels: np.ndarray   # (N, H, W) uint8
    rows: np.ndarray     # (N,)
    cols: np.ndarray     # (N,)
    targets: np.ndarray  # (N,)
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.targets)

    def observations(self, spec: ObservationSpec, index: Optional[np.ndarray] = None) -> np.ndarray:
        if index is None:
            index = np.arange(len(self))
        return encode_observations(self.levels[index], self.rows[index], self.cols[index], spec)


def sample_start_level(game: GameSpec, rng: np.random.Generator) -> LevelGrid:
    cells = rng.choice(game.alphabet.size, size=game.shape, p=np.asarray(game.noise_weights))
    return LevelGrid(cells)


def select_goal(start: LevelGrid, goal_set: Sequence[LevelGrid]) -> Tuple[int, LevelGrid]:
    """Closest goal by hamming distance; the lowest index wins ties."""
    if not goal_set:
        raise GoalSetError("Goal set is empty")

    best_index, best_distance = 0, None
    for i, goal in enumerate(goal_set):
        distance = hamming_distance(start, goal)
        if best_distance is None or distance < best_distance:
            best_index, best_distance = i, distance
    return best_index, goal_set[best_index]


def _tile_shares(cells: np.ndarray, tile_count: int) -> np.ndarray:
    return np.bincount(cells.ravel(), minlength=tile_count) / cells.size


def _traversal_order(shape: Tuple[int, int], traversal: Traversal, rng: np.random.Generator) -> np.ndarray:
    count = shape[0] * shape[1]
    if traversal is Traversal.SEQUENTIAL:
        return np.arange(count)
    # without replacement, so every trajectory ends within H*W steps
    return rng.permutation(count)


def destroy_trajectory(
        goal: LevelGrid,
        start: LevelGrid,
        traversal: Traversal,
        rng: np.random.Generator,
        stop_hamming: float = 0.0,
        stop_histogram: Optional[float] = None,
) -> Trajectory:
    if goal.shape != start.shape:
        raise DimensionMismatchError(f"Goal shape {goal.shape} differs from start shape {start.shape}")

    current = goal.to_array()
    target = start.cells
    cell_count = float(target.size)
    tile_count = int(max(current.max(), target.max())) + 1
    start_shares = _tile_shares(target, tile_count) if stop_histogram is not None else None

    def done() -> bool:
        if stop_histogram is not None:
            distance = np.abs(_tile_shares(current, tile_count) - start_shares).sum()
            if distance <= stop_histogram:
                return True
        return np.count_nonzero(current != target) / cell_count <= stop_hamming

    width = goal.width
    steps: List[TrajectoryStep] = []
    for flat in _traversal_order(goal.shape, traversal, rng):
        if done():
            break
        location = divmod(int(flat), width)
        repair = int(current[location])
        destroy = int(target[location])
        current[location] = destroy
        # unchanged tiles are kept: they teach the network to leave good tiles alone
        steps.append(TrajectoryStep(location, destroy, repair))

    return Trajectory(start_level=start, goal_level=goal, steps=tuple(steps))


def trajectory_to_examples(trajectory: Trajectory) -> List[TrainingExample]:
    cells = trajectory.goal_level.to_array()
    examples = []
    for step in trajectory.steps:
        cells[step.location] = step.destroy_value
        examples.append(TrainingExample(LevelGrid(cells), step.location, step.repair_value))
    return examples


def _pad_levels(levels: np.ndarray, pad: int, border: int) -> np.ndarray:
    return np.pad(levels, ((0, 0), (pad, pad), (pad, pad)), mode="constant", constant_values=border)


def encode_observations(
        levels: np.ndarray,
        rows: np.ndarray,
        cols: np.ndarray,
        spec: ObservationSpec,
) -> np.ndarray:
    """Crop a batch of (N, H, W) levels around (rows, cols) into (N, crop, crop, C) one-hot cubes."""
    levels = np.asarray(levels)
    if levels.ndim != 3:
        raise ValueError(f"Expected a (N, H, W) level batch, got shape {levels.shape}")

    crop = spec.crop_size
    half = crop // 2
    padded = _pad_levels(levels.astype(np.int64), half, spec.border_channel)

    offsets = np.arange(crop)
    window_rows = np.asarray(rows)[:, None] + offsets[None, :]
    window_cols = np.asarray(cols)[:, None] + offsets[None, :]
    batch = np.arange(len(levels))[:, None, None]
    windows = padded[batch, window_rows[:, :, None], window_cols[:, None, :]]

    if windows.size and windows.max() >= spec.channel_count:
        raise ValueError(
            f"Tile index {int(windows.max())} does not fit {spec.channel_count} observation channels"
        )
    return np.eye(spec.channel_count, dtype=np.float32)[windows]


def crop_observation(level: LevelGrid, center: Location, spec: ObservationSpec) -> Observation:
    if not level.contains(center):
        raise ValueError(f"Center {center} outside level of shape {level.shape}")
    return encode_observations(level.cells[None], np.array([center[0]]), np.array([center[1]]), spec)[0]


def validate_goal_set(game: GameSpec, goal_set: Sequence[LevelGrid]) -> None:
    if not goal_set:
        raise GoalSetError(f"Goal set for {game.game_id} is empty")
    for i, goal in enumerate(goal_set):
        if goal.shape != game.shape:
            raise GoalSetError(f"Goal level {i} has shape {goal.shape}, {game.game_id} needs {game.shape}")
        result = check_playable(game, goal)
        if not result.playable:
            raise GoalSetError(f"Goal level {i} is not playable: {result.reason.value}")


def iter_trajectories(
        game: GameSpec,
        goal_set: Sequence[LevelGrid],
        config: DatasetConfig,
) -> Iterator[Tuple[int, Trajectory]]:
    """Endless stream of trajectories; trajectory i draws only from derive_rng(seed, i)."""
    index = 0
    while True:
        rng = derive_rng(config.seed, index)
        start = sample_start_level(game, rng)
        goal_index, goal = select_goal(start, goal_set)
        trajectory = destroy_trajectory(
            goal, start, config.traversal, rng,
            stop_hamming=config.stop_hamming,
            stop_histogram=config.stop_histogram,
        )
        logger.debug("Trajectory %d: goal %d, %d steps", index, goal_index, len(trajectory))
        yield index, trajectory
        index += 1


def build_dataset(
        game: GameSpec,
        goal_set: Sequence[LevelGrid],
        config: DatasetConfig,
        path: Union[str, Path],
        show_progress: bool = False,
) -> DatasetSummary:
    """
    Generate trajectories until at least `target_example_count` examples exist
    and write them as JSONL.

    The first line is a header; every other line is one example. Trajectories
    are never cut, so the count can overshoot by up to one trajectory.
    """
    validate_goal_set(game, goal_set)
    alphabet = game.alphabet
    digest = goal_set_hash(goal_set, alphabet)

    lines: List[str] = []
    trajectory_count = 0
    progress = tqdm(total=config.target_example_count, desc="Destroying", unit="ex", disable=not show_progress)
    for _, trajectory in iter_trajectories(game, goal_set, config):
        trajectory_count += 1
        for example in trajectory_to_examples(trajectory):
            lines.append(json.dumps({
                "level": serialize_level(example.level_snapshot, alphabet),
                "row": example.location[0],
                "col": example.location[1],
                "target": alphabet.char(example.target),
            }))
        progress.update(len(trajectory))
        if len(lines) >= config.target_example_count:
            break
    progress.close()

    header = {
        "game": game.game_id,
        "goal_set_hash": digest,
        "seed": config.seed,
        "traversal": config.traversal.value,
        "count": len(lines),
    }
    if config.stop_hamming or config.stop_histogram is not None:
        header["stop_hamming"] = config.stop_hamming
        header["stop_histogram"] = config.stop_histogram

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header) + "\n")
        for line in lines:
            f.write(line + "\n")

    logger.info(
        "Wrote %d examples from %d trajectories to %s", len(lines), trajectory_count, path
    )
    return DatasetSummary(path=path, example_count=len(lines), trajectory_count=trajectory_count,
                          goal_set_hash=digest)


def load_dataset(path: Union[str, Path], game: GameSpec) -> Dataset:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header_line = f.readline()
        if not header_line.strip():
            raise DatasetError(f"Dataset {path} is empty")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"Dataset {path} has a malformed header: {e}") from None
        if header.get("game") != game.game_id:
            raise DatasetError(
                f"Dataset {path} was built for game '{header.get('game')}', not '{game.game_id}'"
            )

        levels, rows, cols, targets = [], [], [], []
        for line_number, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                level = parse_level(record["level"], game.alphabet)
                target = game.alphabet.index_of_char(record["target"])
                row, col = int(record["row"]), int(record["col"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{line_number}: bad example ({e})") from None
            if level.shape != game.shape or not level.contains((row, col)):
                raise DatasetError(f"{path}:{line_number}: example does not fit {game.game_id} levels")
            levels.append(level.cells)
            rows.append(row)
            cols.append(col)
            targets.append(target)

    if not targets:
        raise DatasetError(f"Dataset {path} has no examples")

    logger.info("Loaded %d examples from %s", len(targets), path)
    return Dataset(
        game_id=game.game_id,
        levels=np.stack(levels).astype(np.uint8),
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        header=header,
    )
