"""
Metrics over generated levels: playable %, playable-and-unique %, duplicate %.

Uniqueness is a greedy scan in generation order: a level is kept when it is
at least `threshold` (normalized hamming) away from every goal level and
every level kept before it.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .games import GameSpec
from .generator import GenerationConfig, RepairNetwork, batch_generate
from .tilemap import DimensionMismatchError, LevelGrid, TileAlphabet

logger = logging.getLogger(__name__)

UNIQUE_THRESHOLD = 0.10


def _stack(levels: Sequence[LevelGrid], shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    if not levels:
        return np.zeros((0,) + (shape or (0, 0)), dtype=np.uint8)
    first = levels[0].shape if shape is None else shape
    for level in levels:
        if level.shape != first:
            raise DimensionMismatchError(f"Level shapes differ: {level.shape} vs {first}")
    return np.stack([level.cells for level in levels])


def dedup_unique(
        levels: Sequence[LevelGrid],
        goal_set: Sequence[LevelGrid],
        threshold: float = UNIQUE_THRESHOLD,
) -> List[LevelGrid]:
    if not levels:
        return []
    shape = levels[0].shape
    candidates = _stack(levels, shape)
    goals = _stack(goal_set, shape)
    cell_count = float(shape[0] * shape[1])

    kept = np.empty_like(candidates)
    kept_count = 0
    result: List[LevelGrid] = []
    for level, cells in zip(levels, candidates):
        references = (goals, kept[:kept_count])
        if all(
                len(ref) == 0
                or (np.count_nonzero(ref != cells, axis=(1, 2)) / cell_count).min() >= threshold
                for ref in references
        ):
            kept[kept_count] = cells
            kept_count += 1
            result.append(level)
    return result


def duplicate_pct(levels: Sequence[LevelGrid]) -> float:
    """Share of levels that exactly repeat an earlier level."""
    if not levels:
        return 0.0
    seen = set()
    duplicates = 0
    for level in levels:
        key = (level.shape, level.cells.tobytes())
        if key in seen:
            duplicates += 1
        else:
            seen.add(key)
    return 100.0 * duplicates / len(levels)


def rank_by_diversity(levels: Sequence[LevelGrid], goal_set: Sequence[LevelGrid]) -> List[Tuple[int, float]]:
    """
    (index, score) pairs, most distinct first.

    The score is the smallest normalized hamming distance from a level to any
    goal or any other listed level.
    """
    if not levels:
        return []
    shape = levels[0].shape
    candidates = _stack(levels, shape)
    references = np.concatenate([_stack(goal_set, shape), candidates])
    goal_count = len(goal_set)
    cell_count = float(shape[0] * shape[1])

    scores = []
    for i, cells in enumerate(candidates):
        distances = np.count_nonzero(references != cells, axis=(1, 2)) / cell_count
        distances[goal_count + i] = np.inf
        scores.append((i, float(distances.min()) if len(distances) > 1 or goal_count else 1.0))
    return sorted(scores, key=lambda item: (-item[1], item[0]))


def tile_frequencies(levels: Sequence[LevelGrid], alphabet: TileAlphabet) -> Dict[str, float]:
    """Mean share of each tile across levels."""
    if not levels:
        return {name: 0.0 for name in alphabet.names}
    counts = np.bincount(_stack(levels).ravel(), minlength=alphabet.size)[:alphabet.size]
    shares = counts / counts.sum()
    return {name: round(float(share), 6) for name, share in zip(alphabet.names, shares)}


def mean_and_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation; the std of a single value is reported as 0."""
    array = np.asarray(values, dtype=np.float64)
    if len(array) == 0:
        raise ValueError("Cannot aggregate an empty list")
    std = float(np.std(array, ddof=1)) if len(array) > 1 else 0.0
    return float(np.mean(array)), std


@dataclass
class SeedMetrics:
    playable_pct: float
    playable_unique_pct: float
    duplicate_pct: float
    mean_solution_length: Optional[float] = None


@dataclass
class MetricsReport:
    game: str
    config_digest: str
    trials: int
    playable_pct: float
    playable_pct_std: float
    playable_unique_pct: float
    playable_unique_pct_std: float
    duplicate_pct: float
    duplicate_pct_std: float
    per_seed: List[SeedMetrics]
    single_seed: bool = False
    mean_solution_length: Optional[float] = None
    tile_frequencies: Dict[str, Dict[str, float]] = field(default_factory=dict)
    # wall clock; kept off the written report so reruns stay byte-identical
    runtime_seconds: float = 0.0

    def __post_init__(self):
        for seed in self.per_seed:
            if not 0.0 <= seed.playable_unique_pct <= seed.playable_pct <= 100.0:
                raise ValueError(
                    f"Inconsistent percentages: unique {seed.playable_unique_pct} vs playable {seed.playable_pct}"
                )

    def to_dict(self, include_runtime: bool = False) -> dict:
        data = asdict(self)
        if not include_runtime:
            data.pop("runtime_seconds")
        return data

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def network_digest(network: RepairNetwork) -> str:
    digest = hashlib.sha256(json.dumps(network.spec.to_dict(), sort_keys=True).encode("utf-8"))
    for name in sorted(network.state.params):
        digest.update(np.ascontiguousarray(network.state.params[name], dtype="<f4").tobytes())
    return digest.hexdigest()


def config_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def summarize(
        game: GameSpec,
        per_network_levels: Sequence[Sequence[LevelGrid]],
        per_network_solution_lengths: Sequence[Sequence[int]],
        trials: int,
        goal_set: Sequence[LevelGrid],
        digest: str,
        threshold: float = UNIQUE_THRESHOLD,
) -> MetricsReport:
    """Build a report from each network's playable levels (in trial order)."""
    per_seed = []
    all_playable: List[LevelGrid] = []
    for playable, lengths in zip(per_network_levels, per_network_solution_lengths):
        unique = dedup_unique(playable, goal_set, threshold)
        per_seed.append(SeedMetrics(
            playable_pct=100.0 * len(playable) / trials,
            playable_unique_pct=100.0 * len(unique) / trials,
            duplicate_pct=duplicate_pct(playable),
            mean_solution_length=float(np.mean(lengths)) if len(lengths) else None,
        ))
        all_playable.extend(playable)

    playable_mean, playable_std = mean_and_std([s.playable_pct for s in per_seed])
    unique_mean, unique_std = mean_and_std([s.playable_unique_pct for s in per_seed])
    duplicate_mean, duplicate_std = mean_and_std([s.duplicate_pct for s in per_seed])
    lengths = [s.mean_solution_length for s in per_seed if s.mean_solution_length is not None]

    return MetricsReport(
        game=game.game_id,
        config_digest=digest,
        trials=trials,
        playable_pct=playable_mean,
        playable_pct_std=playable_std,
        playable_unique_pct=unique_mean,
        playable_unique_pct_std=unique_std,
        duplicate_pct=duplicate_mean,
        duplicate_pct_std=duplicate_std,
        per_seed=per_seed,
        single_seed=len(per_seed) == 1,
        mean_solution_length=float(np.mean(lengths)) if lengths else None,
        tile_frequencies={
            "generated": tile_frequencies(all_playable, game.alphabet),
            "goal": tile_frequencies(list(goal_set), game.alphabet),
        },
    )


def evaluate(
        networks: Sequence[RepairNetwork],
        game: GameSpec,
        config: GenerationConfig,
        trials: int,
        goal_set: Sequence[LevelGrid],
        threshold: float = UNIQUE_THRESHOLD,
        workers: int = 1,
        show_progress: bool = False,
) -> Tuple[MetricsReport, List[list]]:
    """
    Generate `trials` levels per network and score them.

    Network k uses master seed `config.seed + k`. Returns the report and the
    per-network trace lists.
    """
    if not networks:
        raise ValueError("Need at least one network to evaluate")

    started = time.perf_counter()
    all_traces = []
    per_network_levels = []
    per_network_lengths = []
    for k, network in enumerate(networks):
        traces = batch_generate(network, game, config, trials, master_seed=config.seed + k,
                                workers=workers, show_progress=show_progress)
        playable = [t for t in traces if t.result.playable]
        per_network_levels.append([t.final_level for t in playable])
        per_network_lengths.append([t.result.solution_length for t in playable
                                    if t.result.solution_length is not None])
        all_traces.append(traces)

    digest = config_digest({
        "game": game.game_id,
        "noise_weights": list(game.noise_weights),
        "solver_budget": game.solver_budget,
        "generation": {"traversal": config.traversal.value, "max_passes": config.max_passes, "seed": config.seed},
        "trials": trials,
        "threshold": threshold,
        "networks": [network_digest(n) for n in networks],
        "goal_set": [level.cells.tobytes().hex() for level in goal_set],
    })
    report = summarize(game, per_network_levels, per_network_lengths, trials, goal_set, digest, threshold)
    report.runtime_seconds = time.perf_counter() - started
    logger.info(
        "%s: playable %.2f +- %.2f%%, playable+unique %.2f +- %.2f%%, duplicates %.2f%% (%.1fs)",
        game.game_id, report.playable_pct, report.playable_pct_std,
        report.playable_unique_pct, report.playable_unique_pct_std,
        report.duplicate_pct, report.runtime_seconds,
    )
    return report, all_traces


def export_level_vectors(
        levels: Sequence[LevelGrid],
        goal_set: Sequence[LevelGrid],
        path: Union[str, Path],
        game: GameSpec,
) -> Path:
    """CSV of flattened one-hot levels for external 2-D projection; goals first."""
    tiles = game.alphabet.size
    width = game.level_height * game.level_width * tiles
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    eye = np.eye(tiles, dtype=np.int64)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"c{i}" for i in range(width)] + ["label"])
        for label, group in (("goal", goal_set), ("generated", levels)):
            for level in group:
                if level.shape != game.shape:
                    raise DimensionMismatchError(f"Level shape {level.shape} does not match {game.shape}")
                writer.writerow(eye[level.cells].ravel().tolist() + [label])
    return path
