import sys
import os
import time

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pathlib import Path

import numpy as np

from src.models.evaluation import dedup_unique, rank_by_diversity
from src.models.games import SOKOBAN, ZELDA, check_playable
from src.models.generator import GenerationConfig, RepairNetwork, batch_generate
from src.models.neuralnet import NetworkSpec, TrainConfig, train
from src.models.podgen import (
    DatasetConfig, ObservationSpec, Traversal, build_dataset, destroy_trajectory, load_dataset, sample_start_level,
    select_goal,
)
from src.models.tilemap import load_levels, serialize_level

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"
OUT = Path(__file__).resolve().parent / "output"


def demo_destruction():
    print("=" * 80)
    print(" DESTROYING A GOAL LEVEL")
    print("=" * 80)

    goals = load_levels(FIXTURES / "zelda5", ZELDA.alphabet)
    rng = np.random.default_rng(0)
    start = sample_start_level(ZELDA, rng)
    _, goal = select_goal(start, goals)
    trajectory = destroy_trajectory(goal, start, Traversal.RANDOM, rng)

    print("Goal level:")
    print(serialize_level(trajectory.goal_level, ZELDA.alphabet))
    print("\nNoise level it was destroyed into:")
    print(serialize_level(trajectory.start_level, ZELDA.alphabet))
    print(f"\nDestruction took {len(trajectory)} steps; each one becomes a repair example")
    return trajectory


def demo_training():
    """Build a small dataset and fit a small network on it."""
    print("=" * 80)
    print(" TRAINING A REPAIR NETWORK")
    print("=" * 80)

    goals = load_levels(FIXTURES / "zelda5", ZELDA.alphabet)
    summary = build_dataset(ZELDA, goals, DatasetConfig(target_example_count=5000, seed=1), OUT / "dataset.jsonl",
                            show_progress=True)
    dataset = load_dataset(summary.path, ZELDA)
    print(f"Dataset: {summary.example_count} examples from {summary.trajectory_count} trajectories")

    spec = NetworkSpec.for_observation(ObservationSpec.for_game(ZELDA), ZELDA.alphabet.size, (16, 16, 32))
    start = time.perf_counter()
    result = train(dataset, spec, TrainConfig(epochs=10), seed=1, show_progress=True)
    print(f"Loss: {result.loss_history[0]:.4f} -> {result.loss_history[-1]:.4f} "
          f"in {time.perf_counter() - start:.1f} seconds")
    return RepairNetwork(result.state, spec), goals


def demo_generation(network, goals):
    print("=" * 80)
    print(" GENERATING LEVELS")
    print("=" * 80)

    traces = batch_generate(network, ZELDA, GenerationConfig(), 50, master_seed=7, show_progress=True)
    playable = [t.final_level for t in traces if t.playable]
    unique = dedup_unique(playable, goals)
    print(f"Playable: {len(playable)}/50, playable and unique: {len(unique)}/50")

    if unique:
        best, score = rank_by_diversity(unique, goals)[0]
        print(f"\nMost distinct level ({score:.0%} away from its nearest neighbour):")
        print(serialize_level(unique[best], ZELDA.alphabet))


def demo_solver():
    print("=" * 80)
    print(" SOKOBAN SOLVER")
    print("=" * 80)

    for level in load_levels(FIXTURES / "sokoban5", SOKOBAN.alphabet):
        result = check_playable(SOKOBAN, level)
        print(f"{result}  {''.join(result.solution)}")


def main():
    print("PATH OF DESTRUCTION LEVEL GENERATOR")
    print("Learning level repair from destroyed goal levels")

    try:
        demo_destruction()
        demo_solver()
        network, goals = demo_training()
        demo_generation(network, goals)

        print("DEMONSTRATION COMPLETE!")
        print(f" Artifacts written to {OUT}")

    except ImportError as e:
        print(f"Missing dependence: {e}")
        print(" Install: pip install -r requirements.txt")
    except Exception as e:
        print(f" Error: {e}")
        import traceback
        traceback.print_exc()


if __name__ == "__main__":
    main()
