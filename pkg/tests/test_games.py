"""
Tests for game definitions and the playability checkers.

The Sokoban solver is checked against an exhaustive breadth-first search that
shares no code with it; solver paths for both puzzle games are replayed
through the rules move by move.

Run with:
    python -m pytest tests/test_games.py
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from collections import deque
from pathlib import Path

import numpy as np
import pytest

from src.models.games import (
    DAVE, DAVE_ALPHABET, GAMES, PlayabilityReason, PlayabilityResult, SOKOBAN, SOKOBAN_ALPHABET,
    ZELDA, ZELDA_ALPHABET, apply_sokoban_moves, check_playable, check_zelda, count_tiles,
    dave_start_state, dave_successors, dave_won, get_game, reachable_set, solve_dave, solve_sokoban,
    sokoban_solved,
)
from src.models.tilemap import DimensionMismatchError, LevelGrid, load_levels, parse_level

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

OPEN_ZELDA = "\n".join([
    "wwwwwwwwwww",
    "wA........w",
    "w.........w",
    "w....+....w",
    "w.........w",
    "w.......g.w",
    "wwwwwwwwwww",
])


def zelda(text):
    return parse_level(text, ZELDA_ALPHABET)


def sokoban(text):
    return parse_level(text, SOKOBAN_ALPHABET)


def dave(text):
    return parse_level(text, DAVE_ALPHABET)


# ---------------------------------------------------------------------------
# Game specs
# ---------------------------------------------------------------------------

def test_game_specs():
    """Dimensions, observation sizes and noise weights per game"""
    assert ZELDA.shape == (7, 11)
    assert DAVE.shape == (7, 11)
    assert SOKOBAN.shape == (5, 5)
    for game in GAMES.values():
        assert game.default_obs_size % 2 == 1 and game.default_obs_size >= 3
        assert abs(sum(game.noise_weights) - 1.0) < 1e-9
        assert min(game.noise_weights) >= 0
    assert get_game("sokoban") is SOKOBAN
    with pytest.raises(ValueError):
        get_game("mario")


def test_noise_weights_validation():
    weights = [0.0] * ZELDA_ALPHABET.size
    weights[0] = 1.0
    assert ZELDA.with_noise_weights(weights).noise_weights[0] == 1.0
    with pytest.raises(ValueError):
        ZELDA.with_noise_weights([0.5] * ZELDA_ALPHABET.size)
    with pytest.raises(ValueError):
        ZELDA.with_noise_weights([1.0])


def test_playability_result_consistency():
    assert str(PlayabilityResult(True, PlayabilityReason.OK)) == "playable"
    assert str(PlayabilityResult(True, PlayabilityReason.OK, solution_length=3)) == "playable, moves=3"
    assert str(PlayabilityResult(False, PlayabilityReason.NO_SOLUTION)) == "unplayable, no solution"
    with pytest.raises(ValueError):
        PlayabilityResult(True, PlayabilityReason.NO_SOLUTION)


# ---------------------------------------------------------------------------
# Tile counts and reachability
# ---------------------------------------------------------------------------

def test_count_tiles():
    wall, key, empty = (ZELDA_ALPHABET.index(n) for n in ("wall", "key", "empty"))
    assert count_tiles(LevelGrid(np.full((3, 3), empty)), wall) == 0
    assert count_tiles(zelda("+.+"), key) == 2
    assert count_tiles(LevelGrid(np.full((7, 11), wall)), wall) == 77


def test_reachable_set_examples():
    empty = ZELDA_ALPHABET.index("empty")
    assert reachable_set(zelda("..."), (0, 0), {empty}) == {(0, 0), (0, 1), (0, 2)}
    assert reachable_set(zelda(".w."), (0, 0), {empty}) == {(0, 0)}
    # the start cell counts even when its own tile is not passable
    assert reachable_set(zelda("A.."), (0, 0), {empty}) == {(0, 0), (0, 1), (0, 2)}


def _closure(cells, start, passable):
    reached = {start}
    changed = True
    while changed:
        changed = False
        for r, c in list(reached):
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nr < cells.shape[0] and 0 <= nc < cells.shape[1] and (nr, nc) not in reached \
                        and cells[nr, nc] in passable:
                    reached.add((nr, nc))
                    changed = True
    return reached


def test_reachable_set_matches_closure():
    rng = np.random.default_rng(3)
    passable = {0, 2, 3}
    for _ in range(100):
        cells = rng.integers(0, 4, size=(7, 11))
        start = (int(rng.integers(7)), int(rng.integers(11)))
        assert reachable_set(LevelGrid(cells), start, passable) == _closure(cells, start, passable)


# ---------------------------------------------------------------------------
# Zelda
# ---------------------------------------------------------------------------

def test_zelda_open_room_is_playable():
    result = check_zelda(zelda(OPEN_ZELDA))
    assert result.playable
    assert result.solution_length is None


def test_zelda_wall_blocks_key():
    blocked = OPEN_ZELDA.replace("w.........w\nw....+", "wwwwwwwwwww\nw....+", 1)
    result = check_zelda(zelda(blocked))
    assert not result.playable
    assert result.reason is PlayabilityReason.UNREACHABLE_OBJECTIVE


def test_zelda_tile_counts():
    result = check_zelda(zelda(OPEN_ZELDA.replace("wA.", "wA+")))
    assert result.reason is PlayabilityReason.BAD_TILE_COUNTS
    result = check_zelda(zelda(OPEN_ZELDA.replace("g", ".")))
    assert result.reason is PlayabilityReason.BAD_TILE_COUNTS


def test_zelda_enemies_do_not_change_playability():
    """Placing or removing enemies on open floor keeps a playable map playable"""
    empty, bat = ZELDA_ALPHABET.index("empty"), ZELDA_ALPHABET.index("bat")
    enemies = {ZELDA_ALPHABET.index(n) for n in ("bat", "scorpion", "spider")}
    for level in load_levels(FIXTURES / "zelda5", ZELDA_ALPHABET):
        assert check_zelda(level).playable
        for (r, c), tile in np.ndenumerate(level.cells):
            if tile == empty:
                assert check_zelda(level.with_tile((r, c), bat)).playable
            elif tile in enemies:
                assert check_zelda(level.with_tile((r, c), empty)).playable


# ---------------------------------------------------------------------------
# Sokoban
# ---------------------------------------------------------------------------

def test_sokoban_single_push():
    level = sokoban("#####\n#@$o#\n#...#\n#...#\n#####")
    result = solve_sokoban(level)
    assert result.playable
    assert result.solution_length == 1
    assert result.solution == ("R",)
    assert str(result) == "playable, moves=1"


def test_sokoban_corner_deadlock():
    result = solve_sokoban(sokoban("#####\n#$..#\n#..o#\n#..@#\n#####"))
    assert not result.playable
    assert result.reason is PlayabilityReason.NO_SOLUTION


def test_sokoban_tile_counts():
    result = check_playable(SOKOBAN, sokoban("#####\n#@$o#\n#.$.#\n#...#\n#####"))
    assert result.reason is PlayabilityReason.BAD_TILE_COUNTS
    result = check_playable(SOKOBAN, sokoban("#####\n#.$o#\n#...#\n#...#\n#####"))
    assert result.reason is PlayabilityReason.BAD_TILE_COUNTS


def test_sokoban_budget_exhausted():
    level = sokoban("#####\n#o..#\n#.$.#\n#..@#\n#####")
    result = solve_sokoban(level, budget=1)
    assert not result.playable
    assert result.reason is PlayabilityReason.BUDGET_EXHAUSTED


def test_sokoban_already_solved():
    result = solve_sokoban(sokoban("#####\n#@*.#\n#...#\n#...#\n#####"))
    assert result.playable
    assert result.solution_length == 0


def test_sokoban_replay_rejects_illegal_moves():
    level = sokoban("#####\n#@$o#\n#...#\n#...#\n#####")
    with pytest.raises(ValueError):
        apply_sokoban_moves(level, "u")
    with pytest.raises(ValueError):
        apply_sokoban_moves(level, "rr")


def _bfs_oracle(level):
    """Shortest solution length by exhaustive search, or None."""
    cells = level.cells
    a = SOKOBAN_ALPHABET
    height, width = cells.shape
    walls = {(r, c) for (r, c), t in np.ndenumerate(cells) if t == a.index("wall")}
    targets = frozenset((r, c) for (r, c), t in np.ndenumerate(cells)
                        if t in (a.index("target"), a.index("crate_on_target"), a.index("player_on_target")))
    crates = frozenset((r, c) for (r, c), t in np.ndenumerate(cells)
                       if t in (a.index("crate"), a.index("crate_on_target")))
    player = next((r, c) for (r, c), t in np.ndenumerate(cells)
                  if t in (a.index("player"), a.index("player_on_target")))

    def blocked(r, c):
        return not (0 <= r < height and 0 <= c < width) or (r, c) in walls

    start = (player, crates)
    depth = {start: 0}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        (pr, pc), boxes = state
        if boxes == targets:
            return depth[state]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = pr + dr, pc + dc
            if blocked(nr, nc):
                continue
            new_boxes = boxes
            if (nr, nc) in boxes:
                br, bc = nr + dr, nc + dc
                if blocked(br, bc) or (br, bc) in boxes:
                    continue
                new_boxes = (boxes - {(nr, nc)}) | {(br, bc)}
            child = ((nr, nc), new_boxes)
            if child not in depth:
                depth[child] = depth[state] + 1
                queue.append(child)
    return None


def _random_sokoban(rng):
    a = SOKOBAN_ALPHABET
    walls = rng.random((5, 5)) < 0.2
    free = [(r, c) for r in range(5) for c in range(5) if not walls[r, c]]
    crate_count = int(rng.integers(1, 3))
    picks = rng.choice(len(free), size=1 + crate_count, replace=False)
    player, crates = free[picks[0]], {free[i] for i in picks[1:]}
    targets = {free[i] for i in rng.choice(len(free), size=crate_count, replace=False)}

    cells = np.where(walls, a.index("wall"), a.index("empty"))
    for location in targets:
        cells[location] = a.index("target")
    for location in crates:
        cells[location] = a.index("crate_on_target" if location in targets else "crate")
    cells[player] = a.index("player_on_target" if player in targets else "player")
    return LevelGrid(cells)


def test_sokoban_matches_bfs_oracle():
    """A* verdicts and move counts agree with exhaustive BFS on random 5x5 boards"""
    print("\n🧪 Testing Sokoban A* against BFS oracle...")
    rng = np.random.default_rng(2024)
    solvable = 0
    for _ in range(500):
        level = _random_sokoban(rng)
        expected = _bfs_oracle(level)
        result = solve_sokoban(level)

        assert result.reason is not PlayabilityReason.BUDGET_EXHAUSTED
        assert result.playable == (expected is not None)
        if result.playable:
            solvable += 1
            assert result.solution_length == expected
            assert sokoban_solved(apply_sokoban_moves(level, result.solution))
    # the suite must exercise both verdicts
    assert 0 < solvable < 500
    print(f"   ✅ 500 boards agree ({solvable} solvable)")


# ---------------------------------------------------------------------------
# Danger Dave
# ---------------------------------------------------------------------------

FLAT_DAVE = "\n".join([
    "...........",
    "...........",
    "...........",
    "...........",
    "...........",
    ".A...H...g.",
    "###########",
])


def _replay_dave(level, moves):
    state = dave_start_state(level)
    for move in moves:
        options = dict(dave_successors(level, state))
        assert move in options, f"{move} is not legal from {state}"
        state = options[move]
    return state


def test_dave_walk_right():
    level = dave(FLAT_DAVE)
    result = solve_dave(level)
    assert result.playable
    assert result.solution_length == 8
    assert dave_won(level, _replay_dave(level, result.solution))


def test_dave_chalice_out_of_reach():
    level = dave("\n".join([
        "...........",
        ".....H.....",
        ".....#.....",
        "...........",
        "...........",
        ".A.......g.",
        "###########",
    ]))
    result = solve_dave(level)
    assert not result.playable
    assert result.reason is PlayabilityReason.NO_SOLUTION


def test_dave_spike_blocks_corridor():
    level = dave("\n".join([
        "...........",
        "...........",
        "...........",
        "...........",
        "###########",
        ".AH.x....g.",
        "###########",
    ]))
    result = solve_dave(level)
    assert not result.playable
    assert result.reason is PlayabilityReason.NO_SOLUTION


def test_dave_door_needs_chalice():
    level = dave(FLAT_DAVE.replace(".A...H...g.", ".A...g...H."))
    result = solve_dave(level)
    assert result.playable
    # walk past the door to the chalice and back
    assert result.solution_length == 12


def test_dave_missing_door():
    result = check_playable(DAVE, dave(FLAT_DAVE.replace("g", ".")))
    assert result.reason is PlayabilityReason.BAD_TILE_COUNTS


def test_dave_jump_reaches_two_tiles():
    level = dave(FLAT_DAVE)
    start = dave_start_state(level)
    moves = dict(dave_successors(level, start))
    assert set(moves) == {"left", "right", "jump", "jump_left", "jump_right"}
    assert moves["jump"][:3] == (4, 1, 1)
    after_rise = dict(dave_successors(level, moves["jump"]))
    assert after_rise["rise"][:3] == (3, 1, 0)
    # at the apex gravity takes over
    assert set(dict(dave_successors(level, after_rise["rise"]))) == {"fall", "fall_left", "fall_right"}


# ---------------------------------------------------------------------------
# Fixtures and dispatch
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("game_id, folder", [
    ("zelda", "zelda5"), ("zelda", "zelda50"), ("sokoban", "sokoban5"), ("dave", "dave5"),
])
def test_fixture_goal_sets_are_playable(game_id, folder):
    game = get_game(game_id)
    levels = load_levels(FIXTURES / folder, game.alphabet)
    assert len(levels) == (50 if folder == "zelda50" else 5)
    for level in levels:
        result = check_playable(game, level)
        assert result.playable, f"{folder}: {result}"
        if game_id == "sokoban":
            assert sokoban_solved(apply_sokoban_moves(level, result.solution))
        if game_id == "dave":
            assert dave_won(level, _replay_dave(level, result.solution))


def test_check_playable_rejects_wrong_shape():
    with pytest.raises(DimensionMismatchError):
        check_playable(ZELDA, zelda("A+g"))


def test_check_playable_is_deterministic():
    level = sokoban("#####\n#o.o#\n#$.$#\n#.@.#\n#####")
    assert check_playable(SOKOBAN, level) == check_playable(SOKOBAN, level)


def test_check_playable_rejects_tiles_outside_alphabet():
    level = LevelGrid([[ZELDA_ALPHABET.size] * 11] * 7)
    with pytest.raises(ValueError, match="alphabet zelda"):
        check_playable(ZELDA, level)


def test_dave_won_needs_chalice_and_door():
    level = dave(FLAT_DAVE)
    door = (5, 9)
    assert dave_won(level, (*door, 0, True))
    assert not dave_won(level, (*door, 0, False))
    assert not dave_won(level, (5, 5, 0, True))
