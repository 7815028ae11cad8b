"""
Game definitions and playability checks for Zelda, Sokoban and Danger Dave.

Zelda is checked with a flood fill. Sokoban is solved with A* over
(player, crate set) states. Danger Dave is solved with a breadth-first search
over a small discrete platformer model:

- gravity pulls the player down one tile per step while the cell below is
  not solid; falling may drift one tile left or right
- standing on solid ground the player may step left/right or jump
- a jump rises at most 2 tiles (each rise step may drift one tile sideways),
  then the player falls; a ceiling ends the rise early
- entering a spike is death, the chalice is collected on entry, and the door
  only wins once the chalice is held

Everything outside the map counts as solid.
"""
from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import numpy as np
from scipy import ndimage

from .tilemap import DimensionMismatchError, LevelGrid, Location, TileAlphabet

logger = logging.getLogger(__name__)


ZELDA_ALPHABET = TileAlphabet(
    game_id="zelda",
    tiles=(
        ("empty", "."),
        ("wall", "w"),
        ("player", "A"),
        ("key", "+"),
        ("door", "g"),
        ("bat", "1"),
        ("scorpion", "2"),
        ("spider", "3"),
    ),
)

SOKOBAN_ALPHABET = TileAlphabet(
    game_id="sokoban",
    tiles=(
        ("empty", "."),
        ("wall", "#"),
        ("player", "@"),
        ("crate", "$"),
        ("target", "o"),
        ("crate_on_target", "*"),
        ("player_on_target", "%"),
    ),
)

DAVE_ALPHABET = TileAlphabet(
    game_id="dave",
    tiles=(
        ("empty", "."),
        ("solid", "#"),
        ("player", "A"),
        ("chalice", "H"),
        ("door", "g"),
        ("spike", "x"),
        ("diamond", "$"),
    ),
)

DEFAULT_SOKOBAN_BUDGET = 200_000
DEFAULT_DAVE_BUDGET = 100_000


def uniform_weights(alphabet: TileAlphabet) -> Tuple[float, ...]:
    return tuple([1.0 / alphabet.size] * alphabet.size)


@dataclass(frozen=True)
class GameSpec:
    game_id: str
    alphabet: TileAlphabet
    level_height: int
    level_width: int
    default_obs_size: int
    noise_weights: Tuple[float, ...]
    # max expanded states for solver-based games; None for Zelda
    solver_budget: Optional[int] = None

    def __post_init__(self):
        if self.default_obs_size < 3 or self.default_obs_size % 2 == 0:
            raise ValueError(f"Default observation size must be odd and >= 3, got {self.default_obs_size}")

        if self.level_height < 1 or self.level_width < 1:
            raise ValueError(f"Level dimensions must be positive, got {self.level_height}x{self.level_width}")

        if len(self.noise_weights) != self.alphabet.size:
            raise ValueError(
                f"Need one noise weight per tile ({self.alphabet.size}), got {len(self.noise_weights)}"
            )
        if any(w < 0 for w in self.noise_weights):
            raise ValueError(f"Noise weights must be non-negative, got {self.noise_weights}")
        if abs(sum(self.noise_weights) - 1.0) > 1e-9:
            raise ValueError(f"Noise weights must sum to 1, got {sum(self.noise_weights)}")

        if self.solver_budget is not None and self.solver_budget < 1:
            raise ValueError(f"Solver budget must be positive, got {self.solver_budget}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.level_height, self.level_width)

    def with_noise_weights(self, weights: Iterable[float]) -> "GameSpec":
        return GameSpec(
            game_id=self.game_id,
            alphabet=self.alphabet,
            level_height=self.level_height,
            level_width=self.level_width,
            default_obs_size=self.default_obs_size,
            noise_weights=tuple(float(w) for w in weights),
            solver_budget=self.solver_budget,
        )


ZELDA = GameSpec("zelda", ZELDA_ALPHABET, 7, 11, 5, uniform_weights(ZELDA_ALPHABET))
SOKOBAN = GameSpec(
    "sokoban", SOKOBAN_ALPHABET, 5, 5, 3, uniform_weights(SOKOBAN_ALPHABET), DEFAULT_SOKOBAN_BUDGET
)
DAVE = GameSpec("dave", DAVE_ALPHABET, 7, 11, 5, uniform_weights(DAVE_ALPHABET), DEFAULT_DAVE_BUDGET)

GAMES: Dict[str, GameSpec] = {game.game_id: game for game in (ZELDA, SOKOBAN, DAVE)}


def get_game(game_id: str) -> GameSpec:
    try:
        return GAMES[game_id]
    except KeyError:
        raise ValueError(f"Unknown game '{game_id}', expected one of {sorted(GAMES)}") from None


class PlayabilityReason(Enum):
    OK = "ok"
    BAD_TILE_COUNTS = "bad tile counts"
    UNREACHABLE_OBJECTIVE = "unreachable objective"
    BUDGET_EXHAUSTED = "solver budget exhausted"
    NO_SOLUTION = "no solution"


@dataclass(frozen=True)
class PlayabilityResult:
    playable: bool
    reason: PlayabilityReason
    solution_length: Optional[int] = None
    # move names for solver-based games, empty otherwise
    solution: Tuple[str, ...] = field(default=(), compare=False)
    expanded: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.playable != (self.reason is PlayabilityReason.OK):
            raise ValueError(f"Playable={self.playable} is inconsistent with reason {self.reason.value}")

    def __str__(self) -> str:
        if self.playable:
            if self.solution_length is None:
                return "playable"
            return f"playable, moves={self.solution_length}"
        return f"unplayable, {self.reason.value}"


def _fail(reason: PlayabilityReason, expanded: int = 0) -> PlayabilityResult:
    return PlayabilityResult(playable=False, reason=reason, expanded=expanded)


def count_tiles(level: LevelGrid, tile: int) -> int:
    return int(np.count_nonzero(level.cells == tile))


def reachable_set(level: LevelGrid, start: Location, passable: Iterable[int]) -> Set[Location]:
    """4-connected flood fill over passable tiles. The start cell is always included."""
    if not level.contains(start):
        raise ValueError(f"Start {start} outside level of shape {level.shape}")

    mask = np.isin(level.cells, list(passable))
    mask[start] = True
    # default structuring element is the 4-neighbour cross
    labels, _ = ndimage.label(mask)
    component = labels == labels[start]
    return {(int(r), int(c)) for r, c in np.argwhere(component)}


def _single_position(level: LevelGrid, tiles: Iterable[int]) -> Optional[Location]:
    positions = np.argwhere(np.isin(level.cells, list(tiles)))
    if len(positions) != 1:
        return None
    return int(positions[0][0]), int(positions[0][1])


# ---------------------------------------------------------------------------
# Zelda
# ---------------------------------------------------------------------------

def check_zelda(level: LevelGrid) -> PlayabilityResult:
    a = ZELDA_ALPHABET
    player, key, door = a.index("player"), a.index("key"), a.index("door")

    if any(count_tiles(level, t) != 1 for t in (player, key, door)):
        return _fail(PlayabilityReason.BAD_TILE_COUNTS)

    start = _single_position(level, [player])
    key_at = _single_position(level, [key])
    door_at = _single_position(level, [door])

    # enemies can be fought or avoided, so only walls block
    wall = a.index("wall")
    passable = [t for t in range(a.size) if t != wall]
    reachable = reachable_set(level, start, passable)
    if key_at not in reachable or door_at not in reachable:
        return _fail(PlayabilityReason.UNREACHABLE_OBJECTIVE)
    return PlayabilityResult(playable=True, reason=PlayabilityReason.OK)


# ---------------------------------------------------------------------------
# Sokoban
# ---------------------------------------------------------------------------

SOKOBAN_DIRECTIONS: Dict[str, Tuple[int, int]] = {
    "u": (-1, 0),
    "d": (1, 0),
    "l": (0, -1),
    "r": (0, 1),
}


@dataclass(frozen=True)
class _SokobanBoard:
    height: int
    width: int
    walls: FrozenSet[Location]
    targets: FrozenSet[Location]
    player: Optional[Location]
    crates: FrozenSet[Location]
    player_count: int

    def blocked(self, location: Location) -> bool:
        r, c = location
        return not (0 <= r < self.height and 0 <= c < self.width) or location in self.walls

    def is_dead_corner(self, location: Location) -> bool:
        if location in self.targets:
            return False
        r, c = location
        vertical = self.blocked((r - 1, c)) or self.blocked((r + 1, c))
        horizontal = self.blocked((r, c - 1)) or self.blocked((r, c + 1))
        return vertical and horizontal


def _sokoban_board(level: LevelGrid) -> _SokobanBoard:
    a = SOKOBAN_ALPHABET
    wall, player, crate, target = a.index("wall"), a.index("player"), a.index("crate"), a.index("target")
    crate_on_target, player_on_target = a.index("crate_on_target"), a.index("player_on_target")

    walls, targets, crates, players = set(), set(), set(), []
    for (r, c), tile in np.ndenumerate(level.cells):
        location = (int(r), int(c))
        if tile == wall:
            walls.add(location)
        if tile in (target, crate_on_target, player_on_target):
            targets.add(location)
        if tile in (crate, crate_on_target):
            crates.add(location)
        if tile in (player, player_on_target):
            players.append(location)

    return _SokobanBoard(
        height=level.height,
        width=level.width,
        walls=frozenset(walls),
        targets=frozenset(targets),
        player=players[0] if len(players) == 1 else None,
        crates=frozenset(crates),
        player_count=len(players),
    )


def _sokoban_heuristic(crates: FrozenSet[Location], targets: FrozenSet[Location]) -> int:
    # each move pushes at most one crate by one tile
    return sum(min(abs(cr - tr) + abs(cc - tc) for tr, tc in targets) for cr, cc in crates)


def sokoban_successors(
        board: _SokobanBoard,
        player: Location,
        crates: FrozenSet[Location],
        prune_deadlocks: bool = True,
) -> List[Tuple[str, Location, FrozenSet[Location]]]:
    """Walk moves are lowercase, pushes uppercase."""
    moves = []
    for name, (dr, dc) in SOKOBAN_DIRECTIONS.items():
        step = (player[0] + dr, player[1] + dc)
        if board.blocked(step):
            continue
        if step in crates:
            beyond = (step[0] + dr, step[1] + dc)
            if board.blocked(beyond) or beyond in crates:
                continue
            if prune_deadlocks and board.is_dead_corner(beyond):
                continue
            moves.append((name.upper(), step, (crates - {step}) | {beyond}))
        else:
            moves.append((name, step, crates))
    return moves


def solve_sokoban(level: LevelGrid, budget: int = DEFAULT_SOKOBAN_BUDGET) -> PlayabilityResult:
    board = _sokoban_board(level)
    if board.player_count != 1 or len(board.crates) != len(board.targets) or not board.crates:
        return _fail(PlayabilityReason.BAD_TILE_COUNTS)

    if any(board.is_dead_corner(crate) for crate in board.crates):
        return _fail(PlayabilityReason.NO_SOLUTION)

    start = (board.player, board.crates)
    best_cost = {start: 0}
    parents: Dict[tuple, Tuple[Optional[tuple], Optional[str]]] = {start: (None, None)}
    counter = 0
    frontier = [(_sokoban_heuristic(board.crates, board.targets), counter, 0, start)]
    closed = set()
    expanded = 0

    while frontier:
        _, _, cost, state = heapq.heappop(frontier)
        if state in closed:
            continue
        player, crates = state
        if crates == board.targets:
            solution = _reconstruct(parents, state)
            return PlayabilityResult(
                playable=True,
                reason=PlayabilityReason.OK,
                solution_length=len(solution),
                solution=solution,
                expanded=expanded,
            )

        if expanded >= budget:
            logger.debug("Sokoban search hit budget of %d states", budget)
            return _fail(PlayabilityReason.BUDGET_EXHAUSTED, expanded)
        closed.add(state)
        expanded += 1

        for move, next_player, next_crates in sokoban_successors(board, player, crates):
            child = (next_player, next_crates)
            if child in closed or best_cost.get(child, cost + 2) <= cost + 1:
                continue
            best_cost[child] = cost + 1
            parents[child] = (state, move)
            counter += 1
            priority = cost + 1 + _sokoban_heuristic(next_crates, board.targets)
            heapq.heappush(frontier, (priority, counter, cost + 1, child))

    return _fail(PlayabilityReason.NO_SOLUTION, expanded)


def apply_sokoban_moves(level: LevelGrid, moves: Iterable[str]) -> LevelGrid:
    """
    Replay moves through the Sokoban rules and return the resulting grid.

    Case is ignored on input; whether a step pushes is decided by the board.
    """
    board = _sokoban_board(level)
    if board.player is None:
        raise ValueError(f"Sokoban replay needs exactly one player, found {board.player_count}")

    player, crates = board.player, set(board.crates)
    for i, move in enumerate(moves):
        dr, dc = SOKOBAN_DIRECTIONS[move.lower()]
        step = (player[0] + dr, player[1] + dc)
        if board.blocked(step):
            raise ValueError(f"Move {i} ({move}) walks into a wall at {step}")
        if step in crates:
            beyond = (step[0] + dr, step[1] + dc)
            if board.blocked(beyond) or beyond in crates:
                raise ValueError(f"Move {i} ({move}) pushes a crate into {beyond}")
            crates.remove(step)
            crates.add(beyond)
        player = step

    a = SOKOBAN_ALPHABET
    cells = np.full(level.shape, a.index("empty"), dtype=np.int64)
    for location in board.walls:
        cells[location] = a.index("wall")
    for location in board.targets:
        cells[location] = a.index("target")
    for location in crates:
        on_target = location in board.targets
        cells[location] = a.index("crate_on_target" if on_target else "crate")
    cells[player] = a.index("player_on_target" if player in board.targets else "player")
    return LevelGrid(cells)


def sokoban_solved(level: LevelGrid) -> bool:
    board = _sokoban_board(level)
    return bool(board.crates) and board.crates == board.targets


# ---------------------------------------------------------------------------
# Danger Dave
# ---------------------------------------------------------------------------

# (row, col, rise steps left, has chalice)
DaveState = Tuple[int, int, int, bool]

JUMP_HEIGHT = 2


@dataclass(frozen=True)
class _DaveMap:
    solid: np.ndarray
    spikes: np.ndarray
    chalice: np.ndarray
    door: np.ndarray


def _dave_map(level: LevelGrid) -> _DaveMap:
    a = DAVE_ALPHABET
    cells = level.cells
    return _DaveMap(
        solid=cells == a.index("solid"),
        spikes=cells == a.index("spike"),
        chalice=cells == a.index("chalice"),
        door=cells == a.index("door"),
    )


def _dave_solid(solid: np.ndarray, r: int, c: int) -> bool:
    height, width = solid.shape
    if not (0 <= r < height and 0 <= c < width):
        return True
    return bool(solid[r, c])


def dave_start_state(level: LevelGrid) -> Optional[DaveState]:
    location = _single_position(level, [DAVE_ALPHABET.index("player")])
    if location is None:
        return None
    return (location[0], location[1], 0, False)


def dave_successors(level: LevelGrid, state: DaveState) -> List[Tuple[str, DaveState]]:
    """
    Legal moves from a state, spike deaths excluded.

    Diagonal moves go vertical first, so both the vertical neighbour and the
    target must be free of solid tiles.
    """
    return _dave_moves(_dave_map(level), state)


def _dave_moves(tiles: _DaveMap, state: DaveState) -> List[Tuple[str, DaveState]]:
    solid = tiles.solid
    r, c, rise, has_chalice = state

    def free(rr: int, cc: int) -> bool:
        return not _dave_solid(solid, rr, cc)

    candidates: List[Tuple[str, int, int, int]] = []
    if rise > 0:
        if free(r - 1, c):
            candidates.append(("rise", r - 1, c, rise - 1))
            for name, dc in (("rise_left", -1), ("rise_right", 1)):
                if free(r - 1, c + dc):
                    candidates.append((name, r - 1, c + dc, rise - 1))
        else:
            # ceiling: the jump ends where it is
            candidates.append(("bump", r, c, 0))
            for name, dc in (("bump_left", -1), ("bump_right", 1)):
                if free(r, c + dc):
                    candidates.append((name, r, c + dc, 0))
    elif _dave_solid(solid, r + 1, c):
        for name, dc in (("left", -1), ("right", 1)):
            if free(r, c + dc):
                candidates.append((name, r, c + dc, 0))
        if free(r - 1, c):
            candidates.append(("jump", r - 1, c, JUMP_HEIGHT - 1))
            for name, dc in (("jump_left", -1), ("jump_right", 1)):
                if free(r - 1, c + dc):
                    candidates.append((name, r - 1, c + dc, JUMP_HEIGHT - 1))
    else:
        candidates.append(("fall", r + 1, c, 0))
        for name, dc in (("fall_left", -1), ("fall_right", 1)):
            if free(r + 1, c + dc):
                candidates.append((name, r + 1, c + dc, 0))

    successors = []
    for name, nr, nc, nrise in candidates:
        if tiles.spikes[nr, nc]:
            continue
        collected = has_chalice or tiles.chalice[nr, nc]
        successors.append((name, (nr, nc, nrise, bool(collected))))
    return successors


def dave_won(level: LevelGrid, state: DaveState) -> bool:
    return _dave_won(_dave_map(level), state)


def _dave_won(tiles: _DaveMap, state: DaveState) -> bool:
    r, c, _, has_chalice = state
    return has_chalice and bool(tiles.door[r, c])


def solve_dave(level: LevelGrid, budget: int = DEFAULT_DAVE_BUDGET) -> PlayabilityResult:
    a = DAVE_ALPHABET
    if any(count_tiles(level, a.index(t)) != 1 for t in ("player", "chalice", "door")):
        return _fail(PlayabilityReason.BAD_TILE_COUNTS)

    start = dave_start_state(level)
    tiles = _dave_map(level)
    parents: Dict[DaveState, Tuple[Optional[DaveState], Optional[str]]] = {start: (None, None)}
    queue = deque([start])
    expanded = 0

    while queue:
        if expanded >= budget:
            logger.debug("Dave search hit budget of %d states", budget)
            return _fail(PlayabilityReason.BUDGET_EXHAUSTED, expanded)
        state = queue.popleft()
        expanded += 1
        for move, child in _dave_moves(tiles, state):
            if child in parents:
                continue
            parents[child] = (state, move)
            if _dave_won(tiles, child):
                solution = _reconstruct(parents, child)
                return PlayabilityResult(
                    playable=True,
                    reason=PlayabilityReason.OK,
                    solution_length=len(solution),
                    solution=solution,
                    expanded=expanded,
                )
            queue.append(child)

    return _fail(PlayabilityReason.NO_SOLUTION, expanded)


def _reconstruct(parents: dict, state) -> Tuple[str, ...]:
    moves = []
    while True:
        state, move = parents[state]
        if move is None:
            return tuple(reversed(moves))
        moves.append(move)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def _zelda_checker(game: GameSpec, level: LevelGrid) -> PlayabilityResult:
    return check_zelda(level)


def _sokoban_checker(game: GameSpec, level: LevelGrid) -> PlayabilityResult:
    return solve_sokoban(level, game.solver_budget or DEFAULT_SOKOBAN_BUDGET)


def _dave_checker(game: GameSpec, level: LevelGrid) -> PlayabilityResult:
    return solve_dave(level, game.solver_budget or DEFAULT_DAVE_BUDGET)


_CHECKERS: Dict[str, Callable[[GameSpec, LevelGrid], PlayabilityResult]] = {
    "zelda": _zelda_checker,
    "sokoban": _sokoban_checker,
    "dave": _dave_checker,
}


def check_playable(game: GameSpec, level: LevelGrid) -> PlayabilityResult:
    if level.shape != game.shape:
        raise DimensionMismatchError(
            f"Level shape {level.shape} does not match {game.game_id} shape {game.shape}"
        )
    game.alphabet.validate(level)
    return _CHECKERS[game.game_id](game, level)
