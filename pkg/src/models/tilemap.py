"""
Tile map representation shared by every stage of the pipeline.

Levels are stored as compact tile indices, row-major, addressed (row, col)
from the top-left corner. Alphabets own the mapping to the one-character text
format used for goal sets, datasets and traces.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Location = Tuple[int, int]


class LevelFormatError(ValueError):
    """Raised when level text cannot be parsed against an alphabet."""

    def __init__(self, message: str, row: int = -1, col: int = -1, char: str = ""):
        super().__init__(message)
        self.row = row
        self.col = col
        self.char = char


class DimensionMismatchError(ValueError):
    """Raised when two levels that must share a shape do not."""


@dataclass(frozen=True)
class TileAlphabet:
    game_id: str
    # ordered (tile_name, ascii_char) pairs; position is the tile index
    tiles: Tuple[Tuple[str, str], ...]

    def __post_init__(self):
        if len(self.tiles) < 2:
            raise ValueError(f"Alphabet needs at least 2 tiles, got {len(self.tiles)}")

        chars = [char for _, char in self.tiles]
        if any(len(char) != 1 for char in chars):
            raise ValueError(f"Tile chars must be single characters, got {chars}")
        if len(set(chars)) != len(chars):
            raise ValueError(f"Tile chars must be unique, got {chars}")

        names = [name for name, _ in self.tiles]
        if len(set(names)) != len(names):
            raise ValueError(f"Tile names must be unique, got {names}")

    @property
    def size(self) -> int:
        return len(self.tiles)

    @property
    def border_sentinel(self) -> int:
        """Pseudo-tile index used only when encoding observations past the map edge."""
        return len(self.tiles)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.tiles]

    @property
    def chars(self) -> List[str]:
        return [char for _, char in self.tiles]

    @cached_property
    def _char_index(self) -> Dict[str, int]:
        return {char: i for i, (_, char) in enumerate(self.tiles)}

    @cached_property
    def _name_index(self) -> Dict[str, int]:
        return {name: i for i, (name, _) in enumerate(self.tiles)}

    def index(self, name: str) -> int:
        try:
            return self._name_index[name]
        except KeyError:
            raise ValueError(f"Unknown tile '{name}' for game {self.game_id}") from None

    def index_of_char(self, char: str) -> int:
        try:
            return self._char_index[char]
        except KeyError:
            raise ValueError(f"Unknown tile char '{char}' for game {self.game_id}") from None

    def char(self, tile: int) -> str:
        if not 0 <= tile < self.size:
            raise ValueError(f"Tile index {tile} outside alphabet of size {self.size}")
        return self.tiles[tile][1]

    def validate(self, level: "LevelGrid") -> None:
        if level.cells.size and int(level.cells.max()) >= self.size:
            raise ValueError(
                f"Level holds tile index {int(level.cells.max())}, "
                f"alphabet {self.game_id} has {self.size} tiles"
            )


class LevelGrid:
    """Immutable rectangular grid of tile indices."""

    __slots__ = ("_cells",)

    def __init__(self, cells: Union[np.ndarray, Sequence[Sequence[int]]]):
        array = np.array(cells, dtype=np.int64)
        if array.ndim != 2 or array.shape[0] < 1 or array.shape[1] < 1:
            raise ValueError(f"Level must be a non-empty 2-D grid, got shape {array.shape}")
        if array.min() < 0:
            raise ValueError(f"Tile indices must be non-negative, got {int(array.min())}")
        if array.max() > 255:
            raise ValueError(f"Tile indices must fit in a byte, got {int(array.max())}")
        cells_u8 = array.astype(np.uint8)
        cells_u8.setflags(write=False)
        self._cells = cells_u8

    @property
    def cells(self) -> np.ndarray:
        return self._cells

    @property
    def height(self) -> int:
        return self._cells.shape[0]

    @property
    def width(self) -> int:
        return self._cells.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._cells.shape

    def __getitem__(self, location: Location) -> int:
        row, col = location
        return int(self._cells[row, col])

    def contains(self, location: Location) -> bool:
        row, col = location
        return 0 <= row < self.height and 0 <= col < self.width

    def with_tile(self, location: Location, tile: int) -> "LevelGrid":
        cells = self._cells.copy()
        cells[location] = tile
        return LevelGrid(cells)

    def to_array(self) -> np.ndarray:
        """Writable copy of the cells."""
        return self._cells.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, LevelGrid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._cells, other._cells))

    def __hash__(self) -> int:
        return hash((self.shape, self._cells.tobytes()))

    def __repr__(self) -> str:
        return f"LevelGrid(height={self.height}, width={self.width})"


def parse_level(text: str, alphabet: TileAlphabet) -> LevelGrid:
    """
    Parse newline-separated rows into a grid.

    A single trailing newline is ignored. Ragged rows and characters outside
    the alphabet raise LevelFormatError naming the position.
    """
    rows = text.split("\n")
    if rows and rows[-1] == "":
        rows = rows[:-1]
    if not rows or rows[0] == "":
        raise LevelFormatError("Level text is empty")

    width = len(rows[0])
    cells = []
    for r, line in enumerate(rows):
        if len(line) != width:
            raise LevelFormatError(
                f"Ragged row {r}: expected {width} tiles, got {len(line)}", row=r
            )
        row_cells = []
        for c, char in enumerate(line):
            try:
                row_cells.append(alphabet._char_index[char])
            except KeyError:
                raise LevelFormatError(
                    f"Unknown char {char!r} at ({r},{c}) for game {alphabet.game_id}",
                    row=r, col=c, char=char,
                ) from None
        cells.append(row_cells)
    return LevelGrid(cells)


def serialize_level(level: LevelGrid, alphabet: TileAlphabet) -> str:
    chars = alphabet.chars
    return "\n".join("".join(chars[t] for t in row) for row in level.cells.tolist())


def _check_same_shape(a: LevelGrid, b: LevelGrid) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Level shapes differ: {a.shape} vs {b.shape}")


def hamming_distance(a: LevelGrid, b: LevelGrid) -> int:
    _check_same_shape(a, b)
    return int(np.count_nonzero(a.cells != b.cells))


def normalized_hamming(a: LevelGrid, b: LevelGrid) -> float:
    return hamming_distance(a, b) / float(a.height * a.width)


def load_levels(path: Union[str, Path], alphabet: TileAlphabet) -> List[LevelGrid]:
    """
    Load every level under a path.

    A directory contributes its *.txt files in name order; a file may hold
    several levels separated by blank lines.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.txt"))
    elif path.is_file():
        files = [path]
    else:
        raise FileNotFoundError(f"No level file or directory at {path}")

    levels = []
    for file in files:
        blocks = [b for b in file.read_text(encoding="utf-8").replace("\r\n", "\n").split("\n\n")]
        for block in blocks:
            block = block.strip("\n")
            if not block:
                continue
            try:
                levels.append(parse_level(block, alphabet))
            except LevelFormatError as e:
                raise LevelFormatError(f"{file}: {e}", row=e.row, col=e.col, char=e.char) from None
    logger.debug("Loaded %d levels from %s", len(levels), path)
    return levels


def goal_set_hash(levels: Iterable[LevelGrid], alphabet: TileAlphabet) -> str:
    digest = hashlib.sha256()
    for level in levels:
        digest.update(serialize_level(level, alphabet).encode("utf-8"))
        digest.update(b"\n\n")
    return digest.hexdigest()
