"""
Run configuration shared by the command line and the experiment sweeps.

Defaults reproduce the reference Zelda setup (observation 5, goal set of 5,
full-size network and training). Named scales override the expensive knobs.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .generator import GenerationConfig
from .neuralnet import NetworkSpec, TrainConfig
from .podgen import DatasetConfig, ObservationSpec, Traversal
from .games import get_game

logger = logging.getLogger(__name__)


RUN_MANIFEST = "run_manifest.json"


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a run configuration."""


SCALES: Dict[str, Dict[str, Any]] = {
    "paper": {
        "conv_channels": [128, 128, 256],
        "epochs": 500,
        "dataset_size": 100_000,
        "trials": 10_000,
        "seeds": [1, 2, 3],
    },
    "desk": {
        "conv_channels": [16, 16, 32],
        "epochs": 60,
        "dataset_size": 20_000,
        "trials": 500,
        "seeds": [1, 2],
    },
}
# older name for the published settings
SCALES["full"] = SCALES["paper"]


@dataclass(frozen=True)
class RunConfig:
    game: str = "zelda"
    goals: str = "fixtures/zelda5"
    # use only the first N goal levels; None keeps them all
    goal_limit: Optional[int] = None
    obs_size: int = 5
    traversal: str = "random"
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    dataset_size: int = 100_000
    dataset_seed: int = 0
    stop_hamming: float = 0.0
    stop_histogram: Optional[float] = None
    conv_channels: List[int] = field(default_factory=lambda: [128, 128, 256])
    batch_size: int = 64
    learning_rate: float = 0.001
    epochs: int = 500
    trials: int = 10_000
    max_passes: int = 3
    generation_seed: int = 0
    unique_threshold: float = 0.10
    out: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "seeds", [int(s) for s in self.seeds])
        object.__setattr__(self, "conv_channels", [int(c) for c in self.conv_channels])
        try:
            get_game(self.game)
            Traversal(self.traversal)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not self.seeds:
            raise ConfigError("At least one training seed is required")
        if len(self.conv_channels) != 3:
            raise ConfigError(f"Need three conv channel counts, got {self.conv_channels}")
        if self.goal_limit is not None and self.goal_limit < 1:
            raise ConfigError(f"Goal limit must be positive, got {self.goal_limit}")
        if self.trials < 1 or self.dataset_size < 1:
            raise ConfigError("Trials and dataset size must be positive")
        if not 0.0 < self.unique_threshold <= 1.0:
            raise ConfigError(f"Uniqueness threshold must be in (0, 1], got {self.unique_threshold}")
        # the sub-configs validate the rest
        try:
            self.observation_spec()
            self.train_config()
            self.generation_config()
            self.dataset_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- derived configs -------------------------------------------------

    def observation_spec(self) -> ObservationSpec:
        return ObservationSpec.for_game(get_game(self.game), self.obs_size)

    def network_spec(self) -> NetworkSpec:
        game = get_game(self.game)
        return NetworkSpec.for_observation(self.observation_spec(), game.alphabet.size, self.conv_channels)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, epochs=self.epochs)

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(
            traversal=Traversal(self.traversal), max_passes=self.max_passes, seed=self.generation_seed
        )

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            target_example_count=self.dataset_size,
            traversal=Traversal(self.traversal),
            seed=self.dataset_seed,
            stop_hamming=self.stop_hamming,
            stop_histogram=self.stop_histogram,
        )

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Bad config value: {e}") from None

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"Config is not valid YAML: {e}") from None
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("Config file must hold a key-value mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_yaml(Path(path).read_text(encoding="utf-8"))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        unknown = sorted(set(overrides) - {f.name for f in fields(self)})
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        return replace(self, **overrides)

    def with_scale(self, scale: str) -> "RunConfig":
        if scale not in SCALES:
            raise ConfigError(f"Unknown scale '{scale}', expected one of {sorted(SCALES)}")
        return self.with_overrides(**SCALES[scale])

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_run_manifest(out_dir: Union[str, Path], files: List[Path]) -> Path:
    """
    List produced files (relative to out_dir) with their sha256 hashes.

    Entries already in the directory's manifest are kept, so several commands
    can share one output directory.
    """
    out_dir = Path(out_dir)
    path = out_dir / RUN_MANIFEST
    hashes: Dict[str, str] = {}
    if path.exists():
        try:
            hashes = {e["path"]: e["sha256"] for e in json.loads(path.read_text(encoding="utf-8"))["files"]}
        except (json.JSONDecodeError, KeyError, TypeError):
            logger.warning("Ignoring unreadable run manifest in %s", out_dir)
    for file in files:
        file = Path(file)
        hashes[file.relative_to(out_dir).as_posix()] = hashlib.sha256(file.read_bytes()).hexdigest()
    entries = [{"path": name, "sha256": hashes[name]} for name in sorted(hashes)]
    path.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
