"""
Experiment configuration

A YAML file with one section per pipeline block is mapped onto dataclasses.
Unknown keys and invalid values raise ConfigError naming the dotted key.
"""

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_type_hints

import yaml

from backend.ensembles.trainer import ParentConfig, PruneTuneConfig, SnapshotConfig
from backend.engine.network import PRESETS
from backend.interpret.fourier import LensError, validate_color_matrix
from backend.interpret.saliency import SaliencyConfig
from backend.interpret.visualization import VizConfig
from backend.thread_pool_manager import resolve_worker_count

from .dataset import DatasetConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for unreadable or invalid experiment configuration"""


@dataclass
class VizSettings(VizConfig):
    layer: str = "final"
    channels: str = "all"
    random_neurons: int = 0
    include_parent: bool = True
    columns: int = 8

    def validate(self):
        super().validate()
        if self.layer != "final":
            try:
                int(self.layer)
            except ValueError:
                raise LensError(f"layer must be 'final' or a layer index, got {self.layer!r}")
        if self.channels != "all":
            try:
                parse_channels(self.channels)
            except ValueError:
                raise LensError(f"channels must be 'all' or a list like '0,1,5-7', "
                                f"got {self.channels!r}")
        if self.random_neurons < 0:
            raise LensError("random_neurons must be >= 0")


@dataclass
class SaliencySettings(SaliencyConfig):
    max_samples: int = 2000
    figures: int = 4

    def validate(self):
        super().validate()
        if self.max_samples < 1:
            raise LensError("max_samples must be >= 1")
        if self.figures < 0:
            raise LensError("figures must be >= 0")


@dataclass
class ExperimentConfig:
    seed: int = 0
    architecture: str = "desk"
    output_dir: str = "runs/desk"
    workers: int = 1
    record_timestamps: bool = False
    color_matrix: Any = "dataset"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    parent: ParentConfig = field(default_factory=ParentConfig)
    snapshot: SnapshotConfig = field(default_factory=SnapshotConfig)
    prune_tune: PruneTuneConfig = field(default_factory=PruneTuneConfig)
    viz: VizSettings = field(default_factory=VizSettings)
    saliency: SaliencySettings = field(default_factory=SaliencySettings)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of the resolved configuration"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def seeds(self) -> Dict[str, int]:
        return {"experiment": self.seed, "dataset": self.dataset.seed, "parent": self.parent.seed,
                "snapshot": self.snapshot.seed, "prune_tune": self.prune_tune.seed,
                "viz": self.viz.seed, "saliency": self.saliency.seed}

    def resolved_workers(self) -> int:
        return resolve_worker_count(self.workers)


# offsets applied to the top-level seed for blocks that do not set their own
SEED_OFFSETS = {"dataset": 0, "parent": 0, "snapshot": 1, "prune_tune": 2, "viz": 3, "saliency": 4}


def parse_channels(text: str) -> List[int]:
    """'0,2,5-7' -> [0, 2, 5, 6, 7]"""
    channels: List[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            start, end = part.split("-", 1)
            channels.extend(range(int(start), int(end) + 1))
        else:
            channels.append(int(part))
    if not channels or min(channels) < 0:
        raise ValueError(f"Invalid channel list {text!r}")
    return channels


def _coerce(value: Any, annotation, key: str) -> Any:
    origin = getattr(annotation, "__origin__", None)
    if origin is Union:
        options = [a for a in annotation.__args__ if a is not type(None)]
        if value is None:
            return None
        annotation = options[0]
    if annotation is Any:
        return value
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return str(value)
    return value


def _build(cls, data: Optional[Dict[str, Any]], prefix: str, base=None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected a mapping, got {type(data).__name__}")
    instance = copy.deepcopy(base) if base is not None else cls()
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"{dotted}: unknown key")
        annotation = hints[key]
        if dataclasses.is_dataclass(annotation):
            value = _build(annotation, value, dotted, getattr(instance, key))
        else:
            value = _coerce(value, annotation, dotted)
        setattr(instance, key, value)
    return instance


def _validate_block(block, prefix: str):
    validate = getattr(block, "validate", None)
    if validate is None:
        return
    try:
        validate()
    except ValueError as e:
        raise ConfigError(f"{prefix}: {e}") from e


def config_from_dict(data: Optional[Dict[str, Any]], base_dir: Optional[Path] = None
                     ) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    # derive block seeds before reading the blocks so explicit values win
    for block, offset in SEED_OFFSETS.items():
        section = data.get(block) or {}
        if isinstance(section, dict):
            section.setdefault("seed", seed + offset)
        data[block] = section
    config = _build(ExperimentConfig, data, "")

    if config.architecture not in PRESETS:
        raise ConfigError(f"architecture: unknown preset {config.architecture!r}; "
                          f"choose from {sorted(PRESETS)}")
    config.parent.architecture = config.architecture
    if config.workers < 0:
        raise ConfigError(f"workers: must be >= 0, got {config.workers}")
    if isinstance(config.color_matrix, str):
        if config.color_matrix not in ("dataset", "identity"):
            raise ConfigError(f"color_matrix: expected 'dataset', 'identity' or a square matrix, "
                              f"got {config.color_matrix!r}")
    else:
        try:
            config.color_matrix = validate_color_matrix(config.color_matrix).tolist()
        except (LensError, TypeError, ValueError) as e:
            raise ConfigError(f"color_matrix: {e}") from e

    if config.dataset.kind == "idx":
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            value = getattr(config.dataset, key)
            if value is None:
                continue
            path = Path(value)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"dataset.{key}: file not found: {path}")
            setattr(config.dataset, key, str(path))

    for name in ("dataset", "parent", "snapshot", "prune_tune", "viz", "saliency"):
        _validate_block(getattr(config, name), name)
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    config = config_from_dict(data, base_dir=path.parent)
    logger.info(f"Loaded config {path} (digest {config.digest()[:12]})")
    return config


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)
    return path

