"""
Ensemble run records, child provenance and ensemble prediction
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from backend.diversity_metrics import calibration_metrics
from backend.engine.checkpoint import load_checkpoint
from backend.engine.network import Network, predict_proba

from .masks import PruneMask

logger = logging.getLogger(__name__)


class EnsembleError(ValueError):
    """Raised for inconsistent ensemble runs"""


class Origin(Enum):
    SNAPSHOT = "snapshot"
    PRUNE_AND_TUNE = "prune_and_tune"


@dataclass
class ChildSpec:
    """How one child network was produced"""
    origin: Origin
    seed: int
    schedule: Dict[str, Any] = field(default_factory=dict)
    mask: Optional[PruneMask] = None
    epochs: int = 0

    def __post_init__(self):
        if (self.mask is not None) != (self.origin is Origin.PRUNE_AND_TUNE):
            raise EnsembleError("A mask is required for prune-and-tune children and only for them")

    def to_dict(self) -> Dict[str, Any]:
        record = {
            "origin": self.origin.value,
            "seed": self.seed,
            "schedule": self.schedule,
            "epochs": self.epochs,
        }
        if self.mask is not None:
            record["mask"] = self.mask.summary()
        return record


@dataclass
class ChildRecord:
    name: str
    checkpoint: str
    spec: Dict[str, Any]
    val_accuracy: Optional[float] = None


@dataclass
class EnsembleRun:
    """Parent checkpoint plus the children derived from it"""
    method: str
    parent_checkpoint: str
    children: List[ChildRecord] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def child_paths(self) -> List[str]:
        return [child.checkpoint for child in self.children]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "parent_checkpoint": self.parent_checkpoint,
            "children": [asdict(child) for child in self.children],
            "metadata": self.metadata,
        }

    def save_manifest(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        logger.info(f"Wrote {self.method} manifest {path} ({len(self.children)} children)")
        return path

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EnsembleRun":
        children = [ChildRecord(**child) for child in data.get("children", [])]
        return cls(method=data["method"], parent_checkpoint=data["parent_checkpoint"],
                   children=children, metadata=data.get("metadata", {}))

    @classmethod
    def load_manifest(cls, path: Union[str, Path]) -> "EnsembleRun":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def load_children(self) -> List[Network]:
        """Load every child, checking each shares the parent's architecture"""
        parent, _ = load_checkpoint(self.parent_checkpoint)
        networks = []
        for child in self.children:
            net, _ = load_checkpoint(child.checkpoint)
            if not net.same_architecture(parent):
                raise EnsembleError(f"Child {child.name} does not share the parent's architecture")
            networks.append(net)
        return networks


def ensemble_predict(members: Union[EnsembleRun, Sequence[Network]], x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the members' softmax outputs"""
    networks = members.load_children() if isinstance(members, EnsembleRun) else list(members)
    if not networks:
        raise EnsembleError("An ensemble needs at least one child")
    total = None
    for net in networks:
        probs = predict_proba(net, x)
        total = probs if total is None else total + probs
    return total / len(networks)


def member_predictions(networks: Sequence[Network], x: np.ndarray) -> np.ndarray:
    """(models, samples, classes) softmax outputs"""
    return np.stack([predict_proba(net, x) for net in networks], axis=0)


def evaluate(net: Network, x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
    """Accuracy, NLL and ECE of a single network"""
    return calibration_metrics(predict_proba(net, x), y)
