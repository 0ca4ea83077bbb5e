"""
Ensemble construction: anti-random masks, snapshot and prune-and-tune children
"""

from .masks import (MaskError, PruneMask, antirandom_pair, apply_mask, cartesian_distance,
                    random_mask)
from .ensemble import (ChildRecord, ChildSpec, EnsembleError, EnsembleRun, Origin,
                       ensemble_predict, evaluate, member_predictions)
from .trainer import (ParentConfig, PruneTuneConfig, SnapshotConfig, TrainingDivergedError,
                      prune_tune_children, snapshot_children, train_parent)

__all__ = [
    "MaskError", "PruneMask", "antirandom_pair", "apply_mask", "cartesian_distance", "random_mask",
    "ChildRecord", "ChildSpec", "EnsembleError", "EnsembleRun", "Origin", "ensemble_predict",
    "evaluate", "member_predictions",
    "ParentConfig", "PruneTuneConfig", "SnapshotConfig", "TrainingDivergedError",
    "prune_tune_children", "snapshot_children", "train_parent",
]
