"""
Reverse-mode differentiation engine and layer zoo
"""

from .tensor import (Graph, GraphError, NumericalError, ShapeError, Tensor, backward,
                     record_op)
from .network import Network, build_network, forward, predict_proba
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import gradient_check

__all__ = [
    "Graph", "GraphError", "NumericalError", "ShapeError", "Tensor", "backward", "record_op",
    "Network", "build_network", "forward", "predict_proba",
    "CheckpointError", "load_checkpoint", "save_checkpoint", "gradient_check",
]
