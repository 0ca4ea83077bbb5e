"""
Gradient-based interpretability: feature visualisation and saliency maps
"""

from .fourier import (LensError, SpectrumImage, dataset_color_matrix, decode, encode,
                      fourier_param_init, validate_color_matrix)
from .saliency import SaliencyConfig, saliency, saliency_batch, smoothgrad, smoothgrad_batch
from .visualization import (VizConfig, VizObjective, VizResult, contact_sheet, random_neurons,
                            visualize, visualize_layer)

__all__ = [
    "LensError", "SpectrumImage", "dataset_color_matrix", "decode", "encode",
    "fourier_param_init", "validate_color_matrix",
    "SaliencyConfig", "saliency", "saliency_batch", "smoothgrad", "smoothgrad_batch",
    "VizConfig", "VizObjective", "VizResult", "contact_sheet", "random_neurons", "visualize",
    "visualize_layer",
]
