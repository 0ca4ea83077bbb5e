"""
Diversity Metrics
Output-space diversity of an ensemble: pairwise KL divergence, prediction
disagreement ratio, the bias-variance-covariance decomposition of the ensemble
MSE, calibration summaries, and the prediction file formats the CLI reads
"""

import csv
import logging
import math
import struct
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SUM_TOLERANCE = 1e-9
PREDICTION_MAGIC = b"EDPR"


class MetricsError(ValueError):
    """Raised for malformed prediction sets or prediction files"""


@dataclass
class PredictionSet:
    """Softmax outputs of M models on N samples over C classes"""
    probs: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise MetricsError(f"Predictions must have shape (models, samples, classes), "
                               f"got {self.probs.shape}")
        if min(self.probs.shape) < 1:
            raise MetricsError(f"Empty prediction set {self.probs.shape}")
        if not np.all(np.isfinite(self.probs)) or np.any(self.probs < 0):
            raise MetricsError("Probabilities must be finite and nonnegative")
        sums = self.probs.sum(axis=2)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > SUM_TOLERANCE:
            raise MetricsError(f"Distribution rows must sum to 1 (worst deviation {worst:.3g})")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.samples,):
                raise MetricsError(f"Expected {self.samples} labels, got shape {self.labels.shape}")
            if self.labels.min() < 0 or self.labels.max() >= self.classes:
                raise MetricsError(f"Labels must lie in [0, {self.classes})")

    @property
    def models(self) -> int:
        return self.probs.shape[0]

    @property
    def samples(self) -> int:
        return self.probs.shape[1]

    @property
    def classes(self) -> int:
        return self.probs.shape[2]

    def ensemble(self) -> np.ndarray:
        return self.probs.mean(axis=0)


def _require_pairs(p: PredictionSet):
    if p.models < 2:
        raise MetricsError(f"Pairwise metrics need at least 2 models, got {p.models}")


def _floored(probs: np.ndarray) -> np.ndarray:
    floored = np.maximum(probs, PROB_FLOOR)
    return floored / floored.sum(axis=-1, keepdims=True)


def kl_matrix(p: PredictionSet) -> np.ndarray:
    """[i, j] = mean over samples of KL(f_i || f_j); the diagonal is exactly 0"""
    _require_pairs(p)
    probs = _floored(p.probs)
    logs = np.log(probs)
    matrix = np.zeros((p.models, p.models))
    for i in range(p.models):
        for j in range(p.models):
            if i != j:
                matrix[i, j] = float(np.mean(np.sum(probs[i] * (logs[i] - logs[j]), axis=1)))
    if np.any(~np.isfinite(matrix)):
        raise MetricsError("KL divergence is not finite after flooring")
    # negative values can only be rounding residue (Gibbs inequality)
    return np.maximum(matrix, 0.0)


def kl_pairwise(p: PredictionSet) -> float:
    """Mean KL divergence over all ordered pairs of distinct models"""
    matrix = kl_matrix(p)
    off_diagonal = ~np.eye(p.models, dtype=bool)
    return float(matrix[off_diagonal].mean())


def predicted_labels(p: PredictionSet) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(p.probs, axis=2)


def pdr_matrix(p: PredictionSet) -> np.ndarray:
    """Symmetric matrix of pairwise argmax disagreement fractions"""
    _require_pairs(p)
    labels = predicted_labels(p)
    matrix = np.zeros((p.models, p.models))
    for i, j in combinations(range(p.models), 2):
        matrix[i, j] = matrix[j, i] = float(np.mean(labels[i] != labels[j]))
    return matrix


def pdr(p: PredictionSet) -> float:
    """Mean disagreement ratio over unordered model pairs"""
    matrix = pdr_matrix(p)
    return float(np.mean([matrix[i, j] for i, j in combinations(range(p.models), 2)]))


@dataclass
class Decomposition:
    """Ensemble MSE split into bias, variance and covariance terms"""
    bias_bar: float
    var_bar: float
    covar_bar: Optional[float]
    mse: float
    models: int

    def recomposed(self) -> float:
        if self.covar_bar is None:
            return self.bias_bar ** 2 + self.var_bar
        m = self.models
        return self.bias_bar ** 2 + self.var_bar / m + (1.0 - 1.0 / m) * self.covar_bar

    def residual(self) -> float:
        return abs(self.mse - self.recomposed())


def bias_var_covar(predictions, targets) -> Decomposition:
    """Decompose the MSE of the equally weighted ensemble of scalar regressors

    Expectations are empirical means over the N samples of the errors d_i = f_i - y,
    with population (1/N) variances and covariances, so the identity is exact up to
    rounding. With a single model the covariance term is absent.
    """
    f = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if f.ndim == 1:
        f = f[None, :]
    if f.ndim != 2 or y.shape != (f.shape[1],):
        raise MetricsError(f"Expected predictions (M, N) and targets (N,), "
                           f"got {f.shape} and {y.shape}")
    if f.shape[1] < 1:
        raise MetricsError("At least one sample is required")
    m = f.shape[0]
    errors = f - y[None, :]
    centred = errors - errors.mean(axis=1, keepdims=True)
    covariance = centred @ centred.T / f.shape[1]

    bias_bar = float(errors.mean())
    var_bar = float(np.trace(covariance) / m)
    covar_bar = None
    if m > 1:
        covar_bar = float((covariance.sum() - np.trace(covariance)) / (m * (m - 1)))
    mse = float(np.mean((f.mean(axis=0) - y) ** 2))
    return Decomposition(bias_bar=bias_bar, var_bar=var_bar, covar_bar=covar_bar, mse=mse,
                         models=m)


def calibration_metrics(probs: np.ndarray, labels: np.ndarray, bins: int = 15) -> Dict[str, float]:
    """Accuracy, mean NLL and expected calibration error over equal-width confidence bins"""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise MetricsError(f"Expected probs (N, C) and labels (N,), "
                           f"got {probs.shape} and {labels.shape}")
    if len(labels) == 0:
        raise MetricsError("Calibration metrics need at least one sample")
    confidence = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    nll = -np.log(np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR))

    edges = np.linspace(0.0, 1.0, bins + 1)
    ece = 0.0
    for lower, upper in zip(edges[:-1], edges[1:]):
        in_bin = (confidence > lower) & (confidence <= upper)
        if in_bin.any():
            ece += in_bin.mean() * abs(correct[in_bin].mean() - confidence[in_bin].mean())
    return {"accuracy": float(correct.mean()), "nll": float(nll.mean()), "ece": float(ece)}


# Report rows


@dataclass
class MetricRow:
    method: str
    metric: str
    mean: float
    stderr: float
    n: int

    def as_list(self) -> list:
        return [self.method, self.metric, self.mean, self.stderr, self.n]


ROW_FIELDS = ("method", "metric", "mean", "stderr", "n")


def mean_stderr(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); stderr is 0 for fewer than 2 values"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise MetricsError("Cannot summarise an empty list of values")
    if values.size < 2:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def diversity_rows(method: str, p: PredictionSet) -> List[MetricRow]:
    """d_kl and d_pdr summarised over model pairs, plus ensemble calibration when labelled"""
    off_diagonal = ~np.eye(p.models, dtype=bool)
    kl_values = kl_matrix(p)[off_diagonal]
    pdr_m = pdr_matrix(p)
    pdr_values = [pdr_m[i, j] for i, j in combinations(range(p.models), 2)]
    rows = [
        MetricRow(method, "d_kl", *mean_stderr(kl_values), n=int(kl_values.size)),
        MetricRow(method, "d_pdr", *mean_stderr(pdr_values), n=len(pdr_values)),
    ]
    if p.labels is not None:
        for name, value in calibration_metrics(p.ensemble(), p.labels).items():
            rows.append(MetricRow(method, f"ensemble_{name}", value, 0.0, n=p.samples))
    return rows


# Prediction files


def write_predictions(probs: np.ndarray, path: Union[str, Path]) -> Path:
    """EDPR binary, or CSV when the path ends in .csv"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    probs = np.asarray(probs, dtype=np.float64)
    if path.suffix.lower() == ".csv":
        if probs.ndim != 3:
            raise MetricsError(f"CSV predictions must be (models, samples, classes), got {probs.shape}")
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["model", "sample"] + [f"p{c}" for c in range(probs.shape[2])])
            for m in range(probs.shape[0]):
                for n in range(probs.shape[1]):
                    writer.writerow([m, n] + [repr(float(v)) for v in probs[m, n]])
    else:
        header = PREDICTION_MAGIC + struct.pack("<I", probs.ndim)
        header += struct.pack(f"<{probs.ndim}I", *probs.shape)
        path.write_bytes(header + probs.astype("<f8").tobytes())
    logger.debug(f"Wrote predictions {probs.shape} to {path}")
    return path


def read_predictions(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MetricsError(f"Prediction file not found: {path}")
    if path.suffix.lower() == ".csv":
        return _read_predictions_csv(path)
    data = path.read_bytes()
    if len(data) < 8 or data[:4] != PREDICTION_MAGIC:
        raise MetricsError(f"{path}: not an EDPR prediction file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    offset = 8 + 4 * ndim
    if ndim < 1 or len(data) < offset:
        raise MetricsError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    expected = offset + 8 * int(np.prod(shape))
    if len(data) != expected:
        raise MetricsError(f"{path}: expected {expected} bytes for shape {shape}, got {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def _read_predictions_csv(path: Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["model", "sample"] or len(header) < 3:
            raise MetricsError(f"{path}: header must be model,sample,p0,...")
        entries: Dict[Tuple[int, int], List[float]] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise MetricsError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                key = (int(row[0]), int(row[1]))
                values = [float(v) for v in row[2:]]
            except ValueError as e:
                raise MetricsError(f"{path}:{line_no}: {e}") from e
            if key in entries:
                raise MetricsError(f"{path}:{line_no}: duplicate row for model {key[0]}, "
                                   f"sample {key[1]}")
            entries[key] = values
    if not entries:
        raise MetricsError(f"{path}: no prediction rows")
    models = max(k[0] for k in entries) + 1
    samples = max(k[1] for k in entries) + 1
    if len(entries) != models * samples:
        raise MetricsError(f"{path}: expected {models * samples} (model, sample) rows, "
                           f"got {len(entries)}")
    probs = np.zeros((models, samples, len(header) - 2))
    for (m, n), values in entries.items():
        probs[m, n] = values
    return probs


def read_labels(path: Union[str, Path]) -> np.ndarray:
    """One integer label per line"""
    try:
        return np.loadtxt(path, dtype=np.int64, ndmin=1)
    except (OSError, ValueError) as e:
        raise MetricsError(f"Cannot read labels from {path}: {e}") from e
