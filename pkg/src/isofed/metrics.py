"""Global-model evaluation: accuracy, macro one-vs-rest AUC, macro P/R.

Averaging is macro (unweighted over classes); classes absent from the test
labels are excluded from the macro means, and a class with zero predicted
positives contributes precision 0 rather than NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .model import CnnClassifier, ModelConfig, ModelParams, load_params, model_config_from_params


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class MetricReport:
    round: int
    phase: str
    accuracy: float
    auc: float
    precision: float
    recall: float

    def csv_row(self) -> str:
        vals = (self.accuracy, self.auc, self.precision, self.recall)
        return f"{self.round},{self.phase}," + ",".join(f"{100.0 * v:.2f}" for v in vals)


CSV_HEADER = "round,phase,accuracy,auc,precision,recall"


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (mid-rank method)."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_rank_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank AUC with 0.5 tie credit (Mann-Whitney with mid-ranks)."""
    pos = int(positives.sum())
    neg = positives.size - pos
    if pos == 0 or neg == 0:
        raise MetricsError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(np.asarray(scores, dtype=np.float64))
    u = ranks[positives].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def rank_auc_ovr(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mean of per-class one-vs-rest rank AUC.

    Classes absent from ``labels`` are skipped; if no class yields a
    computable AUC (single-class test set) this is an error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise MetricsError(f"scores {scores.shape} do not match labels {labels.shape}")
    per_class = []
    for c in range(scores.shape[1]):
        mask = labels == c
        if not mask.any() or mask.all():
            continue
        per_class.append(binary_rank_auc(scores[:, c], mask))
    if not per_class:
        raise MetricsError("no class with both positives and negatives; AUC undefined")
    return float(np.mean(per_class))


def macro_precision_recall(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, float]:
    precisions, recalls = [], []
    for c in range(num_classes):
        actual = labels == c
        if not actual.any():
            continue
        predicted = predictions == c
        tp = float((predicted & actual).sum())
        precisions.append(tp / predicted.sum() if predicted.any() else 0.0)
        recalls.append(tp / actual.sum())
    return float(np.mean(precisions)), float(np.mean(recalls))


def predict_probs(
    params: ModelParams,
    dataset: Dataset,
    model_cfg: ModelConfig | None = None,
    batch_size: int = 512,
) -> np.ndarray:
    """Inference-mode class probabilities; normalization only, no augmentation.

    Images are standardized with the evaluated dataset's own statistics so a
    (checkpoint, dataset) pair reproduces results without the training split.
    """
    if model_cfg is None:
        model_cfg = model_config_from_params(params, image_hw=dataset.images.shape[1])
    model = CnnClassifier(model_cfg)
    load_params(model, params)
    pixels = dataset.images.reshape(-1, dataset.channels).astype(np.float64)
    mean = pixels.mean(axis=0)
    std = pixels.std(axis=0)
    std[std == 0] = 1.0
    out = np.empty((len(dataset), model_cfg.num_classes))
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size].astype(np.float64)
            x = ((x - mean) / std).transpose(0, 3, 1, 2)
            out[start : start + x.shape[0]] = ad.softmax(model(ad.Tensor(x)), axis=-1).data
    return out


def evaluate(
    params: ModelParams,
    test: Dataset,
    round_idx: int = 0,
    phase: str = "final",
    model_cfg: ModelConfig | None = None,
) -> MetricReport:
    if len(test) == 0:
        raise MetricsError("cannot evaluate on an empty test set")
    probs = predict_probs(params, test, model_cfg)
    labels = test.labels.astype(np.int64)
    predictions = probs.argmax(axis=1)
    accuracy = float((predictions == labels).mean())
    auc = rank_auc_ovr(probs, labels)
    precision, recall = macro_precision_recall(predictions, labels, test.num_classes)
    return MetricReport(round_idx, phase, accuracy, auc, precision, recall)
