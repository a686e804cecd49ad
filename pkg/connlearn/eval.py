"""
Classification metrics, stratified folds and mean(std) aggregation.
Positive class is label 1 (disorder).
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from sklearn.metrics import confusion_matrix, roc_auc_score
from sklearn.model_selection import StratifiedKFold

from connlearn.errors import ConfigurationError, ContractViolation, UndefinedMetricError

logger = logging.getLogger(__name__)

METRICS = ("acc", "sen", "spe", "auc")


class Confusion(BaseModel):
    tp: int
    fp: int
    tn: int
    fn: int


class MetricsReport(BaseModel):
    acc: float
    sen: Optional[float] = None
    spe: Optional[float] = None
    auc: Optional[float] = None
    confusion: Confusion
    n: int


class MetricSummary(BaseModel):
    mean: float
    std: float
    formatted: str
    n_folds: int


def confusion_metrics(predictions: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    preds = np.asarray(predictions, dtype=int)
    truth = np.asarray(labels, dtype=int)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ContractViolation(f"predictions ({preds.shape}) and labels ({truth.shape}) differ in length")
    if preds.size == 0:
        raise ContractViolation("confusion_metrics needs at least one prediction")
    tn, fp, fn, tp = (int(v) for v in confusion_matrix(truth, preds, labels=[0, 1]).ravel())
    n = tp + fp + tn + fn
    return MetricsReport(
        acc=(tp + tn) / n,
        sen=tp / (tp + fn) if tp + fn else None,
        spe=tn / (tn + fp) if tn + fp else None,
        confusion=Confusion(tp=tp, fp=fp, tn=tn, fn=fn),
        n=n,
    )


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank (Mann-Whitney) AUC; a positive/negative tie counts 0.5."""
    truth = np.asarray(labels, dtype=int)
    if len(np.unique(truth)) < 2:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return float(roc_auc_score(truth, np.asarray(scores, dtype=np.float64)))


def stratified_kfold(labels: Sequence[int], k: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """k (train, test) index pairs; test sets partition the indices, class counts balanced to within 1."""
    truth = np.asarray(labels, dtype=int)
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    classes, counts = np.unique(truth, return_counts=True)
    small = {int(c): int(n) for c, n in zip(classes, counts) if n < k}
    if small:
        raise ConfigurationError(f"{k} folds need at least {k} subjects per class, got {small}")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [(train, test) for train, test in splitter.split(np.zeros(len(truth)), truth)]


def summarize(values: Sequence[float]) -> MetricSummary:
    """Mean and population std, formatted as percent "mean(std)" with one decimal."""
    arr = np.asarray(values, dtype=np.float64)
    mean, std = float(arr.mean()), float(arr.std())
    return MetricSummary(mean=mean, std=std, formatted=f"{100 * mean:.1f}({100 * std:.1f})", n_folds=len(arr))


def aggregate(per_fold: Sequence[MetricsReport]) -> Dict[str, MetricSummary]:
    if not per_fold:
        raise ContractViolation("aggregate needs at least one fold")
    summary = {}
    for metric in METRICS:
        values = [getattr(r, metric) for r in per_fold if getattr(r, metric) is not None]
        if values:
            summary[metric] = summarize(values)
        else:
            logger.warning("Metric %s is undefined in every fold", metric)
    return summary
