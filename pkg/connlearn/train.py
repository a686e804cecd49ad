"""
Training loops: contrastive pretraining on unlabeled subjects, k-fold
fine-tuning of encoder + classifier on labeled subjects, and the ablation
harness that runs both per variant and seed.
"""
import logging
import sys
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from connlearn.config import TrainConfig, structural_mismatch
from connlearn.encoder import ClassifierHead
from connlearn.errors import ConfigurationError, SchemaError, UndefinedMetricError, UsageError
from connlearn.eval import MetricsReport, MetricSummary, aggregate, auc, confusion_metrics, stratified_kfold
from connlearn.losses import LossReport, total_finetune_loss, total_pretrain_loss
from connlearn.optim import adam_step, backward, make_optimizer
from connlearn.pipeline import (
    ConnectivityPipeline,
    PreparedSubject,
    build_pipeline,
    iter_batches,
    make_batch,
    prepare_subjects,
)
from connlearn.signals import DatasetManifest
from connlearn.storage.checkpoint import Checkpoint, checkpoint_from_pipeline, load_into_pipeline
from connlearn.storage.files import PathLike
from connlearn.storage.prior_cache import PriorCache
from connlearn.storage.training_log import TrainingLog

logger = logging.getLogger(__name__)

LOSS_FIELDS = ("contrastive", "graph_fc", "graph_ec", "encoder_reg", "classification", "total")


def _progress(iterable, desc: str, progress: Optional[bool]):
    enabled = sys.stderr.isatty() if progress is None else progress
    return tqdm(iterable, desc=desc, file=sys.stderr, disable=not enabled, leave=False)


def mean_report(reports: Sequence[Tuple[int, LossReport]]) -> LossReport:
    """Batch-size weighted mean of per-batch loss reports."""
    weights = np.asarray([n for n, _ in reports], dtype=np.float64)
    values: Dict[str, Any] = {}
    for name in LOSS_FIELDS:
        column = [getattr(r, name) for _, r in reports]
        if any(v is None for v in column):
            values[name] = None
            continue
        values[name] = float(np.dot(weights, column) / weights.sum())
    return LossReport(coefficients=reports[0][1].coefficients, **values)


def _trainable(pipeline: ConnectivityPipeline, include_classifier: bool) -> List[Tuple[str, torch.nn.Parameter]]:
    return [
        (name, p)
        for name, p in pipeline.named_parameters()
        if p.requires_grad and (include_classifier or not name.startswith("classifier."))
    ]


@dataclass
class PretrainOutcome:
    pipeline: ConnectivityPipeline
    history: List[LossReport]

    def checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        return checkpoint_from_pipeline(self.pipeline, "pretrained", metadata)


def pretrain(
    dataset: DatasetManifest,
    config: TrainConfig,
    log_path: Optional[PathLike] = None,
    cache: Optional[PriorCache] = None,
    progress: Optional[bool] = None,
) -> PretrainOutcome:
    if not dataset.subjects:
        raise ConfigurationError(f"Dataset {dataset.name!r} is empty")
    if dataset.labeled:
        logger.info("Labels of %r are ignored during pretraining", dataset.name)
    torch.set_num_threads(config.threads)

    subjects = prepare_subjects(dataset, config, cache)
    pipeline = build_pipeline(config, dataset.n_timepoints)
    if config.learner_mode != "adaptive":
        pipeline.set_learner_frozen(True)
    named = _trainable(pipeline, include_classifier=False)
    optimizer = make_optimizer([p for _, p in named], config)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog(log_path)

    history = []
    for epoch in _progress(range(1, config.epochs + 1), "pretrain", progress):
        started = time.perf_counter()
        reports = []
        for batch in iter_batches(subjects, config.batch_size, rng):
            terms = total_pretrain_loss(pipeline(batch), config)
            adam_step(optimizer, named, backward(terms.total, named))
            reports.append((len(batch), terms.report))
        report = mean_report(reports)
        history.append(report)

        elapsed = time.perf_counter() - started
        record: Dict[str, Any] = {"epoch": epoch, "loss": report.model_dump(exclude_none=True)}
        if config.log_wall_time:
            record["wall_time"] = round(elapsed, 6)
        log.append(record)
        logger.debug("epoch %d: total=%.6f contrastive=%.6f (%.2fs)", epoch, report.total, report.contrastive, elapsed)

    logger.info(
        "Pretrained %d epochs on %d subjects: loss %.4f -> %.4f",
        config.epochs, len(subjects), history[0].total, history[-1].total,
    )
    return PretrainOutcome(pipeline=pipeline, history=history)


class FoldResult(BaseModel):
    fold: int
    train_size: int
    test_ids: List[str]
    metrics: MetricsReport


class FinetuneResults(BaseModel):
    dataset: str
    n_subjects: int
    from_scratch: bool
    finetune_ratio: float
    checkpoint_sha256: Optional[str] = None
    folds: List[FoldResult]
    aggregate: Dict[str, MetricSummary]
    config: Dict[str, Any]


@dataclass
class FinetuneOutcome:
    results: FinetuneResults
    pipelines: List[ConnectivityPipeline]


def _check_checkpoint(checkpoint: Checkpoint, config: TrainConfig, n_timepoints: int) -> None:
    if checkpoint.manifest.stage != "pretrained":
        raise UsageError(f"Fine-tuning must start from a pretrained checkpoint, got stage {checkpoint.manifest.stage!r}")
    mismatch = structural_mismatch(checkpoint.manifest.config, config)
    if mismatch:
        raise ConfigurationError(f"Checkpoint structure differs from config (saved, requested): {mismatch}")
    if checkpoint.manifest.n_timepoints != n_timepoints:
        raise ConfigurationError(
            f"Checkpoint was trained on T={checkpoint.manifest.n_timepoints}, dataset has T={n_timepoints}"
        )


def subsample_fold(train_idx: np.ndarray, labels: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Stratified, seeded subset of a training fold; at least one subject per class is kept."""
    if ratio >= 1.0:
        return train_idx
    n_keep = max(int(round(ratio * len(train_idx))), len(np.unique(labels[train_idx])))
    if n_keep >= len(train_idx):
        return train_idx
    kept, _ = train_test_split(
        train_idx, train_size=n_keep, stratify=labels[train_idx], random_state=seed
    )
    return np.sort(kept)


def _fit_fold(
    pipeline: ConnectivityPipeline,
    train: Sequence[PreparedSubject],
    config: TrainConfig,
    fold: int,
    progress: Optional[bool],
) -> None:
    named = _trainable(pipeline, include_classifier=True)
    optimizer = make_optimizer([p for _, p in named], config)
    rng = np.random.default_rng(config.seed + fold)
    for _ in _progress(range(config.finetune_epochs), f"fold {fold}", progress):
        for batch in iter_batches(train, config.batch_size, rng):
            forward = pipeline(batch)
            terms = total_finetune_loss(forward, pipeline.logits(forward), batch.labels, config)
            adam_step(optimizer, named, backward(terms.total, named))


def predict(pipeline: ConnectivityPipeline, subjects: Sequence[PreparedSubject]) -> Tuple[np.ndarray, np.ndarray]:
    """Class predictions (argmax, lowest index on ties) and P(class 1) scores."""
    with torch.no_grad():
        logits = pipeline.logits(pipeline(make_batch(subjects)))
        scores = torch.softmax(logits, dim=-1)[:, 1]
        predictions = logits.argmax(dim=-1)
    return predictions.numpy(), scores.numpy()


def finetune(
    dataset: DatasetManifest,
    config: TrainConfig,
    checkpoint: Optional[Checkpoint] = None,
    folds: Optional[int] = None,
    cache: Optional[PriorCache] = None,
    progress: Optional[bool] = None,
) -> FinetuneOutcome:
    """
    k-fold fine-tuning. With a checkpoint the learner is loaded and frozen and
    only encoder + classifier train; without one every stage trains from scratch.
    """
    labels = dataset.labels
    if not dataset.labeled or set(labels) != {0, 1}:
        raise SchemaError(f"Fine-tuning needs labels {{0, 1}}, dataset {dataset.name!r} has {sorted(set(labels), key=str)}")
    if not dataset.timepoints_uniform:
        raise ConfigurationError(f"Dataset {dataset.name!r} mixes series lengths; the pipeline needs one T")
    k = folds or config.folds
    if checkpoint is not None:
        _check_checkpoint(checkpoint, config, dataset.n_timepoints)
    torch.set_num_threads(config.threads)

    truth = np.asarray(labels, dtype=int)
    splits = stratified_kfold(truth, k, config.seed)
    subjects = prepare_subjects(dataset, config, cache)

    fold_results, pipelines = [], []
    for fold, (train_idx, test_idx) in enumerate(splits):
        train_idx = subsample_fold(train_idx, truth, config.finetune_ratio, config.seed + fold)
        pipeline = build_pipeline(config, dataset.n_timepoints)
        if checkpoint is not None:
            load_into_pipeline(checkpoint, pipeline)
            pipeline.set_learner_frozen(True)
        elif config.learner_mode != "adaptive":
            pipeline.set_learner_frozen(True)
        torch.manual_seed(config.seed + fold)
        pipeline.classifier = ClassifierHead(config.hidden, config.classifier_hidden)

        _fit_fold(pipeline, [subjects[i] for i in train_idx], config, fold, progress)

        test = [subjects[i] for i in test_idx]
        predictions, scores = predict(pipeline, test)
        metrics = confusion_metrics(predictions, truth[test_idx])
        try:
            metrics.auc = auc(scores, truth[test_idx])
        except UndefinedMetricError:
            logger.warning("Fold %d test set holds one class; AUC left undefined", fold)
        fold_results.append(
            FoldResult(
                fold=fold,
                train_size=len(train_idx),
                test_ids=[s.subject_id for s in test],
                metrics=metrics,
            )
        )
        pipelines.append(pipeline)
        logger.info("Fold %d/%d: acc=%.3f auc=%s", fold + 1, k, metrics.acc, metrics.auc)

    results = FinetuneResults(
        dataset=dataset.name,
        n_subjects=len(subjects),
        from_scratch=checkpoint is None,
        finetune_ratio=config.finetune_ratio,
        checkpoint_sha256=checkpoint.sha256 if checkpoint is not None else None,
        folds=fold_results,
        aggregate=aggregate([f.metrics for f in fold_results]),
        config=config.echo(),
    )
    return FinetuneOutcome(results=results, pipelines=pipelines)


ABLATION_VARIANTS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "fixed_learner": {"learner_mode": "fixed"},
    "no_graph_loss": {"alpha": 0.0},
    "frozen_learner": {"learner_mode": "frozen"},
    "single_state": {"states": 1},
}


class VariantResult(BaseModel):
    variant: str
    seeds: List[int]
    acc: List[float]
    auc: List[Optional[float]]
    mean_acc: float
    mean_auc: Optional[float] = None


class AblationReport(BaseModel):
    variants: List[VariantResult]
    config: Dict[str, Any]


def variant_config(config: TrainConfig, variant: str, seed: int) -> TrainConfig:
    if variant not in ABLATION_VARIANTS:
        raise UsageError(f"Unknown ablation variant {variant!r}; choose from {sorted(ABLATION_VARIANTS)}")
    return TrainConfig.model_validate({**config.echo(), **ABLATION_VARIANTS[variant], "seed": seed})


def run_ablation(
    pretrain_data: DatasetManifest,
    labeled_data: DatasetManifest,
    config: TrainConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = tuple(ABLATION_VARIANTS),
    progress: Optional[bool] = None,
) -> AblationReport:
    cache = PriorCache(config.resolved_cache_dir())
    results = []
    for variant in variants:
        accs, aucs = [], []
        for seed in seeds:
            cfg = variant_config(config, variant, seed)
            outcome = pretrain(pretrain_data, cfg, cache=cache, progress=progress)
            tuned = finetune(labeled_data, cfg, outcome.checkpoint(), cache=cache, progress=progress).results
            accs.append(tuned.aggregate["acc"].mean)
            aucs.append(tuned.aggregate["auc"].mean if "auc" in tuned.aggregate else None)
        defined = [a for a in aucs if a is not None]
        results.append(
            VariantResult(
                variant=variant,
                seeds=list(seeds),
                acc=accs,
                auc=aucs,
                mean_acc=float(np.mean(accs)),
                mean_auc=float(np.mean(defined)) if defined else None,
            )
        )
        logger.info("Ablation %s: mean acc %.3f over %d seed(s)", variant, results[-1].mean_acc, len(seeds))
    return AblationReport(variants=results, config=config.echo())
