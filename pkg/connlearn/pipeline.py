"""
The unrolled two-view pipeline: for each view, L + 1 rounds of
(learner -> connectivity -> encoder), each round fed the previous round's
node embeddings, plus the classification head on the final pooled vectors.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from connlearn.config import DTYPE, TrainConfig
from connlearn.encoder import ClassifierHead, HiddenRep, MultiStateEncoder
from connlearn.errors import ConfigurationError, ContractViolation
from connlearn.learner import VIEWS, ConnectivityLearner, ConnectivityMatrix, check_connectivity
from connlearn.signals import DatasetManifest, zscore_rows
from connlearn.storage.prior_cache import PriorCache

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreparedSubject:
    subject_id: str
    bold: np.ndarray  # [N, T], standardized when configured
    priors: Dict[str, np.ndarray]  # view -> [N, N]
    label: Optional[int]


@dataclass(frozen=True)
class SubjectBatch:
    subject_ids: Tuple[str, ...]
    bold: torch.Tensor  # [B, N, T]
    priors: Dict[str, torch.Tensor]  # view -> [B, N, N]
    labels: Tuple[Optional[int], ...]

    def __len__(self) -> int:
        return len(self.subject_ids)


@dataclass
class PipelineForward:
    graphs: Dict[str, List[ConnectivityMatrix]]
    reps: Dict[str, List[HiddenRep]]

    def final(self, view: str) -> HiddenRep:
        return self.reps[view][-1]

    def final_graph(self, view: str) -> ConnectivityMatrix:
        return self.graphs[view][-1]


def prepare_subjects(
    dataset: DatasetManifest, config: TrainConfig, cache: Optional[PriorCache] = None
) -> List[PreparedSubject]:
    """Standardize (optionally) and attach cached priors. Every subject must share T."""
    if not dataset.subjects:
        raise ConfigurationError(f"Dataset {dataset.name!r} is empty")
    if not dataset.timepoints_uniform:
        raise ConfigurationError(f"Dataset {dataset.name!r} mixes series lengths; the pipeline needs one T")
    cache = cache or PriorCache(config.resolved_cache_dir())
    prepared = []
    for rec in dataset.subjects:
        bold = zscore_rows(rec.bold) if config.zscore else rec.bold
        pearson, te = cache.get(bold, config.te_bins, config.te_lag)
        prepared.append(
            PreparedSubject(
                subject_id=rec.subject_id,
                bold=bold.values,
                priors={"fc": pearson.values, "ec": te.values},
                label=rec.label,
            )
        )
    logger.info("Prepared %d subjects (prior cache hits=%d, misses=%d)", len(prepared), cache.hits, cache.misses)
    return prepared


def make_batch(subjects: Sequence[PreparedSubject]) -> SubjectBatch:
    return SubjectBatch(
        subject_ids=tuple(s.subject_id for s in subjects),
        bold=torch.as_tensor(np.stack([s.bold for s in subjects]), dtype=DTYPE),
        priors={
            view: torch.as_tensor(np.stack([s.priors[view] for s in subjects]), dtype=DTYPE)
            for view in VIEWS
        },
        labels=tuple(s.label for s in subjects),
    )


def iter_batches(
    subjects: Sequence[PreparedSubject], batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[SubjectBatch]:
    """Seeded shuffle when rng is given; the last short batch is kept."""
    order = rng.permutation(len(subjects)) if rng is not None else np.arange(len(subjects))
    for start in range(0, len(order), batch_size):
        yield make_batch([subjects[i] for i in order[start:start + batch_size]])


class ConnectivityPipeline(nn.Module):
    def __init__(self, config: TrainConfig, n_timepoints: int):
        super().__init__()
        self.config = config
        self.n_timepoints = n_timepoints
        self.learners = nn.ModuleDict(
            {
                view: ConnectivityLearner(
                    view, n_timepoints, config.hidden, config.iterations, config.heads,
                    metric=config.similarity, mode=config.learner_mode,
                )
                for view in VIEWS
            }
        )
        self.encoders = nn.ModuleDict(
            {view: MultiStateEncoder(view, n_timepoints, config.hidden, config.states) for view in VIEWS}
        )
        self.classifier = ClassifierHead(config.hidden, config.classifier_hidden)

    def forward(self, batch: SubjectBatch) -> PipelineForward:
        if batch.bold.shape[-1] != self.n_timepoints:
            raise ConfigurationError(
                f"Pipeline was built for T={self.n_timepoints}, batch has T={batch.bold.shape[-1]}"
            )
        graphs: Dict[str, List[ConnectivityMatrix]] = {}
        reps: Dict[str, List[HiddenRep]] = {}
        for view in VIEWS:
            features = batch.bold
            graphs[view], reps[view] = [], []
            for layer in range(self.config.iterations + 1):
                conn = self.learners[view].build(features, batch.priors[view], layer)
                rep = self.encoders[view](conn, features, layer)
                if self.config.debug_checks:
                    check_connectivity(conn)
                    _check_pooling(rep)
                graphs[view].append(conn)
                reps[view].append(rep)
                features = rep.node_matrix
        return PipelineForward(graphs=graphs, reps=reps)

    def logits(self, forward: PipelineForward) -> torch.Tensor:
        return self.classifier(forward.final("fc").pooled, forward.final("ec").pooled)

    def set_learner_frozen(self, frozen: bool) -> None:
        for p in self.learners.parameters():
            p.requires_grad_(not frozen)


def _check_pooling(rep: HiddenRep) -> None:
    if not torch.allclose(rep.pooled, rep.node_matrix.mean(dim=-2), atol=1e-12, rtol=0):
        raise ContractViolation(f"{rep.view} H^{rep.iteration}: pooled vector is not the node mean")


def build_pipeline(config: TrainConfig, n_timepoints: int) -> ConnectivityPipeline:
    """Fresh parameters drawn from torch's RNG seeded with config.seed."""
    torch.manual_seed(config.seed)
    return ConnectivityPipeline(config, n_timepoints)
