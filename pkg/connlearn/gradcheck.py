"""
Small random instances on which every trainable gradient is compared with
central finite differences.
"""
import logging
from typing import Callable, Dict, List, Optional

import torch

from connlearn.config import TrainConfig
from connlearn.encoder import encoder_loss
from connlearn.errors import LookupFailure, UsageError
from connlearn.losses import cross_entropy, graph_loss, nt_xent, total_finetune_loss, total_pretrain_loss
from connlearn.optim import GradCheckReport, finite_difference_check
from connlearn.pipeline import ConnectivityPipeline, SubjectBatch, build_pipeline, make_batch, prepare_subjects
from connlearn.signals import synth_generate
from connlearn.storage.prior_cache import PriorCache

logger = logging.getLogger(__name__)

SCALES: Dict[str, Dict[str, int]] = {
    "desk": {"regions": 6, "timepoints": 20, "iterations": 2, "heads": 2, "states": 2, "hidden": 5, "batch": 3},
    "tiny": {"regions": 4, "timepoints": 12, "iterations": 1, "heads": 2, "states": 2, "hidden": 3, "batch": 2},
}


def gradcheck_config(scale: str, seed: int) -> TrainConfig:
    if scale not in SCALES:
        raise UsageError(f"Unknown gradcheck scale {scale!r}; choose from {sorted(SCALES)}")
    s = SCALES[scale]
    # loss coefficients raised so every term moves the total measurably
    return TrainConfig(
        iterations=s["iterations"],
        heads=s["heads"],
        states=s["states"],
        hidden=s["hidden"],
        classifier_hidden=4,
        alpha=0.5,
        beta=0.5,
        te_bins=3,
        batch_size=s["batch"],
        seed=seed,
    )


def gradcheck_instance(scale: str = "desk", seed: int = 0):
    config = gradcheck_config(scale, seed)
    s = SCALES[scale]
    data = synth_generate(s["batch"], s["regions"], s["timepoints"], seed=seed, name=f"gradcheck-{scale}")
    batch = make_batch(prepare_subjects(data, config, PriorCache()))
    return config, batch, build_pipeline(config, s["timepoints"])


def _objectives(
    pipeline: ConnectivityPipeline, batch: SubjectBatch, config: TrainConfig, terms: bool
) -> Dict[str, Callable[[], torch.Tensor]]:
    labels = torch.as_tensor(batch.labels, dtype=torch.long)

    def pretrain_total():
        return total_pretrain_loss(pipeline(batch), config).total

    def finetune_total():
        forward = pipeline(batch)
        return total_finetune_loss(forward, pipeline.logits(forward), batch.labels, config).total

    objectives = {"pretrain": pretrain_total, "finetune": finetune_total}
    if terms:
        def contrastive():
            fwd = pipeline(batch)
            return nt_xent(fwd.final("fc").pooled, fwd.final("ec").pooled, config.tau)

        def graph():
            fwd = pipeline(batch)
            return sum(
                graph_loss(fwd.final(v).node_matrix, fwd.final_graph(v).values, config.gamma).mean()
                for v in ("fc", "ec")
            )

        def encoder_reg():
            fwd = pipeline(batch)
            return sum(encoder_loss(fwd.final(v).state_pooled).mean() for v in ("fc", "ec"))

        def classification():
            return cross_entropy(pipeline.logits(pipeline(batch)), labels)

        objectives.update(
            contrastive=contrastive, graph=graph, encoder_reg=encoder_reg, classification=classification
        )
    return objectives


def run_gradcheck(
    seed: int = 0, scale: str = "desk", corrupt: Optional[str] = None, terms: bool = False
) -> List[GradCheckReport]:
    """
    Pretraining objectives check learner + encoder parameters; fine-tuning
    objectives check encoder + classifier with the learner frozen.
    """
    config, batch, pipeline = gradcheck_instance(scale, seed)
    known = {name for name, _ in pipeline.named_parameters()}
    if corrupt is not None and corrupt not in known:
        raise LookupFailure(f"Unknown parameter {corrupt!r}")

    pre_params = [(n, p) for n, p in pipeline.named_parameters() if not n.startswith("classifier.")]
    ft_params = [(n, p) for n, p in pipeline.named_parameters() if not n.startswith("learners.")]
    reports = []
    for objective, loss_fn in _objectives(pipeline, batch, config, terms).items():
        named = ft_params if objective in ("finetune", "classification") else pre_params
        names = {n for n, _ in named}
        pipeline.set_learner_frozen(named is ft_params)
        report = finite_difference_check(
            loss_fn, named, objective=objective, corrupt=corrupt if corrupt in names else None
        )
        logger.info(
            "gradcheck %s: %s (max rel err %.2e)",
            objective, "pass" if report.passed else "FAIL", max(e.max_rel_error for e in report.entries),
        )
        reports.append(report)
    pipeline.set_learner_frozen(False)
    return reports
