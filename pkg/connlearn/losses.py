"""
Training objectives: cross-view NT-Xent, graph smoothness + sparsity,
cross-entropy, and the pretraining / fine-tuning totals.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel

from connlearn.config import TrainConfig
from connlearn.encoder import encoder_loss

logger = logging.getLogger(__name__)


class LossReport(BaseModel):
    contrastive: float = 0.0
    graph_fc: float = 0.0
    graph_ec: float = 0.0
    encoder_reg: float = 0.0
    classification: Optional[float] = None
    total: float = 0.0
    coefficients: Dict[str, float]


@dataclass
class LossTerms:
    total: torch.Tensor
    report: LossReport


def _normalize(emb: torch.Tensor) -> torch.Tensor:
    norms = emb.detach().norm(dim=-1)
    if bool((norms == 0).any()):
        logger.warning("%d zero-norm embedding(s) in contrastive batch", int((norms == 0).sum()))
    return F.normalize(emb, dim=-1, eps=1e-12)


def _anchored_nt_xent(anchor: torch.Tensor, other: torch.Tensor, tau: float) -> torch.Tensor:
    b = anchor.shape[0]
    pool = torch.cat([anchor, other], dim=0)  # [2B, d]
    logits = anchor @ pool.T / tau  # [B, 2B]
    self_mask = torch.zeros(b, 2 * b, dtype=torch.bool)
    self_mask[torch.arange(b), torch.arange(b)] = True
    logits = logits.masked_fill(self_mask, float("-inf"))
    positive = logits[torch.arange(b), torch.arange(b) + b]
    return (torch.logsumexp(logits, dim=1) - positive).mean()


def nt_xent(
    fc_emb: torch.Tensor,
    ec_emb: torch.Tensor,
    tau: float,
    normalize: bool = True,
    symmetric: bool = False,
) -> torch.Tensor:
    """
    FC embeddings anchor; the positive is the same subject's EC embedding and the
    denominator runs over the other 2B - 1 embeddings of the batch.
    """
    if fc_emb.shape != ec_emb.shape or fc_emb.ndim != 2:
        raise ValueError(f"Embeddings must both be [B, d], got {tuple(fc_emb.shape)} and {tuple(ec_emb.shape)}")
    if normalize:
        fc_emb, ec_emb = _normalize(fc_emb), _normalize(ec_emb)
    loss = _anchored_nt_xent(fc_emb, ec_emb, tau)
    if symmetric:
        loss = (loss + _anchored_nt_xent(ec_emb, fc_emb, tau)) / 2
    return loss


def graph_loss(h: torch.Tensor, a: torch.Tensor, gamma: float) -> torch.Tensor:
    """sum_ij ||h_i - h_j||^2 A_ij + gamma ||A||_F^2, over the last two axes."""
    diff = h.unsqueeze(-2) - h.unsqueeze(-3)
    dist = (diff * diff).sum(dim=-1)
    return (dist * a).sum(dim=(-2, -1)) + gamma * (a * a).sum(dim=(-2, -1))


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log softmax(logits)[label]; a single [2] logit vector is accepted."""
    if logits.ndim == 1:
        logits, labels = logits.unsqueeze(0), labels.reshape(1)
    return F.cross_entropy(logits, labels.long())


def _coefficients(config: TrainConfig) -> Dict[str, float]:
    return {"alpha": config.alpha, "beta": config.beta, "gamma": config.gamma, "tau": config.tau}


def _encoder_reg(forward) -> torch.Tensor:
    per_view = [encoder_loss(forward.final(view).state_pooled) for view in ("fc", "ec")]
    return torch.stack(per_view).mean()


def total_pretrain_loss(forward, config: TrainConfig) -> LossTerms:
    """L = L_CL + alpha (L_GL^FC + L_GL^EC) + beta L_E on a batched pipeline forward."""
    contrastive = nt_xent(
        forward.final("fc").pooled,
        forward.final("ec").pooled,
        config.tau,
        normalize=config.contrastive.normalize,
        symmetric=config.contrastive.symmetric,
    )
    graph = {
        view: graph_loss(forward.final(view).node_matrix, forward.final_graph(view).values, config.gamma).mean()
        for view in ("fc", "ec")
    }
    reg = _encoder_reg(forward)
    total = contrastive + config.alpha * (graph["fc"] + graph["ec"]) + config.beta * reg
    report = LossReport(
        contrastive=float(contrastive),
        graph_fc=float(graph["fc"]),
        graph_ec=float(graph["ec"]),
        encoder_reg=float(reg),
        total=float(total),
        coefficients=_coefficients(config),
    )
    return LossTerms(total, report)


def total_finetune_loss(forward, logits: torch.Tensor, labels: Sequence[int], config: TrainConfig) -> LossTerms:
    """L = L_CE + beta L_E."""
    target = torch.as_tensor(list(labels), dtype=torch.long)
    classification = cross_entropy(logits, target)
    reg = _encoder_reg(forward)
    total = classification + config.beta * reg
    report = LossReport(
        encoder_reg=float(reg),
        classification=float(classification),
        total=float(total),
        coefficients=_coefficients(config),
    )
    return LossTerms(total, report)
