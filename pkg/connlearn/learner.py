"""
Connectivity learner: multi-head weighted similarity fused with a fixed prior,
then row-normalized. One learner per view (FC, EC), one weight bank per
iteration layer.
"""
import logging
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
import torch
import torch.nn as nn

from connlearn.config import DTYPE, LearnerMode, SimilarityMetric
from connlearn.errors import ContractViolation
from connlearn.priors import PriorMatrix

logger = logging.getLogger(__name__)

View = Literal["fc", "ec"]
VIEWS = ("fc", "ec")
INIT_JITTER = 0.01


@dataclass(frozen=True)
class ConnectivityMatrix:
    values: torch.Tensor  # [..., N, N], row-normalized
    raw: torch.Tensor  # clamped W * s before normalization
    view: str
    iteration: int

    @property
    def isolated_rows(self) -> int:
        return int((self.raw.detach().sum(dim=-1) == 0).sum())

    def to_numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy().copy()


def unit_rows(x: torch.Tensor) -> torch.Tensor:
    # zero vectors stay zero; the sqrt never sees 0 so gradients stay finite
    sq = (x * x).sum(dim=-1, keepdim=True)
    live = sq > 0
    norm = torch.sqrt(torch.where(live, sq, torch.ones_like(sq)))
    return torch.where(live, x / norm, torch.zeros_like(x))


def multihead_similarity(
    features: torch.Tensor, weights: torch.Tensor, metric: SimilarityMetric = "cosine"
) -> torch.Tensor:
    """
    Average over heads of a weighted pairwise similarity.

    features: [..., N, d]; weights: [M, d]; returns [..., N, N].
    """
    if features.shape[-1] != weights.shape[-1]:
        raise ContractViolation(
            f"Feature width {features.shape[-1]} does not match weight width {weights.shape[-1]}"
        )
    if weights.shape[0] < 1:
        raise ContractViolation("At least one similarity head is required")
    weighted = features.unsqueeze(-3) * weights.unsqueeze(-2)  # [..., M, N, d]
    d = weighted.shape[-1]

    if metric == "cosine":
        unit = unit_rows(weighted)
        per_head = unit @ unit.transpose(-1, -2)
    elif metric == "inner_product":
        per_head = weighted @ weighted.transpose(-1, -2) / d
    elif metric == "euclidean":
        diff = weighted.unsqueeze(-2) - weighted.unsqueeze(-3)
        per_head = torch.exp(-(diff * diff).sum(dim=-1) / d)
    elif metric == "absolute":
        diff = weighted.unsqueeze(-2) - weighted.unsqueeze(-3)
        per_head = torch.exp(-diff.abs().mean(dim=-1))
    else:
        raise ContractViolation(f"Unknown similarity metric {metric!r}")
    return per_head.mean(dim=-3)


def fuse_normalize(
    similarity: torch.Tensor,
    prior: Union[torch.Tensor, PriorMatrix],
    view: str = "fc",
    iteration: int = 0,
) -> ConnectivityMatrix:
    """raw = max(W * s, 0) off the diagonal; A = raw / row sum, all-zero rows left at 0."""
    if isinstance(prior, PriorMatrix):
        prior = torch.as_tensor(prior.values, dtype=similarity.dtype)
    if prior.shape != similarity.shape:
        raise ContractViolation(f"Prior shape {tuple(prior.shape)} != similarity shape {tuple(similarity.shape)}")
    n = similarity.shape[-1]
    off_diag = 1.0 - torch.eye(n, dtype=similarity.dtype)
    raw = torch.relu(prior.detach() * similarity) * off_diag
    sums = raw.sum(dim=-1, keepdim=True)
    # all-zero rows stay zero; every other row sums to 1 exactly up to rounding
    values = raw / torch.where(sums > 0, sums, torch.ones_like(sums))
    conn = ConnectivityMatrix(values=values, raw=raw, view=view, iteration=iteration)
    isolated = conn.isolated_rows
    if isolated:
        logger.debug("%s iteration %d: %d isolated row(s)", view, iteration, isolated)
    return conn


class ConnectivityLearner(nn.Module):
    """Per-view learner parameters: weights[l] has shape [heads, d_l]."""

    def __init__(
        self,
        view: View,
        n_timepoints: int,
        hidden: int,
        iterations: int,
        heads: int,
        metric: SimilarityMetric = "cosine",
        mode: LearnerMode = "adaptive",
    ):
        super().__init__()
        self.view = view
        self.metric = metric
        self.mode = mode
        dims = [n_timepoints] + [hidden] * iterations
        self.weights = nn.ParameterList(
            nn.Parameter(1.0 + INIT_JITTER * torch.randn(heads, d, dtype=DTYPE)) for d in dims
        )

    def build(self, features: torch.Tensor, prior: torch.Tensor, layer: int) -> ConnectivityMatrix:
        if layer >= len(self.weights):
            raise ContractViolation(f"Layer {layer} exceeds the {len(self.weights) - 1} iteration layers")
        if self.mode == "fixed":
            similarity = torch.ones_like(prior)
        else:
            similarity = multihead_similarity(features, self.weights[layer], self.metric)
        return fuse_normalize(similarity, prior, self.view, layer)


def build_connectivity(
    features: torch.Tensor, learner: ConnectivityLearner, prior: torch.Tensor, layer: int
) -> ConnectivityMatrix:
    return learner.build(features, prior, layer)


def check_connectivity(conn: ConnectivityMatrix, tol: float = 1e-9) -> None:
    """Raise ContractViolation unless conn is nonnegative, zero-diagonal and row-stochastic."""
    values = conn.values.detach()
    if bool((values < 0).any()):
        raise ContractViolation(f"{conn.view} A^{conn.iteration} has negative entries")
    if bool((torch.diagonal(values, dim1=-2, dim2=-1) != 0).any()):
        raise ContractViolation(f"{conn.view} A^{conn.iteration} has self-connections")
    sums = values.sum(dim=-1)
    ok = ((sums - 1).abs() <= tol) | (conn.raw.detach().sum(dim=-1) == 0)
    if not bool(ok.all()):
        raise ContractViolation(f"{conn.view} A^{conn.iteration} rows are not stochastic")
