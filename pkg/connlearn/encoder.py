"""
Multi-state graph encoder and classification head.

The encoder runs c parallel two-layer graph-convolution branches ("states")
over D^-1 (A + I) and mixes them with softmax attention over their pooled
outputs. It is a stand-in with a fully specified form; anything exposing
`forward(conn, features, iteration) -> HiddenRep` can replace it.
"""
from dataclasses import dataclass

import torch
import torch.nn as nn

from connlearn.config import DTYPE
from connlearn.errors import ContractViolation
from connlearn.learner import ConnectivityMatrix, unit_rows

ENCODER_KIND = "multi-state-gcn (stand-in)"
# small positive bias keeps fresh relu units off their kink
BIAS_INIT = 0.01


@dataclass(frozen=True)
class HiddenRep:
    node_matrix: torch.Tensor  # [..., N, d_h]
    pooled: torch.Tensor  # [..., d_h]
    state_pooled: torch.Tensor  # [..., c, d_h]
    attention: torch.Tensor  # [..., c]
    view: str
    iteration: int


def normalize_adjacency(a: torch.Tensor) -> torch.Tensor:
    """D^-1 (A + I), D the row sums of A + I. Valid for directed graphs."""
    n = a.shape[-1]
    looped = a + torch.eye(n, dtype=a.dtype)
    return looped / looped.sum(dim=-1, keepdim=True)


def _xavier(*shape: int) -> torch.Tensor:
    fan_in, fan_out = shape[-2], shape[-1]
    bound = (6.0 / (fan_in + fan_out)) ** 0.5
    return (torch.rand(*shape, dtype=DTYPE) * 2 - 1) * bound


class MultiStateEncoder(nn.Module):
    """
    Parameters are shared across iterations. Only the first propagation layer
    depends on the input width, so it has one weight for the BOLD input
    (iteration 0) and one for hidden input (iterations >= 1).
    """

    def __init__(self, view: str, n_timepoints: int, hidden: int, states: int):
        super().__init__()
        if states < 1 or hidden < 2:
            raise ContractViolation(f"Encoder needs states >= 1 and hidden >= 2, got {states}, {hidden}")
        self.view = view
        self.n_timepoints = n_timepoints
        self.hidden = hidden
        self.states = states
        self.w_in = nn.Parameter(_xavier(states, n_timepoints, hidden))
        self.w_hidden = nn.Parameter(_xavier(states, hidden, hidden))
        self.b1 = nn.Parameter(torch.full((states, 1, hidden), BIAS_INIT, dtype=DTYPE))
        self.w2 = nn.Parameter(_xavier(states, hidden, hidden))
        self.b2 = nn.Parameter(torch.full((states, 1, hidden), BIAS_INIT, dtype=DTYPE))
        self.attention = nn.Parameter(_xavier(hidden, 1)[:, 0].clone())

    def first_weight(self, iteration: int, width: int) -> torch.Tensor:
        weight = self.w_in if iteration == 0 else self.w_hidden
        if weight.shape[-2] != width:
            raise ContractViolation(
                f"{self.view} encoder expects input width {weight.shape[-2]} at iteration {iteration}, got {width}"
            )
        return weight

    def branches(self, a_hat: torch.Tensor, features: torch.Tensor, iteration: int) -> torch.Tensor:
        """Z_s for every state: [..., c, N, d_h]."""
        u1 = self.first_weight(iteration, features.shape[-1])
        a_hat = a_hat.unsqueeze(-3)
        x = features.unsqueeze(-3)
        h = torch.relu(a_hat @ x @ u1 + self.b1)
        return torch.relu(a_hat @ h @ self.w2 + self.b2)

    def forward(self, conn: ConnectivityMatrix, features: torch.Tensor, iteration: int) -> HiddenRep:
        z = self.branches(normalize_adjacency(conn.values), features, iteration)
        state_pooled = z.mean(dim=-2)  # [..., c, d_h]
        alpha = torch.softmax(state_pooled @ self.attention, dim=-1)  # [..., c]
        node_matrix = (alpha[..., :, None, None] * z).sum(dim=-3)
        return HiddenRep(
            node_matrix=node_matrix,
            pooled=node_matrix.mean(dim=-2),
            state_pooled=state_pooled,
            attention=alpha,
            view=self.view,
            iteration=iteration,
        )


def multi_state_forward(
    conn: ConnectivityMatrix, features: torch.Tensor, encoder: MultiStateEncoder, iteration: int = 0
) -> HiddenRep:
    return encoder(conn, features, iteration)


def encoder_loss(state_pooled: torch.Tensor) -> torch.Tensor:
    """
    Mean squared cosine between distinct state vectors, in [0, 1].
    state_pooled: [..., c, d]; a zero-norm state contributes 0 to its pairs.
    """
    c = state_pooled.shape[-2]
    if c < 2:
        return state_pooled.new_zeros(state_pooled.shape[:-2])
    unit = unit_rows(state_pooled)
    cos = unit @ unit.transpose(-1, -2)
    upper = torch.triu(torch.ones(c, c, dtype=torch.bool), diagonal=1)
    return (cos[..., upper] ** 2).sum(dim=-1) * (2.0 / (c * (c - 1)))


class ClassifierHead(nn.Module):
    """[h_fc ; h_ec] -> affine -> relu -> affine -> 2 logits."""

    def __init__(self, hidden: int, inner: int, n_classes: int = 2):
        super().__init__()
        self.inner = nn.Linear(2 * hidden, inner, dtype=DTYPE)
        self.out = nn.Linear(inner, n_classes, dtype=DTYPE)

    def forward(self, fc_pooled: torch.Tensor, ec_pooled: torch.Tensor) -> torch.Tensor:
        h = torch.cat([fc_pooled, ec_pooled], dim=-1)
        return self.out(torch.relu(self.inner(h)))


def classify_head(fc_pooled: torch.Tensor, ec_pooled: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    return head(fc_pooled, ec_pooled)
