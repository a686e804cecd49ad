"""
Gradients, the Adam update and the finite-difference harness.

Gradients come from torch's reverse pass over the recorded forward of the
whole unrolled pipeline (both views, all iterations). Priors enter as
detached constants and never receive gradient.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from connlearn.config import TrainConfig
from connlearn.errors import GradientError, LookupFailure

logger = logging.getLogger(__name__)

NamedParams = Sequence[Tuple[str, torch.nn.Parameter]]

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
# below this magnitude both gradients count as zero for the relative error
REL_FLOOR = 1e-6
# one-sided slopes further apart than this fraction mark a relu kink inside the step
KINK_RATIO = 0.1


def backward(loss: torch.Tensor, named_params: NamedParams) -> Dict[str, torch.Tensor]:
    """Exact gradients of loss for exactly the given parameters; unused ones get zeros."""
    params = [p for _, p in named_params]
    if loss.requires_grad and params:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    out = {}
    for (name, p), g in zip(named_params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not bool(torch.isfinite(g).all()):
            raise GradientError(f"Non-finite gradient for parameter {name}", parameter=name)
        out[name] = g
    return out


def make_optimizer(params: Sequence[torch.nn.Parameter], config: TrainConfig, lr: Optional[float] = None) -> torch.optim.AdamW:
    """Adam with decoupled weight decay: p <- p (1 - lr wd), then the bias-corrected Adam step."""
    return torch.optim.AdamW(
        list(params), lr=lr or config.lr, betas=BETAS, eps=ADAM_EPS, weight_decay=config.weight_decay
    )


def adam_step(optimizer: torch.optim.Optimizer, named_params: NamedParams, grads: Dict[str, torch.Tensor]) -> None:
    for name, p in named_params:
        p.grad = grads[name]
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


class GradCheckEntry(BaseModel):
    parameter: str
    entries: int
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    kinks: int = 0
    passed: bool


class GradCheckReport(BaseModel):
    objective: str
    step: float
    tolerance: float
    passed: bool
    entries: List[GradCheckEntry]

    def failures(self) -> List[str]:
        return [e.parameter for e in self.entries if not e.passed]


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    named_params: NamedParams,
    objective: str = "loss",
    step: float = FD_STEP,
    tolerance: float = FD_TOLERANCE,
    corrupt: Optional[str] = None,
) -> GradCheckReport:
    """
    Compare backward() against central differences entry by entry. Where the
    one-sided slopes disagree (a relu kink within ±step) the analytic value
    passes if it lies between them, as a subgradient must.
    `corrupt` names a parameter whose analytic gradient is deliberately skewed
    before comparison, to prove the harness can fail.
    """
    analytic = backward(loss_fn(), named_params)
    if corrupt is not None:
        if corrupt not in analytic:
            raise LookupFailure(f"Unknown parameter {corrupt!r}")
        skewed = analytic[corrupt].clone().view(-1)
        skewed[0] += 1e-3 + 0.5 * abs(float(skewed[0]))
        analytic[corrupt] = skewed.view_as(analytic[corrupt])

    entries = []
    with torch.no_grad():
        base = float(loss_fn())
        for name, p in named_params:
            flat = p.data.view(-1)
            grad = analytic[name].reshape(-1)
            rel_errors = np.zeros(flat.numel())
            abs_errors = np.zeros(flat.numel())
            kinks = 0
            for k in range(flat.numel()):
                original = float(flat[k])
                flat[k] = original + step
                plus = float(loss_fn())
                flat[k] = original - step
                minus = float(loss_fn())
                flat[k] = original
                numeric = (plus - minus) / (2 * step)
                exact = float(grad[k])
                abs_errors[k] = abs(exact - numeric)
                rel_errors[k] = abs_errors[k] / max(abs(exact), abs(numeric), REL_FLOOR)
                if rel_errors[k] >= tolerance:
                    right, left = (plus - base) / step, (base - minus) / step
                    if abs(right - left) > KINK_RATIO * max(abs(right), abs(left), REL_FLOOR):
                        slack = tolerance * max(abs(right), abs(left), REL_FLOOR)
                        if min(left, right) - slack <= exact <= max(left, right) + slack:
                            rel_errors[k] = abs_errors[k] = 0.0
                            kinks += 1
            worst = int(rel_errors.argmax()) if rel_errors.size else 0
            max_rel = float(rel_errors.max()) if rel_errors.size else 0.0
            entries.append(
                GradCheckEntry(
                    parameter=name,
                    entries=flat.numel(),
                    max_rel_error=max_rel,
                    max_abs_error=float(abs_errors.max()) if abs_errors.size else 0.0,
                    worst_index=worst,
                    kinks=kinks,
                    passed=max_rel < tolerance,
                )
            )
    report = GradCheckReport(
        objective=objective,
        step=step,
        tolerance=tolerance,
        passed=all(e.passed for e in entries),
        entries=entries,
    )
    if not report.passed:
        logger.error("Gradient check %s failed for: %s", objective, ", ".join(report.failures()))
    return report
