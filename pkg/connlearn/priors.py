"""
Fixed structural priors: Pearson correlation (FC view) and transfer entropy (EC view).

Both are computed once per subject and never receive gradients.
"""
import logging
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from connlearn.errors import ConfigurationError
from connlearn.signals import BoldMatrix

logger = logging.getLogger(__name__)

PriorKind = Literal["pearson", "transfer_entropy"]


class PriorMatrix(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    kind: PriorKind
    bins: Optional[int] = None
    lag: Optional[int] = None

    @field_validator("values", mode="before")
    @classmethod
    def _square(cls, v):
        arr = np.array(v, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"Prior must be square, got shape {arr.shape}")
        arr.flags.writeable = False
        return arr


def pearson_matrix(bold: BoldMatrix) -> PriorMatrix:
    """Sample Pearson correlation; constant rows correlate 0 with everything but themselves."""
    values = bold.values
    t = values.shape[1]
    centered = values - values.mean(axis=1, keepdims=True)
    std = np.sqrt((centered ** 2).sum(axis=1) / t)
    live = np.ptp(values, axis=1) > 0
    scaled = np.zeros_like(centered)
    scaled[live] = centered[live] / std[live, None]
    corr = scaled @ scaled.T / t
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return PriorMatrix(values=corr, kind="pearson")


def quantile_codes(values: np.ndarray, bins: int) -> np.ndarray:
    """
    Equal-frequency discretization per row. Ties are broken by time index
    (stable sort), so each level holds floor or ceil of T / bins samples.
    """
    n, t = values.shape
    order = np.argsort(values, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(t), (n, t)), axis=1)
    return (ranks * bins) // t


def _te_into_target(codes: np.ndarray, target: int, bins: int, lag: int) -> np.ndarray:
    """Plug-in TE (bits) from every source row into one target row."""
    n_regions, t = codes.shape
    samples = t - lag
    future = codes[target, lag:]
    present = codes[target, :samples]
    sources = codes[:, :samples]

    cube = bins ** 3
    idx = ((future * bins + present) * bins)[None, :] + sources
    idx = idx + (np.arange(n_regions) * cube)[:, None]
    counts = np.bincount(idx.ravel(), minlength=n_regions * cube).reshape(
        n_regions, bins, bins, bins
    ).astype(np.float64)  # axes: source, y+, y, x

    c_yx = counts.sum(axis=1, keepdims=True)
    c_fy = counts.sum(axis=3, keepdims=True)
    c_y = counts.sum(axis=(1, 3), keepdims=True)

    occupied = counts > 0
    ratio = np.ones_like(counts)
    ratio[occupied] = (counts * c_y)[occupied] / (c_yx * c_fy)[occupied]
    te = (counts * np.log2(ratio)).sum(axis=(1, 2, 3)) / samples
    return np.maximum(te, 0.0)


def transfer_entropy_matrix(bold: BoldMatrix, bins: int = 8, lag: int = 1) -> PriorMatrix:
    """W[i, j] = TE(x_j -> x_i) in bits, diagonal 0."""
    values = bold.values
    t = values.shape[1]
    if bins < 2:
        raise ConfigurationError(f"bins must be >= 2, got {bins}")
    if lag < 1:
        raise ConfigurationError(f"lag must be >= 1, got {lag}")
    if bins > t:
        raise ConfigurationError(f"bins ({bins}) exceed the number of time points ({t})")
    if t < lag + 4:
        raise ConfigurationError(f"T={t} is too short for lag {lag}")

    codes = quantile_codes(values, bins)
    n = values.shape[0]
    te = np.zeros((n, n))
    for target in range(n):
        te[target] = _te_into_target(codes, target, bins, lag)
    np.fill_diagonal(te, 0.0)
    # rank coding would turn a flat row into a time staircase
    flat = np.ptp(values, axis=1) == 0
    te[flat, :] = 0.0
    te[:, flat] = 0.0
    return PriorMatrix(values=te, kind="transfer_entropy", bins=bins, lag=lag)


def compute_priors(bold: BoldMatrix, bins: int, lag: int) -> Tuple[PriorMatrix, PriorMatrix]:
    return pearson_matrix(bold), transfer_entropy_matrix(bold, bins, lag)
