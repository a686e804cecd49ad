"""
Subject time series: data model, standardization and the synthetic VAR generator.

Per-subject BOLD matrices are N regions x T time points. Disk I/O lives in
connlearn.storage.datasets.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from connlearn.errors import ConfigurationError, LookupFailure, SchemaError

logger = logging.getLogger(__name__)

MIN_REGIONS = 2
MIN_TIMEPOINTS = 8
BURN_IN = 100
TARGET_RADIUS = 0.95
EDGE_DENSITY = 0.15


class BoldMatrix(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    region_ids: Tuple[str, ...] = ()
    constant_rows: Tuple[int, ...] = Field((), description="Rows zeroed by zscore_rows")

    @field_validator("values", mode="before")
    @classmethod
    def _as_matrix(cls, v):
        arr = np.array(v, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"BOLD values must be 2-D, got shape {arr.shape}")
        n, t = arr.shape
        if n < MIN_REGIONS or t < MIN_TIMEPOINTS:
            raise ValueError(f"BOLD needs N >= {MIN_REGIONS} and T >= {MIN_TIMEPOINTS}, got {n}x{t}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("BOLD values must all be finite")
        arr.flags.writeable = False
        return arr

    @model_validator(mode="before")
    @classmethod
    def _fill_region_ids(cls, data):
        if isinstance(data, dict) and not data.get("region_ids"):
            n = len(data.get("values", ()))
            data = {**data, "region_ids": tuple(f"roi-{i:03d}" for i in range(n))}
        return data

    @model_validator(mode="after")
    def _region_count(self) -> "BoldMatrix":
        if len(self.region_ids) != self.values.shape[0]:
            raise ValueError(f"{len(self.region_ids)} region ids for {self.values.shape[0]} rows")
        return self

    @property
    def n_regions(self) -> int:
        return self.values.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[1]


class SubjectRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str
    bold: BoldMatrix
    label: Optional[int] = None

    @field_validator("label")
    @classmethod
    def _binary_label(cls, v):
        if v is not None and v not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {v}")
        return v


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    subjects: Tuple[SubjectRecord, ...]
    n_regions: int
    n_timepoints: int = Field(..., description="Shortest series in the dataset")
    labeled: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "DatasetManifest":
        seen = set()
        for rec in self.subjects:
            if rec.subject_id in seen:
                raise SchemaError(f"Duplicate subject id {rec.subject_id!r}")
            seen.add(rec.subject_id)
            if rec.bold.n_regions != self.n_regions:
                raise SchemaError(
                    f"Subject {rec.subject_id!r} has {rec.bold.n_regions} regions, expected {self.n_regions}"
                )
            if self.labeled and rec.label is None:
                raise SchemaError(f"Subject {rec.subject_id!r} has no label in a labeled dataset")
        return self

    @property
    def timepoints_uniform(self) -> bool:
        return len({rec.bold.n_timepoints for rec in self.subjects}) <= 1

    @property
    def labels(self) -> List[Optional[int]]:
        return [rec.label for rec in self.subjects]

    def subject(self, subject_id: str) -> SubjectRecord:
        for rec in self.subjects:
            if rec.subject_id == subject_id:
                return rec
        raise LookupFailure(f"Unknown subject id {subject_id!r} in dataset {self.name!r}")

    def select(self, indices: Sequence[int], name: Optional[str] = None) -> "DatasetManifest":
        return DatasetManifest(
            name=name or self.name,
            subjects=tuple(self.subjects[i] for i in indices),
            n_regions=self.n_regions,
            n_timepoints=min(self.subjects[i].bold.n_timepoints for i in indices),
            labeled=self.labeled,
        )


def build_manifest(name: str, subjects: Sequence[SubjectRecord], labeled: bool) -> DatasetManifest:
    if not subjects:
        raise SchemaError(f"Dataset {name!r} has no subjects")
    return DatasetManifest(
        name=name,
        subjects=tuple(subjects),
        n_regions=subjects[0].bold.n_regions,
        n_timepoints=min(s.bold.n_timepoints for s in subjects),
        labeled=labeled,
    )


def zscore_rows(bold: BoldMatrix) -> BoldMatrix:
    """Standardize each row with population variance; constant rows become zeros."""
    values = bold.values
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    # a flat row can still show a std of ~1e-17 from rounding in the mean
    constant = np.ptp(values, axis=1) == 0
    out = np.zeros_like(values)
    live = ~constant
    out[live] = (values[live] - mean[live]) / std[live]
    flagged = tuple(int(i) for i in np.flatnonzero(constant))
    if flagged:
        logger.warning("Constant rows zeroed: %s", [bold.region_ids[i] for i in flagged])
    return BoldMatrix(values=out, region_ids=bold.region_ids, constant_rows=flagged)


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix)))) if matrix.size else 0.0


def class_templates(n_regions: int, n_classes: int, rng: np.random.Generator) -> List[np.ndarray]:
    """
    Sparse directed coupling templates, one per class. Entry C[i, j] is the edge j -> i.
    The second template rewires half of the first one's edges.
    """
    n_slots = n_regions * (n_regions - 1)
    n_edges = max(1, int(round(EDGE_DENSITY * n_slots)))
    n_rewired = int(np.ceil(n_edges / 2))
    if n_classes == 2 and n_slots - n_edges < n_rewired:
        raise ConfigurationError(f"{n_regions} regions leave no room to rewire {n_rewired} edges")

    off_diag = [(i, j) for i in range(n_regions) for j in range(n_regions) if i != j]
    picks = rng.permutation(n_slots)
    weights = rng.uniform(0.5, 1.0, size=n_edges)
    base = [(*off_diag[k], w) for k, w in zip(picks[:n_edges], weights)]
    spare = [off_diag[k] for k in picks[n_edges:]]

    def _matrix(edges):
        c = np.zeros((n_regions, n_regions))
        for i, j, w in edges:
            c[i, j] = w
        radius = spectral_radius(c)
        if radius > TARGET_RADIUS:
            c *= TARGET_RADIUS / radius
        return c

    templates = [_matrix(base)]
    if n_classes == 2:
        dropped = set(rng.choice(n_edges, size=n_rewired, replace=False).tolist())
        kept = [e for k, e in enumerate(base) if k not in dropped]
        # rewired edges keep the weights of the edges they replace
        moved = [(*spare[n], base[k][2]) for n, k in enumerate(sorted(dropped))]
        templates.append(_matrix(kept + moved))
    return templates


def simulate_var(
    transition: np.ndarray,
    n_timepoints: int,
    noise_std: float,
    rng: np.random.Generator,
    burn_in: int = BURN_IN,
) -> np.ndarray:
    """x_t = transition @ x_{t-1} + eps_t, returned as regions x time after burn-in."""
    n = transition.shape[0]
    noise = rng.normal(0.0, noise_std, size=(burn_in + n_timepoints, n))
    x = np.zeros(n)
    out = np.empty((n_timepoints, n))
    for t in range(burn_in + n_timepoints):
        x = transition @ x + noise[t]
        if t >= burn_in:
            out[t - burn_in] = x
    return out.T.copy()


def synth_generate(
    n_subjects: int,
    n_regions: int,
    n_timepoints: int,
    n_classes: int = 2,
    coupling_strength: float = 0.6,
    noise_std: float = 1.0,
    seed: int = 0,
    template_seed: Optional[int] = None,
    labeled: Optional[bool] = None,
    name: str = "synthetic",
) -> DatasetManifest:
    """Labeled (or unlabeled) VAR(1) subjects whose classes differ in directed topology."""
    if n_classes not in (1, 2):
        raise ConfigurationError(f"n_classes must be 1 or 2, got {n_classes}")
    if n_subjects < 1:
        raise ConfigurationError("n_subjects must be at least 1")
    if n_regions < MIN_REGIONS or n_timepoints < MIN_TIMEPOINTS:
        raise ConfigurationError(
            f"Need n_regions >= {MIN_REGIONS} and n_timepoints >= {MIN_TIMEPOINTS}"
        )
    if not 0.0 <= coupling_strength < 1.0:
        raise ConfigurationError(f"coupling_strength must lie in [0, 1), got {coupling_strength}")
    if noise_std <= 0:
        raise ConfigurationError(f"noise_std must be positive, got {noise_std}")

    templates = class_templates(
        n_regions, n_classes, np.random.default_rng(seed if template_seed is None else template_seed)
    )
    transitions = [coupling_strength * c for c in templates]
    for k, m in enumerate(transitions):
        radius = spectral_radius(m)
        if radius >= 1.0:
            raise ConfigurationError(f"Class {k} process is non-stationary (spectral radius {radius:.4f})")

    labeled = (n_classes == 2) if labeled is None else labeled
    rng = np.random.default_rng(seed)
    subjects = []
    for k in range(n_subjects):
        label = k % n_classes
        values = simulate_var(transitions[label], n_timepoints, noise_std, rng)
        subjects.append(
            SubjectRecord(
                subject_id=f"sub-{k:04d}",
                bold=BoldMatrix(values=values),
                label=label if labeled else None,
            )
        )
    logger.info(
        "Generated %d subjects (%d regions x %d timepoints, %d class template(s))",
        n_subjects, n_regions, n_timepoints, n_classes,
    )
    return build_manifest(name, subjects, labeled)
