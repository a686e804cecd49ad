import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from connlearn.errors import ConfigurationError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

CACHE_DIR_ENV = os.getenv("CONNLEARN_CACHE_DIR", "").strip()
DEBUG_ENV = os.getenv("CONNLEARN_DEBUG", "").strip().lower() in {"1", "true", "yes"}
LOG_LEVEL = os.getenv("CONNLEARN_LOG_LEVEL", "INFO").strip().upper() or "INFO"

LearnerMode = Literal["adaptive", "frozen", "fixed"]
SimilarityMetric = Literal["cosine", "inner_product", "euclidean", "absolute"]


class ContrastiveConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    normalize: bool = Field(True, description="L2-normalize embeddings before dot products")
    symmetric: bool = Field(False, description="Average in the EC-anchored mirror term")


class TrainConfig(BaseModel):
    """Every hyperparameter of pretraining and fine-tuning."""

    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(3, ge=1, description="Iteration layers L")
    heads: int = Field(4, gt=0, description="Similarity heads m")
    states: int = Field(3, gt=0, description="Encoder state branches c")
    hidden: int = Field(64, ge=2, description="Encoder hidden width d_h")
    classifier_hidden: int = Field(32, gt=0, description="Inner width of the classification head")
    gamma: float = Field(0.01, gt=0, description="Frobenius trade-off inside the graph loss")
    alpha: float = Field(0.001, ge=0, description="Graph-loss coefficient")
    beta: float = Field(0.001, ge=0, description="Encoder-loss coefficient")
    tau: float = Field(0.5, gt=0, description="Contrastive temperature")
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    epochs: int = Field(400, gt=0, description="Pretraining epochs")
    finetune_epochs: int = Field(100, gt=0)
    batch_size: int = Field(32, gt=0)
    te_bins: int = Field(8, ge=2)
    te_lag: int = Field(1, ge=1)
    seed: int = 0
    zscore: bool = True
    learner_mode: LearnerMode = "adaptive"
    similarity: SimilarityMetric = "cosine"
    contrastive: ContrastiveConfig = Field(default_factory=ContrastiveConfig)
    folds: int = Field(5, ge=2)
    finetune_ratio: float = Field(1.0, gt=0, le=1)
    cache_dir: Optional[str] = None
    threads: int = Field(1, gt=0)
    debug_checks: bool = False
    log_wall_time: bool = False

    @model_validator(mode="after")
    def _env_overrides(self) -> "TrainConfig":
        if DEBUG_ENV:
            self.debug_checks = True
        return self

    def resolved_cache_dir(self) -> Optional[Path]:
        if self.cache_dir:
            return Path(self.cache_dir)
        return Path(CACHE_DIR_ENV) if CACHE_DIR_ENV else None

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


# Fields that fix parameter shapes; a checkpoint only fits a config that agrees on these.
STRUCTURAL_FIELDS = ("iterations", "heads", "states", "hidden", "classifier_hidden")


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(
    path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
    base: Optional[Dict[str, Any]] = None,
) -> TrainConfig:
    """
    Defaults < base (e.g. a checkpoint's saved config) < JSON file < explicit
    overrides (CLI flags). None-valued overrides are ignored.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(values, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
    flat = {k: v for k, v in (overrides or {}).items() if v is not None}
    values = _deep_merge(_deep_merge(dict(base or {}), values), flat)
    try:
        config = TrainConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e
    logger.info("Config: %s", json.dumps(config.echo(), sort_keys=True))
    return config


def structural_mismatch(saved: Dict[str, Any], config: TrainConfig) -> Dict[str, tuple]:
    return {
        name: (saved.get(name), getattr(config, name))
        for name in STRUCTURAL_FIELDS
        if saved.get(name) != getattr(config, name)
    }
