"""
Checkpoints: a directory holding manifest.json (config echo, parameter index)
and params.bin (every parameter as little-endian float64, concatenated in
index order).
"""
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ValidationError

from connlearn import __version__
from connlearn.config import TrainConfig
from connlearn.encoder import ENCODER_KIND
from connlearn.errors import ConfigurationError, SchemaError
from connlearn.pipeline import ConnectivityPipeline
from connlearn.storage.files import PathLike, dump_json, sha256_bytes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
ITEM_BYTES = 8

Stage = Literal["pretrained", "finetuned"]


class ParamEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int


class CheckpointManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    stage: Stage
    seed: int
    config: Dict[str, Any]
    n_timepoints: int
    encoder: str = ENCODER_KIND
    params: List[ParamEntry]
    metadata: Dict[str, Any] = {}


@dataclass
class Checkpoint:
    manifest: CheckpointManifest
    params: Dict[str, np.ndarray]

    def manifest_bytes(self) -> bytes:
        return dump_json(self.manifest.model_dump(mode="json")).encode("utf-8")

    def params_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(self.params[e.name], dtype="<f8").tobytes() for e in self.manifest.params
        )

    @property
    def sha256(self) -> str:
        return sha256_bytes(self.manifest_bytes(), self.params_bytes())

    def config(self) -> TrainConfig:
        return TrainConfig.model_validate(self.manifest.config)


def checkpoint_from_pipeline(
    pipeline: ConnectivityPipeline, stage: Stage, metadata: Optional[Dict[str, Any]] = None
) -> Checkpoint:
    entries, params, offset = [], {}, 0
    for name, tensor in pipeline.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f8", copy=True)
        entries.append(ParamEntry(name=name, shape=list(arr.shape), offset=offset))
        params[name] = arr
        offset += arr.size * ITEM_BYTES
    manifest = CheckpointManifest(
        stage=stage,
        seed=pipeline.config.seed,
        config=pipeline.config.echo(),
        n_timepoints=pipeline.n_timepoints,
        params=entries,
        metadata={"library_version": __version__, **(metadata or {})},
    )
    return Checkpoint(manifest=manifest, params=params)


def load_into_pipeline(checkpoint: Checkpoint, pipeline: ConnectivityPipeline) -> ConnectivityPipeline:
    state = {name: torch.from_numpy(arr.astype(np.float64)) for name, arr in checkpoint.params.items()}
    try:
        pipeline.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ConfigurationError(f"Checkpoint does not fit this pipeline: {e}") from e
    return pipeline


def pipeline_from_checkpoint(checkpoint: Checkpoint, config: Optional[TrainConfig] = None) -> ConnectivityPipeline:
    config = config or checkpoint.config()
    pipeline = ConnectivityPipeline(config, checkpoint.manifest.n_timepoints)
    return load_into_pipeline(checkpoint, pipeline)


def save_checkpoint(checkpoint: Checkpoint, out_dir: PathLike) -> Path:
    """Both files land in a temp directory that is renamed into place."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_dir.with_name(f".{out_dir.name}.tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        (tmp / PARAMS_FILE).write_bytes(checkpoint.params_bytes())
        (tmp / MANIFEST_FILE).write_bytes(checkpoint.manifest_bytes())
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    logger.info("Checkpoint (%s) written to %s", checkpoint.manifest.stage, out_dir)
    return out_dir


def load_checkpoint(ckpt_dir: PathLike) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    manifest_path, params_path = ckpt_dir / MANIFEST_FILE, ckpt_dir / PARAMS_FILE
    for path in (manifest_path, params_path):
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint file not found: {path}")
    try:
        manifest = CheckpointManifest.model_validate_json(manifest_path.read_text())
    except ValidationError as e:
        raise SchemaError(f"{manifest_path}: {e}") from e
    if manifest.format_version != FORMAT_VERSION:
        raise SchemaError(f"{manifest_path}: unsupported format_version {manifest.format_version}")

    raw = params_path.read_bytes()
    expected = sum(int(np.prod(e.shape, dtype=np.int64)) for e in manifest.params) * ITEM_BYTES
    if len(raw) != expected:
        raise SchemaError(f"{params_path}: {len(raw)} bytes, index describes {expected}")
    params = {}
    for e in manifest.params:
        count = int(np.prod(e.shape, dtype=np.int64))
        params[e.name] = np.frombuffer(raw, dtype="<f8", count=count, offset=e.offset).reshape(e.shape).copy()
    return Checkpoint(manifest=manifest, params=params)
