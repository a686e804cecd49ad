"""
Dataset manifests and per-subject CSV files.

Manifest JSON: {name, n_regions, labeled, subjects: [{id, path, label?}]}.
Subject CSV: N rows x T columns, no header, decimal floats.
"""
import json
import logging
from io import StringIO
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from connlearn.errors import ParseError, SchemaError
from connlearn.signals import BoldMatrix, DatasetManifest, SubjectRecord, build_manifest
from connlearn.storage.files import PathLike, atomic_write_text, write_json

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FLOAT_FORMAT = "%.17g"


class ManifestSubject(BaseModel):
    id: str
    path: str
    label: Optional[int] = None


class ManifestFile(BaseModel):
    name: str
    n_regions: int
    labeled: bool = False
    subjects: List[ManifestSubject]


def read_matrix_csv(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"{path}: file is empty") from e
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: {e}") from e
    try:
        # float() per cell keeps the round trip exact
        return np.asarray(frame.to_numpy(), dtype=np.float64)
    except (TypeError, ValueError):
        coerced = frame.apply(pd.to_numeric, errors="coerce")
        row, col = np.argwhere(coerced.isna().to_numpy())[0]
        cell = frame.iat[row, col]
        raise ParseError(f"{path}: non-numeric cell {cell!r} at row {row + 1}, column {col + 1}") from None


def write_matrix_csv(path: PathLike, values: np.ndarray) -> Path:
    buffer = StringIO()
    pd.DataFrame(np.asarray(values, dtype=np.float64)).to_csv(
        buffer, header=False, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )
    return atomic_write_text(path, buffer.getvalue())


def load_dataset(manifest_path: PathLike) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Manifest not found: {manifest_path}")
    try:
        declared = ManifestFile.model_validate(json.loads(manifest_path.read_text()))
    except json.JSONDecodeError as e:
        raise ParseError(f"{manifest_path}: invalid JSON ({e})") from e
    except ValidationError as e:
        raise SchemaError(f"{manifest_path}: {e}") from e

    root = manifest_path.parent
    records = []
    for entry in declared.subjects:
        values = read_matrix_csv(root / entry.path)
        if values.shape[0] != declared.n_regions:
            raise SchemaError(
                f"Subject {entry.id!r} has {values.shape[0]} regions, manifest declares {declared.n_regions}"
            )
        if declared.labeled and entry.label is None:
            raise SchemaError(f"Subject {entry.id!r} has no label in a labeled dataset")
        try:
            records.append(
                SubjectRecord(
                    subject_id=entry.id,
                    bold=BoldMatrix(values=values),
                    label=entry.label if declared.labeled else None,
                )
            )
        except ValidationError as e:
            raise SchemaError(f"Subject {entry.id!r}: {e}") from e
    dataset = build_manifest(declared.name, records, declared.labeled)
    logger.info("Loaded %s: %d subjects, %d regions", declared.name, len(records), declared.n_regions)
    return dataset


def write_dataset(dataset: DatasetManifest, out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    entries = []
    for rec in dataset.subjects:
        rel = f"subjects/{rec.subject_id}.csv"
        write_matrix_csv(out_dir / rel, rec.bold.values)
        entry = {"id": rec.subject_id, "path": rel}
        if dataset.labeled:
            entry["label"] = rec.label
        entries.append(entry)
    manifest = {
        "name": dataset.name,
        "n_regions": dataset.n_regions,
        "labeled": dataset.labeled,
        "subjects": entries,
    }
    path = write_json(out_dir / MANIFEST_NAME, manifest)
    logger.info("Wrote %d subjects to %s", len(entries), out_dir)
    return path
