import io
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from connlearn.priors import PriorMatrix, compute_priors
from connlearn.signals import BoldMatrix
from connlearn.storage.files import atomic_write_bytes, sha256_bytes

logger = logging.getLogger(__name__)


def prior_key(bold: BoldMatrix, bins: int, lag: int) -> str:
    values = np.ascontiguousarray(bold.values, dtype="<f8")
    shape = np.asarray(values.shape, dtype="<i8")
    return sha256_bytes(shape.tobytes(), values.tobytes(), f"bins={bins};lag={lag}".encode())


class PriorCache:
    """
    Memoizes (pearson, transfer entropy) per subject, keyed by the subject's
    bytes and the TE settings. With a directory, entries persist as .npz files.
    """

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory else None
        self._memory: Dict[str, Tuple[PriorMatrix, PriorMatrix]] = {}
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Optional[Path]:
        return self.directory / f"{key}.npz" if self.directory else None

    def get(self, bold: BoldMatrix, bins: int, lag: int) -> Tuple[PriorMatrix, PriorMatrix]:
        key = prior_key(bold, bins, lag)
        if key in self._memory:
            self.hits += 1
            return self._memory[key]
        path = self._path(key)
        if path is not None and path.exists():
            with np.load(path) as stored:
                priors = (
                    PriorMatrix(values=stored["pearson"], kind="pearson"),
                    PriorMatrix(values=stored["transfer_entropy"], kind="transfer_entropy", bins=bins, lag=lag),
                )
            self.hits += 1
        else:
            priors = compute_priors(bold, bins, lag)
            self.misses += 1
            if path is not None:
                buffer = io.BytesIO()
                np.savez(buffer, pearson=priors[0].values, transfer_entropy=priors[1].values)
                atomic_write_bytes(path, buffer.getvalue())
        self._memory[key] = priors
        return priors
