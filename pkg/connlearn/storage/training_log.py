import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from connlearn.storage.files import PathLike, atomic_write_text


class TrainingLog:
    """JSON-lines log, one object per epoch. The whole file is rewritten atomically on each append."""

    def __init__(self, path: Optional[PathLike] = None):
        self.path = Path(path) if path else None
        self.records: List[Dict[str, Any]] = []

    def append(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self.path is not None:
            atomic_write_text(self.path, self.text())

    def text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


def read_training_log(path: PathLike) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Training log not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
