import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator, List, Sequence

import numpy as np


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def batches(indices: Sequence[int], batch_size: int) -> Iterator[List[int]]:
    for start in range(0, len(indices), batch_size):
        yield list(indices[start : start + batch_size])


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", delete=False) as handle:
        handle.write(data)
        temporary = Path(handle.name)
    os.replace(temporary, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def append_jsonl(path: Path, row: Any) -> None:  # noqa: ANN401
    with path.open("a") as handle:
        handle.write(json.dumps(row, sort_keys=True) + "\n")


def content_hash(paths: Iterable[Path], root: Path | None = None) -> str:
    digest = hashlib.sha256()
    for path in sorted(paths):
        name = str(path.relative_to(root)) if root else path.name
        digest.update(name.encode("utf-8"))
        digest.update(b"\0")
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


def one_hot(indices: np.ndarray, size: int, dtype: Any = np.float32) -> np.ndarray:  # noqa: ANN401
    return np.eye(size, dtype=dtype)[np.asarray(indices)]


def binary_iou(first: np.ndarray, second: np.ndarray, empty: float = 0.0) -> float:
    first, second = np.asarray(first, dtype=bool), np.asarray(second, dtype=bool)
    union = int(np.logical_or(first, second).sum())
    if not union:
        return empty
    return float(np.logical_and(first, second).sum() / union)
