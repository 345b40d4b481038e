import logging
from pathlib import Path
from typing import Any, Dict, List

from pydantic import Field

from alltok.base import BaseReport
from alltok.exceptions import CheckpointFormatError
from alltok.utils import atomic_write_text, content_hash

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class RunManifest(BaseReport):
    """What a command was run with and what it wrote; enough to rerun it."""

    command: str
    options: Dict[str, Any] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    input_hash: str = ""
    output_hash: str = ""
    outputs: List[str] = Field(default_factory=list)

    def save(self, directory: Path) -> Path:
        path = directory / MANIFEST_NAME
        atomic_write_text(path, self.to_json() + "\n")
        logger.info(f"Manifest for {self.command} written to {path}")
        return path

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        path = path / MANIFEST_NAME if path.is_dir() else path
        try:
            return cls.model_validate(cls.load_description(path))
        except ValueError as e:
            raise CheckpointFormatError(f"{path} is not a run manifest: {e}") from e


def hash_inputs(directory: Path, pattern: str = "*.aitk") -> str:
    """Content hash of the data files of a directory, independent of its location."""
    return content_hash(directory.glob(pattern), root=directory)
