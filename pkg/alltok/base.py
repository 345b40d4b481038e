import json
from pathlib import Path
from typing import Any, Dict, cast

from pydantic import BaseModel, ConfigDict

MAX_DEPTH = 10.0
MASK_SIZE = 64
COORD_TOKENS = 4
MASK_TOKENS = 16
RECORD_LENGTH = COORD_TOKENS + 1 + MASK_TOKENS
GRADCHECK_TOLERANCE = 1e-4
PROBABILITY_TOLERANCE = 1e-4


class BaseModelConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class BaseReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    def description(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    @classmethod
    def load_description(cls, file_path: Path) -> Dict[str, Any]:
        return cast(Dict[str, Any], json.loads(file_path.read_text()))

    def save_description(self, file_path: Path) -> None:
        file_path.write_text(json.dumps(self.description(), indent=4, sort_keys=True))

    def to_json(self) -> str:
        return json.dumps(self.description(), sort_keys=True)
