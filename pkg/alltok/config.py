"""Run-level configuration bundles: built-in defaults, YAML files, flag overrides."""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import BaseModel, Field

from alltok.optim import TrainConfig
from alltok.solver import DecodeOptions, SolverConfig
from alltok.tokenizer import MaskAugSpec, TokenizerConfig
from alltok.training import LossConfig
from alltok.types import TokenizerTask

logger = logging.getLogger(__name__)

DATA_ROOT_VARIABLE = "ALLTOK_DATA_ROOT"


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_VARIABLE, "data"))


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_yaml(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    content = yaml.safe_load(path.read_text()) or {}
    if not isinstance(content, dict):
        raise ValueError(f"Configuration file {path} must hold a mapping, got {type(content).__name__}")
    return content


def _drop_unset(overrides: Dict[str, Any]) -> Dict[str, Any]:
    cleaned: Dict[str, Any] = {}
    for key, value in overrides.items():
        if isinstance(value, dict):
            value = _drop_unset(value)
            if value:
                cleaned[key] = value
        elif value is not None:
            cleaned[key] = value
    return cleaned


class TokenizerRunConfig(BaseModel):
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augmentation: MaskAugSpec = Field(default_factory=MaskAugSpec)
    n_holdout: int = Field(default=0, ge=0)

    @classmethod
    def defaults(cls, task: TokenizerTask) -> "TokenizerRunConfig":
        if task == "depth":
            return cls(tokenizer=TokenizerConfig.depth(), train=TrainConfig.depth_tokenizer())
        return cls(tokenizer=TokenizerConfig.mask(), train=TrainConfig.mask_tokenizer())

    @classmethod
    def resolve(
        cls, task: TokenizerTask, path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None
    ) -> "TokenizerRunConfig":
        """Flags override the file, which overrides the task defaults."""
        resolved = deep_merge(cls.defaults(task).model_dump(mode="json"), read_yaml(path))
        resolved = deep_merge(resolved, _drop_unset(overrides or {}))
        resolved["tokenizer"]["task"] = task
        return cls.model_validate(resolved)


class SolverRunConfig(BaseModel):
    solver: SolverConfig = Field(default_factory=SolverConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(schedule="linear", lr=1e-3))
    decode: DecodeOptions = Field(default_factory=DecodeOptions)
    n_holdout: int = Field(default=0, ge=0)

    @classmethod
    def resolve(cls, path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> "SolverRunConfig":
        resolved = deep_merge(cls().model_dump(mode="json"), read_yaml(path))
        return cls.model_validate(deep_merge(resolved, _drop_unset(overrides or {})))
