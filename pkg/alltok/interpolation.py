"""Parameter-free resampling baseline for the learned tokenizers."""

from typing import Any, Tuple

import numpy as np
from pydantic import BaseModel, field_validator
from scipy import ndimage

from alltok.exceptions import DimensionError, TokenIndexError
from alltok.types import InterpolationMode


class InterpolationTokenizer(BaseModel):
    downsample_ratio: int = 16
    mode: InterpolationMode = "nearest"
    n_bins: int = 128
    value_range: Tuple[float, float] = (0.0, 10.0)

    @field_validator("n_bins")
    @classmethod
    def _bins_validator(cls, n_bins: int) -> int:
        if n_bins < 2:  # noqa: PLR2004
            raise ValueError(f"Interpolation tokenizer needs at least 2 bins, got {n_bins}")
        return n_bins

    @classmethod
    def depth(cls, **overrides: Any) -> "InterpolationTokenizer":  # noqa: ANN401
        return cls.model_validate({"mode": "bilinear", "n_bins": 128, "value_range": (0.0, 10.0)} | overrides)

    @classmethod
    def mask(cls, **overrides: Any) -> "InterpolationTokenizer":  # noqa: ANN401
        return cls.model_validate({"mode": "nearest", "n_bins": 2, "value_range": (0.0, 1.0)} | overrides)

    @property
    def bin_width(self) -> float:
        low, high = self.value_range
        return (high - low) / self.n_bins

    def _downsample(self, values: np.ndarray) -> np.ndarray:
        ratio = self.downsample_ratio
        if self.mode == "nearest":
            return values[ratio // 2 :: ratio, ratio // 2 :: ratio]
        return ndimage.zoom(values, 1 / ratio, order=1, mode="nearest", grid_mode=True)

    def _upsample(self, values: np.ndarray) -> np.ndarray:
        ratio = self.downsample_ratio
        if self.mode == "nearest":
            return np.repeat(np.repeat(values, ratio, axis=0), ratio, axis=1)
        return ndimage.zoom(values, ratio, order=1, mode="nearest", grid_mode=True)

    def tokenize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        height, width = values.shape
        if height % self.downsample_ratio or width % self.downsample_ratio:
            raise DimensionError(f"Input {height}x{width} is not divisible by ratio {self.downsample_ratio}")
        low, _ = self.value_range
        bins = np.floor((self._downsample(values) - low) / self.bin_width)
        return np.clip(bins, 0, self.n_bins - 1).astype(np.int64)

    def detokenize(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.n_bins):
            raise TokenIndexError(f"Interpolation token out of range [0, {self.n_bins})")
        low, _ = self.value_range
        return self._upsample(low + (tokens + 0.5) * self.bin_width)

    def roundtrip(self, values: np.ndarray) -> np.ndarray:
        return self.detokenize(self.tokenize(values))


def interpolation_tokenizer(
    values: np.ndarray, downsample_ratio: int, mode: InterpolationMode, n_bins: int
) -> Tuple[np.ndarray, InterpolationTokenizer]:
    """Token grid of ``values`` plus the codec needed to invert it."""
    codec = (InterpolationTokenizer.mask if mode == "nearest" else InterpolationTokenizer.depth)(
        downsample_ratio=downsample_ratio, n_bins=n_bins
    )
    return codec.tokenize(values), codec
