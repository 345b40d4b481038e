import numpy as np
import pytest
from pydantic import ValidationError

from alltok.exceptions import DimensionError, TokenIndexError
from alltok.interpolation import InterpolationTokenizer, interpolation_tokenizer
from alltok.utils import binary_iou


def test_constant_depth_within_half_a_bin() -> None:
    codec = InterpolationTokenizer.depth()
    values = np.full((64, 64), 5.0)
    tokens = codec.tokenize(values)
    assert tokens.shape == (4, 4)
    assert np.abs(codec.roundtrip(values) - values).max() <= codec.bin_width / 2 + 1e-9


def test_block_aligned_square_survives() -> None:
    square = np.zeros((64, 64))
    square[16:48, 16:48] = 1.0
    assert binary_iou(InterpolationTokenizer.mask().roundtrip(square) > 0.5, square > 0.5) == 1.0


def test_checkerboard_is_lost() -> None:
    rows, cols = np.indices((64, 64))
    checkerboard = ((rows + cols) % 2 == 0).astype(float)
    assert binary_iou(InterpolationTokenizer.mask().roundtrip(checkerboard) > 0.5, checkerboard > 0.5) <= 0.5


def test_values_outside_range_are_clipped() -> None:
    codec = InterpolationTokenizer.depth(downsample_ratio=2, n_bins=4)
    values = np.full((4, 4), -5.0)
    values[2:] = 50.0
    tokens = codec.tokenize(values)
    assert tokens.min() >= 0 and tokens.max() <= 3


def test_errors() -> None:
    with pytest.raises(ValidationError):
        InterpolationTokenizer(n_bins=1)
    with pytest.raises(DimensionError):
        InterpolationTokenizer().tokenize(np.zeros((20, 20)))
    with pytest.raises(TokenIndexError):
        InterpolationTokenizer(n_bins=4).detokenize(np.array([[4]]))


def test_factory_returns_codec() -> None:
    tokens, codec = interpolation_tokenizer(np.full((32, 32), 2.0), 8, "bilinear", 64)
    assert tokens.shape == (4, 4)
    assert codec.n_bins == 64
    assert codec.detokenize(tokens).shape == (32, 32)
