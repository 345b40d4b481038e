"""Shared vocabulary and the depth / instance sequence formats.

An instance record is 21 ids: 4 coordinate bins (x0, y0, x1, y1), one class
token and 16 mask tokens from the mask tokenizer's 4x4 grid. Instance
sequences end with EOS; depth sequences are the raster-ordered token grid.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from alltok.base import COORD_TOKENS, MASK_SIZE, MASK_TOKENS, RECORD_LENGTH, BaseModelConfig
from alltok.exceptions import (
    DecodeError,
    DimensionError,
    SequenceFormatError,
    TokenIndexError,
    VocabularyMismatchError,
)
from alltok.tokenizer import TokenizerModel, detokenize, tokenize
from alltok.types import DecodeMode, Task, VocabularyRange
from alltok.utils import atomic_write_text
from alltok.vq import SoftToken

logger = logging.getLogger(__name__)

PAD, EOS, DEP, INS = 0, 1, 2, 3
SPECIAL_TOKENS = 4
BACKGROUND_CLASS = -1
BOX_TOLERANCE = 1e-6
MASS_FLOOR = 1e-8


class TokenRange(BaseModel):
    name: VocabularyRange
    start: int
    size: int

    @property
    def stop(self) -> int:
        return self.start + self.size

    def __contains__(self, token: int) -> bool:
        return self.start <= token < self.stop

    def ids(self) -> np.ndarray:
        return np.arange(self.start, self.stop)


class Vocabulary(BaseModel):
    n_coord_bins: int = Field(default=2000, ge=2)
    n_classes: int = Field(default=2, ge=1)
    mask_codebook_size: int = Field(default=128, ge=2)
    depth_codebook_size: int = Field(default=128, ge=2)

    @property
    def special(self) -> TokenRange:
        return TokenRange(name="special", start=0, size=SPECIAL_TOKENS)

    @property
    def coord(self) -> TokenRange:
        return TokenRange(name="coord", start=self.special.stop, size=self.n_coord_bins)

    @property
    def classes(self) -> TokenRange:
        """Real classes followed by the background class."""
        return TokenRange(name="class", start=self.coord.stop, size=self.n_classes + 1)

    @property
    def mask(self) -> TokenRange:
        return TokenRange(name="mask", start=self.classes.stop, size=self.mask_codebook_size)

    @property
    def depth(self) -> TokenRange:
        return TokenRange(name="depth", start=self.mask.stop, size=self.depth_codebook_size)

    def ranges(self) -> List[TokenRange]:
        return [self.special, self.coord, self.classes, self.mask, self.depth]

    def get_range(self, name: VocabularyRange) -> TokenRange:
        return next(token_range for token_range in self.ranges() if token_range.name == name)

    @property
    def size(self) -> int:
        return self.depth.stop

    def locate(self, token: int) -> Tuple[VocabularyRange, int]:
        for token_range in self.ranges():
            if token in token_range:
                return token_range.name, token - token_range.start
        raise TokenIndexError(f"Token {token} outside vocabulary [0, {self.size})")

    def token(self, name: VocabularyRange, offset: int) -> int:
        token_range = self.get_range(name)
        if not 0 <= offset < token_range.size:
            raise TokenIndexError(f"Offset {offset} outside the {name} range of size {token_range.size}")
        return token_range.start + offset

    def class_token(self, class_id: int) -> int:
        return self.token("class", self.n_classes if class_id == BACKGROUND_CLASS else class_id)

    @property
    def background_token(self) -> int:
        return self.class_token(BACKGROUND_CLASS)

    def task_token(self, task: Task) -> int:
        return DEP if task == "dep" else INS

    def manifest(self) -> Dict[str, int]:
        return self.model_dump() | {"size": self.size}

    def diff(self, other: "Vocabulary") -> Dict[str, Tuple[Any, Any]]:
        mine, theirs = self.model_dump(), other.model_dump()
        return {key: (mine[key], theirs[key]) for key in mine if mine[key] != theirs[key]}

    def check_compatible(self, other: "Vocabulary") -> None:
        difference = self.diff(other)
        if difference:
            raise VocabularyMismatchError(difference)


def _crop_bounds(box: Tuple[float, float, float, float], image_size: int) -> Tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    row0, col0 = int(round(y0 * image_size)), int(round(x0 * image_size))
    row1 = max(int(round(y1 * image_size)), row0 + 1)
    col1 = max(int(round(x1 * image_size)), col0 + 1)
    return min(row0, image_size - 1), min(col0, image_size - 1), min(row1, image_size), min(col1, image_size)


def _sample_positions(count: int, span: int) -> np.ndarray:
    return np.minimum(((np.arange(count) + 0.5) * span / count).astype(np.int64), span - 1)


def crop_mask(mask: np.ndarray, box: Tuple[float, float, float, float]) -> np.ndarray:
    """Nearest-neighbour resample of the box region of a full-image mask to 64x64."""
    row0, col0, row1, col1 = _crop_bounds(box, mask.shape[0])
    rows = row0 + _sample_positions(MASK_SIZE, row1 - row0)
    cols = col0 + _sample_positions(MASK_SIZE, col1 - col0)
    return np.asarray(mask, dtype=bool)[np.ix_(rows, cols)]


class InstanceAnnotation(BaseModelConfig):
    box: Tuple[float, float, float, float]
    class_id: int
    mask64: np.ndarray
    is_noise: bool = False
    score: float = 1.0

    @model_validator(mode="after")
    def _instance_validator(self) -> "InstanceAnnotation":
        x0, y0, x1, y1 = self.box
        if x0 > x1 or y0 > y1:
            raise ValueError(f"Box corners out of order: {self.box}")
        if min(self.box) < -BOX_TOLERANCE or max(self.box) > 1 + BOX_TOLERANCE:
            raise ValueError(f"Box must be normalized to [0, 1]: {self.box}")
        if self.mask64.shape != (MASK_SIZE, MASK_SIZE):
            raise ValueError(f"Instance mask must be {MASK_SIZE}x{MASK_SIZE}, got {self.mask64.shape}")
        if self.is_noise and (self.class_id != BACKGROUND_CLASS or np.any(self.mask64)):
            raise ValueError("Noise instances carry the background class and an empty mask")
        return self

    @classmethod
    def noise(cls, box: Tuple[float, float, float, float]) -> "InstanceAnnotation":
        return cls(
            box=box, class_id=BACKGROUND_CLASS, mask64=np.zeros((MASK_SIZE, MASK_SIZE), dtype=bool), is_noise=True
        )

    def paste(self, image_size: int) -> np.ndarray:
        """Full-image boolean mask with the 64x64 crop resampled into the box."""
        row0, col0, row1, col1 = _crop_bounds(self.box, image_size)
        full = np.zeros((image_size, image_size), dtype=bool)
        rows = _sample_positions(row1 - row0, MASK_SIZE)
        cols = _sample_positions(col1 - col0, MASK_SIZE)
        full[row0:row1, col0:col1] = np.asarray(self.mask64, dtype=bool)[np.ix_(rows, cols)]
        return full


class TokenSequence(BaseModelConfig):
    ids: List[int]
    loss_mask: List[bool]
    task: Task
    probs: Optional[np.ndarray] = None
    truncated: bool = False
    record_order: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _lengths_validator(self) -> "TokenSequence":
        if len(self.ids) != len(self.loss_mask):
            raise ValueError(f"{len(self.ids)} ids but {len(self.loss_mask)} loss mask entries")
        if self.probs is not None and self.probs.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids but {self.probs.shape[0]} probability rows")
        return self

    def __len__(self) -> int:
        return len(self.ids)

    def check_vocabulary(self, vocabulary: Vocabulary) -> None:
        for offset, token in enumerate(self.ids):
            if not 0 <= token < vocabulary.size:
                raise DecodeError(f"Token {token} outside vocabulary of size {vocabulary.size}", offset)

    def to_row(self) -> Dict[str, Any]:
        return {"ids": list(self.ids), "loss_mask": list(self.loss_mask), "task": self.task}

    @classmethod
    def from_row(cls, row: Dict[str, Any]) -> "TokenSequence":
        return cls(ids=row["ids"], loss_mask=row["loss_mask"], task=row["task"])


def write_sequences(path: Path, sequences: Sequence[TokenSequence]) -> None:
    atomic_write_text(path, "".join(json.dumps(sequence.to_row()) + "\n" for sequence in sequences))


def read_sequences(path: Path) -> List[TokenSequence]:
    return [TokenSequence.from_row(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def quantize_box(box: Sequence[float], n_bins: int) -> List[int]:
    coords = np.asarray(box, dtype=np.float64)
    if coords.min() < -BOX_TOLERANCE or coords.max() > 1 + BOX_TOLERANCE:
        raise SequenceFormatError(f"Box coordinates must lie in [0, 1]: {list(box)}")
    return [int(token) for token in np.clip(np.floor(np.clip(coords, 0, 1) * n_bins), 0, n_bins - 1)]


def dequantize_box(tokens: Sequence[int], n_bins: int) -> Tuple[float, float, float, float]:
    x0, y0, x1, y1 = ((np.asarray(tokens, dtype=np.float64) + 0.5) / n_bins).tolist()
    return x0, y0, x1, y1


def restrict_probs(full_probs: np.ndarray, token_range: TokenRange) -> SoftToken:
    """Renormalize the slice of full-vocabulary probabilities that belongs to ``token_range``."""
    sliced = np.asarray(full_probs, dtype=np.float64)[..., token_range.start : token_range.stop]
    mass = sliced.sum(axis=-1, keepdims=True)
    fallback = np.eye(token_range.size)[np.argmax(sliced, axis=-1)]
    restricted = np.where(mass < MASS_FLOOR, fallback, sliced / np.maximum(mass, MASS_FLOOR))
    return SoftToken(probs=restricted)


def noise_boxes(
    instances: Sequence[InstanceAnnotation], n_noise: int, rng: np.random.Generator
) -> List[Tuple[float, float, float, float]]:
    """Half jittered copies of real boxes, half uniformly random boxes."""
    boxes: List[Tuple[float, float, float, float]] = []
    n_jitter = n_noise // 2 if instances else 0
    for _ in range(n_jitter):
        x0, y0, x1, y1 = instances[int(rng.integers(len(instances)))].box
        width, height = max(x1 - x0, 1e-3), max(y1 - y0, 1e-3)
        shift = rng.normal(0, 0.2, 2) * (width, height)
        scale = np.exp(rng.normal(0, 0.2, 2))
        cx, cy = (x0 + x1) / 2 + shift[0], (y0 + y1) / 2 + shift[1]
        half_w, half_h = width * scale[0] / 2, height * scale[1] / 2
        box = np.clip([cx - half_w, cy - half_h, cx + half_w, cy + half_h], 0, 1)
        boxes.append((float(box[0]), float(box[1]), float(box[2]), float(box[3])))
    for _ in range(n_noise - n_jitter):
        xs, ys = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
        boxes.append((float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1])))
    return boxes


def _check_mask_grid(mask_tokenizer: TokenizerModel) -> None:
    if mask_tokenizer.grid_size**2 != MASK_TOKENS:
        grid = mask_tokenizer.grid_size
        raise SequenceFormatError(f"Mask tokenizer produces a {grid}x{grid} grid, instance records need 4x4")


def encode_instances(
    instances: Sequence[InstanceAnnotation],
    mask_tokenizer: TokenizerModel,
    n_noise: int,
    rng: np.random.Generator,
    vocabulary: Vocabulary,
    mask_tokens: Optional[Sequence[np.ndarray]] = None,
) -> TokenSequence:
    """Real records in a seeded random order, then noise records, then EOS.

    ``mask_tokens`` may carry precomputed 4x4 grids aligned with ``instances``.
    ``record_order`` lists, per real record, its position in ``instances``.
    """
    _check_mask_grid(mask_tokenizer)
    positions = [position for position, instance in enumerate(instances) if not instance.is_noise]
    real = [instances[position] for position in positions]
    if mask_tokens is None:
        grids = list(tokenize(mask_tokenizer, np.stack([i.mask64 for i in real]).astype(np.float32))) if real else []
    else:
        grids = [grid for grid, instance in zip(mask_tokens, instances) if not instance.is_noise]
    ids: List[int] = []
    loss_mask: List[bool] = []
    order = [int(index) for index in rng.permutation(len(real))]
    for index in order:
        instance = real[index]
        ids += [vocabulary.token("coord", token) for token in quantize_box(instance.box, vocabulary.n_coord_bins)]
        ids.append(vocabulary.class_token(instance.class_id))
        ids += [vocabulary.token("mask", int(token)) for token in np.asarray(grids[index]).reshape(-1)]
        loss_mask += [True] * RECORD_LENGTH
    for box in noise_boxes(real, n_noise, rng):
        ids += [vocabulary.token("coord", token) for token in quantize_box(box, vocabulary.n_coord_bins)]
        ids.append(vocabulary.background_token)
        ids += [vocabulary.mask.start] * MASK_TOKENS
        loss_mask += [True] * (COORD_TOKENS + 1) + [False] * MASK_TOKENS
    ids.append(EOS)
    loss_mask.append(True)
    return TokenSequence(ids=ids, loss_mask=loss_mask, task="ins", record_order=[positions[index] for index in order])


class InstanceRecord(BaseModel):
    offset: int
    coord_bins: List[int]
    class_offset: int
    mask_offsets: List[int]


def instance_body(ids: Sequence[int]) -> List[int]:
    body = list(ids)
    return body[: body.index(EOS)] if EOS in body else body


def parse_instance_records(ids: Sequence[int], vocabulary: Vocabulary) -> List[InstanceRecord]:
    body = instance_body(ids)
    if len(body) % RECORD_LENGTH:
        message = f"Instance sequence body of length {len(body)} is not a multiple of {RECORD_LENGTH}"
        raise DecodeError(message, len(body))
    records = []
    for start in range(0, len(body), RECORD_LENGTH):
        record = body[start : start + RECORD_LENGTH]
        for position, token in enumerate(record):
            expected = (
                vocabulary.coord
                if position < COORD_TOKENS
                else vocabulary.classes
                if position == COORD_TOKENS
                else vocabulary.mask
            )
            if token not in expected:
                raise DecodeError(f"Token {token} is not a {expected.name} token", start + position)
        records.append(
            InstanceRecord(
                offset=start,
                coord_bins=[token - vocabulary.coord.start for token in record[:COORD_TOKENS]],
                class_offset=record[COORD_TOKENS] - vocabulary.classes.start,
                mask_offsets=[token - vocabulary.mask.start for token in record[COORD_TOKENS + 1 :]],
            )
        )
    return records


def _ordered_box(box: Tuple[float, float, float, float]) -> Tuple[float, float, float, float]:
    x0, y0, x1, y1 = box
    return min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)


def decode_instances(
    sequence: TokenSequence,
    mask_detokenizer: TokenizerModel,
    vocabulary: Vocabulary,
    score_threshold: float = 0.0,
    mode: DecodeMode = "hard",
) -> List[InstanceAnnotation]:
    """Instances of the non-background records; soft mode detokenizes mask probabilities."""
    _check_mask_grid(mask_detokenizer)
    records = parse_instance_records(sequence.ids, vocabulary)
    if mode == "soft" and sequence.probs is None:
        logger.warning("Soft decoding requested without probabilities, falling back to hard tokens")
        mode = "hard"
    kept = []
    for record in records:
        if record.class_offset == vocabulary.n_classes:
            continue
        score = 1.0
        if sequence.probs is not None:
            score = float(sequence.probs[record.offset + COORD_TOKENS, vocabulary.classes.start + record.class_offset])
        if score < score_threshold:
            continue
        kept.append((record, score))
    if not kept:
        return []
    grid = mask_detokenizer.grid_size
    if mode == "soft" and sequence.probs is not None:
        rows = np.stack(
            [sequence.probs[record.offset + COORD_TOKENS + 1 : record.offset + RECORD_LENGTH] for record, _ in kept]
        )
        soft = restrict_probs(rows, vocabulary.mask)
        masks = detokenize(mask_detokenizer, SoftToken(probs=soft.probs.reshape(len(kept), grid, grid, -1)))
    else:
        grids = np.asarray([record.mask_offsets for record, _ in kept]).reshape(len(kept), grid, grid)
        masks = detokenize(mask_detokenizer, grids)
    return [
        InstanceAnnotation(
            box=_ordered_box(dequantize_box(record.coord_bins, vocabulary.n_coord_bins)),
            class_id=record.class_offset,
            mask64=mask > 0.5,
            score=score,
        )
        for (record, score), mask in zip(kept, masks)
    ]


def encode_depth(grid: np.ndarray, vocabulary: Vocabulary) -> TokenSequence:
    grid = np.asarray(grid, dtype=np.int64)
    if grid.ndim != 2:  # noqa: PLR2004
        raise DimensionError(f"Depth token grid must be 2D, got {grid.shape}")
    ids = [vocabulary.token("depth", int(token)) for token in grid.reshape(-1)]
    return TokenSequence(ids=ids, loss_mask=[True] * len(ids), task="dep")


def _check_depth_length(sequence: TokenSequence, grid_shape: Tuple[int, int]) -> None:
    height, width = grid_shape
    if len(sequence) != height * width:
        raise SequenceFormatError(f"Depth sequence of length {len(sequence)} does not fill a {height}x{width} grid")


def decode_depth(sequence: TokenSequence, vocabulary: Vocabulary, grid_shape: Tuple[int, int]) -> np.ndarray:
    _check_depth_length(sequence, grid_shape)
    for offset, token in enumerate(sequence.ids):
        if token not in vocabulary.depth:
            raise DecodeError(f"Token {token} is not a depth token", offset)
    return (np.asarray(sequence.ids, dtype=np.int64) - vocabulary.depth.start).reshape(grid_shape)


def decode_depth_soft(sequence: TokenSequence, vocabulary: Vocabulary, grid_shape: Tuple[int, int]) -> SoftToken:
    """Per-cell probabilities over the depth codebook, shape [h, w, K]."""
    _check_depth_length(sequence, grid_shape)
    if sequence.probs is None:
        return SoftToken.from_indices(decode_depth(sequence, vocabulary, grid_shape), vocabulary.depth.size)
    restricted = restrict_probs(sequence.probs, vocabulary.depth)
    return SoftToken(probs=restricted.probs.reshape(*grid_shape, vocabulary.depth.size))
