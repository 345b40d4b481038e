"""Codebook, hard quantization and soft-token embedding."""

import logging
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import model_validator

from alltok.base import PROBABILITY_TOLERANCE, BaseModelConfig
from alltok.exceptions import ContractError, DimensionError, EmptyCodebookError, TokenIndexError
from alltok.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

SOFT_TOKEN_TOLERANCE = 1e-6


class Codebook(BaseModelConfig):
    embeddings: np.ndarray
    ema_cluster_size: np.ndarray
    ema_embed_sum: np.ndarray
    decay: float = 0.99
    epsilon: float = 1e-5
    dead_code_threshold: float = 0.0
    initialized: bool = False

    @model_validator(mode="after")
    def _shapes_validator(self) -> "Codebook":
        if self.embeddings.ndim != 2:  # noqa: PLR2004
            raise ValueError(f"Codebook embeddings must be [K, D], got {self.embeddings.shape}")
        size, dim = self.embeddings.shape
        if size < 2 or dim < 1:  # noqa: PLR2004
            raise ValueError(f"Codebook needs K >= 2 and D >= 1, got K={size}, D={dim}")
        if self.ema_cluster_size.shape != (size,) or self.ema_embed_sum.shape != (size, dim):
            raise ValueError("EMA statistics do not match the codebook shape")
        if (self.ema_cluster_size < 0).any():
            raise ValueError("EMA cluster sizes must be non-negative")
        return self

    @classmethod
    def create(
        cls,
        size: int,
        dim: int,
        rng: np.random.Generator,
        decay: float = 0.99,
        epsilon: float = 1e-5,
        dead_code_threshold: float = 0.0,
    ) -> "Codebook":
        embeddings = rng.uniform(-1 / size, 1 / size, (size, dim)).astype(np.float32)
        return cls(
            embeddings=embeddings,
            ema_cluster_size=np.ones(size, dtype=np.float32),
            ema_embed_sum=embeddings.copy(),
            decay=decay,
            epsilon=epsilon,
            dead_code_threshold=dead_code_threshold,
        )

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def smoothed_cluster_size(self) -> np.ndarray:
        total = self.ema_cluster_size.sum()
        return (self.ema_cluster_size + self.epsilon) / (total + self.size * self.epsilon) * total

    def cast(self, dtype: np.dtype) -> None:
        self.embeddings = self.embeddings.astype(dtype)
        self.ema_cluster_size = self.ema_cluster_size.astype(dtype)
        self.ema_embed_sum = self.ema_embed_sum.astype(dtype)


class SoftToken(BaseModelConfig):
    """Probability vectors over a codebook, one per position (last axis)."""

    probs: np.ndarray

    @model_validator(mode="after")
    def _distribution_validator(self) -> "SoftToken":
        if self.probs.ndim < 1:
            raise ValueError("Soft token probabilities need at least one axis")
        if (self.probs < 0).any():
            raise ValueError("Soft token probabilities must be non-negative")
        deviation = np.abs(self.probs.sum(axis=-1) - 1.0)
        if deviation.size and deviation.max() > SOFT_TOKEN_TOLERANCE:
            raise ValueError(f"Soft token rows must sum to 1, worst deviation {deviation.max():.2e}")
        return self

    @classmethod
    def from_indices(cls, indices: np.ndarray, size: int) -> "SoftToken":
        return cls(probs=np.eye(size, dtype=np.float64)[np.asarray(indices)])

    @property
    def size(self) -> int:
        return int(self.probs.shape[-1])

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1)


def _check_not_empty(codebook: Codebook) -> None:
    if codebook.embeddings.size == 0:
        raise EmptyCodebookError("Codebook has no entries")


def quantize_hard(z: Union[Tensor, np.ndarray], codebook: Codebook) -> Tuple[np.ndarray, Tensor]:
    """Nearest codebook row per input row, ties resolved to the lowest index."""
    _check_not_empty(codebook)
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    if data.ndim != 2 or data.shape[1] != codebook.dim:  # noqa: PLR2004
        raise DimensionError(f"Expected z of shape [N, {codebook.dim}], got {data.shape}")
    embeddings = codebook.embeddings.astype(data.dtype, copy=False)
    distances = ((data[:, None, :] - embeddings[None, :, :]) ** 2).sum(axis=-1)
    indices = np.argmin(distances, axis=1)
    return indices, Tensor(embeddings[indices].copy())


def embed_indices(indices: np.ndarray, codebook: Codebook) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= codebook.size):
        raise TokenIndexError(f"Codebook index out of range [0, {codebook.size})")
    return codebook.embeddings[indices]


def embed_soft(probs: Union[Tensor, np.ndarray], codebook: Codebook) -> Tensor:
    """Probability-weighted average of codebook rows; differentiable in ``probs``."""
    probs_ = as_tensor(probs)
    if probs_.shape[-1] != codebook.size:
        raise DimensionError(f"Probabilities over {probs_.shape[-1]} entries, codebook has {codebook.size}")
    deviation = np.abs(probs_.data.sum(axis=-1) - 1.0)
    if (probs_.data < -PROBABILITY_TOLERANCE).any() or (deviation.size and deviation.max() > PROBABILITY_TOLERANCE):
        raise ContractError("embed_soft needs probability rows that sum to 1")
    leading = probs_.shape[:-1]
    flat = probs_.reshape(-1, codebook.size)
    embedded = flat @ Tensor(codebook.embeddings.astype(probs_.dtype, copy=False))
    return embedded.reshape(*leading, codebook.dim)


def straight_through(z: Tensor, z_q: Tensor) -> Tensor:
    """Forward value of ``z_q``, gradient passed unchanged to ``z``."""
    if z.shape != z_q.shape:
        raise DimensionError(f"straight_through shapes differ: {z.shape} vs {z_q.shape}")
    return Tensor.from_op(z_q.data.astype(z.dtype, copy=True), (z,), lambda g: (g,), "straight_through")


def vq_losses(z: Tensor, z_q: Union[Tensor, np.ndarray], beta: float) -> Tensor:
    """Commitment loss ``beta * mean((z - sg(z_q))**2)``."""
    target = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q)
    if z.shape != target.shape:
        raise DimensionError(f"vq_losses shapes differ: {z.shape} vs {target.shape}")
    diff = z - Tensor(target.astype(z.dtype, copy=False))
    return (diff * diff).mean() * beta


def ema_update(
    codebook: Codebook, z: Union[Tensor, np.ndarray], indices: np.ndarray, rng: Optional[np.random.Generator] = None
) -> None:
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    data = data.astype(codebook.embeddings.dtype, copy=False)
    counts = np.bincount(indices, minlength=codebook.size).astype(codebook.embeddings.dtype)
    sums = np.zeros_like(codebook.ema_embed_sum)
    np.add.at(sums, indices, data)
    decay = codebook.decay
    codebook.ema_cluster_size = decay * codebook.ema_cluster_size + (1 - decay) * counts
    codebook.ema_embed_sum = decay * codebook.ema_embed_sum + (1 - decay) * sums
    smoothed = codebook.smoothed_cluster_size()
    codebook.embeddings = codebook.ema_embed_sum / smoothed[:, None]
    if codebook.dead_code_threshold > 0 and rng is not None and len(data):
        _restart_dead_codes(codebook, data, rng, smoothed)


def _restart_dead_codes(codebook: Codebook, data: np.ndarray, rng: np.random.Generator, smoothed: np.ndarray) -> None:
    dead = np.flatnonzero(codebook.ema_cluster_size < codebook.dead_code_threshold)
    if not dead.size:
        return
    picks = data[rng.integers(0, len(data), dead.size)]
    codebook.embeddings[dead] = picks
    codebook.ema_embed_sum[dead] = picks * smoothed[dead, None]
    logger.debug(f"Restarted {dead.size} dead codes")


def initialize_from_batch(codebook: Codebook, z: np.ndarray, rng: np.random.Generator) -> None:
    """Seed the codebook with encoder outputs of the first training batch."""
    if codebook.initialized:
        return
    replace = len(z) < codebook.size
    picks = z[rng.choice(len(z), codebook.size, replace=replace)].astype(codebook.embeddings.dtype)
    codebook.embeddings = picks.copy()
    codebook.ema_embed_sum = picks * codebook.ema_cluster_size[:, None]
    codebook.initialized = True


def perplexity(indices: np.ndarray, size: int) -> float:
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=size).astype(np.float64)
    if not counts.sum():
        return 0.0
    probs = counts / counts.sum()
    nonzero = probs[probs > 0]
    return float(np.exp(-(nonzero * np.log(nonzero)).sum()))
