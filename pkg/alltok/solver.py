import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from alltok.base import COORD_TOKENS, RECORD_LENGTH, BaseModelConfig
from alltok.exceptions import CheckpointFormatError, ContractError, DimensionError
from alltok.functional import softmax
from alltok.io import load_checkpoint, save_checkpoint
from alltok.nn import Conv2d, DecoderBlock, Embedding, EncoderBlock, LayerNorm, Linear, Module, normal_init
from alltok.optim import Parameter
from alltok.sequence import (
    EOS,
    TokenSequence,
    Vocabulary,
    decode_depth,
    decode_depth_soft,
    decode_instances,
)
from alltok.tensor import Tensor, no_grad
from alltok.tokenizer import DepthMap, TokenizerModel, detokenize
from alltok.types import DecodeMode, Task
from alltok.utils import seeded_rng

logger = logging.getLogger(__name__)


class SolverConfig(BaseModel):
    image_size: int = 32
    in_channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 6
    n_decoder_blocks: int = 6
    ffn_hidden: int = 128
    max_seq_len: int = 128
    depth_size: int = 64
    depth_downsample_ratio: int = 32
    max_instances: int = 3
    parallel_depth: bool = True
    n_parallel_blocks: int = 2
    vocabulary: Vocabulary = Field(default_factory=Vocabulary)
    seed: int = 0

    @model_validator(mode="after")
    def _shape_validator(self) -> "SolverConfig":
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.depth_size % self.depth_downsample_ratio:
            raise ValueError(f"depth_size {self.depth_size} is not divisible by {self.depth_downsample_ratio}")
        if self.instance_length > self.max_seq_len:
            raise ValueError(f"{self.max_instances} instances need {self.instance_length} > max_seq_len tokens")
        return self

    @property
    def depth_grid(self) -> int:
        return self.depth_size // self.depth_downsample_ratio

    @property
    def depth_length(self) -> int:
        return self.depth_grid**2

    @property
    def instance_length(self) -> int:
        return self.max_instances * RECORD_LENGTH + 1

    @property
    def memory_length(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class DecodeOptions(BaseModel):
    mode: DecodeMode = "hard"
    detokenizer_mode: Optional[DecodeMode] = None
    temperature: float = 1.0
    max_instances: Optional[int] = None
    parallel: bool = False
    constrained: bool = True
    score_threshold: float = 0.0

    @field_validator("temperature")
    @classmethod
    def _temperature_validator(cls, temperature: float) -> float:
        if temperature <= 0:
            raise ValueError(f"Temperature must be positive, got {temperature}")
        return temperature

    @property
    def detokenizer(self) -> DecodeMode:
        return self.detokenizer_mode or self.mode


class SolverModel(Module):
    config: SolverConfig
    stem: Conv2d
    memory_positions: Parameter
    encoder_blocks: List[EncoderBlock]
    encoder_norm: LayerNorm
    token_embedding: Embedding
    query_positions: Parameter
    decoder_blocks: List[DecoderBlock]
    decoder_norm: LayerNorm
    head: Linear
    parallel_queries: Optional[Parameter] = None
    parallel_blocks: List[DecoderBlock] = Field(default_factory=list)
    parallel_norm: Optional[LayerNorm] = None
    parallel_head: Optional[Linear] = None

    @property
    def vocabulary(self) -> Vocabulary:
        return self.config.vocabulary

    @property
    def has_parallel_head(self) -> bool:
        return self.parallel_queries is not None

    def task_parameters(self, task: Task, parallel: bool = True) -> List[Parameter]:
        """Parameters reached by the loss of ``task``."""
        if task == "dep" and parallel:
            return self.parameters()
        return [param for name, param in self.named_parameters() if not name.startswith("parallel_")]

    def embed_inputs(self, ids: np.ndarray) -> Tensor:
        """Token embeddings plus query positions for a [N, T] id array."""
        length = ids.shape[1]
        return self.token_embedding(ids) + self.query_positions.tensor[:length]

    def decode_hidden(self, inputs: Tensor, memory: Tensor) -> Tensor:
        hidden = inputs
        for block in self.decoder_blocks:
            hidden = block(hidden, memory, causal=True)
        return self.decoder_norm(hidden)

    def teacher_forced_logits(self, memory: Tensor, task: Task, targets: np.ndarray) -> Tensor:
        """Logits [N, T, V] for targets [N, T]; step t sees the task token and targets before t."""
        n = targets.shape[0]
        if targets.shape[1] > self.config.max_seq_len:
            raise DimensionError(f"Target length {targets.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        start = np.full((n, 1), self.vocabulary.task_token(task), dtype=np.int64)
        inputs = np.concatenate([start, targets[:, :-1]], axis=1)
        return self.head(self.decode_hidden(self.embed_inputs(inputs), memory))

    def parallel_logits(self, memory: Tensor) -> Tensor:
        """Depth-codebook logits [N, h*w, K] for every grid cell at once."""
        if self.parallel_queries is None or self.parallel_norm is None or self.parallel_head is None:
            raise ContractError("This solver was built without a parallel depth head")
        n = memory.shape[0]
        queries = self.parallel_queries.tensor.reshape(1, *self.parallel_queries.data.shape)
        hidden = queries + Tensor(np.zeros((n, 1, 1), dtype=memory.dtype))
        for block in self.parallel_blocks:
            hidden = block(hidden, memory, causal=False)
        return self.parallel_head(self.parallel_norm(hidden))


def build_solver(config: SolverConfig) -> SolverModel:
    rng = seeded_rng(config.seed)
    embed = config.embed_dim
    vocabulary = config.vocabulary
    parallel: Dict[str, Any] = {}
    if config.parallel_depth:
        parallel = {
            "parallel_queries": Parameter.create(normal_init(rng, (config.depth_length, embed), 0.02)),
            "parallel_blocks": [
                DecoderBlock.build(embed, config.n_heads, config.ffn_hidden, rng)
                for _ in range(config.n_parallel_blocks)
            ],
            "parallel_norm": LayerNorm.build(embed),
            "parallel_head": Linear.build(embed, vocabulary.depth.size, rng),
        }
    model = SolverModel(
        config=config,
        stem=Conv2d.build(config.in_channels, embed, config.patch_size, rng, stride=config.patch_size),
        memory_positions=Parameter.create(normal_init(rng, (config.memory_length, embed), 0.02)),
        encoder_blocks=[
            EncoderBlock.build(embed, config.n_heads, config.ffn_hidden, rng) for _ in range(config.n_encoder_blocks)
        ],
        encoder_norm=LayerNorm.build(embed),
        token_embedding=Embedding.build(vocabulary.size, embed, rng),
        query_positions=Parameter.create(normal_init(rng, (config.max_seq_len, embed), 0.02)),
        decoder_blocks=[
            DecoderBlock.build(embed, config.n_heads, config.ffn_hidden, rng) for _ in range(config.n_decoder_blocks)
        ],
        decoder_norm=LayerNorm.build(embed),
        head=Linear.build(embed, vocabulary.size, rng),
        **parallel,
    )
    logger.info(f"Built solver with {model.parameter_count()} parameters over a vocabulary of {vocabulary.size}")
    return model


def encode_image(model: SolverModel, image: Union[Tensor, np.ndarray]) -> Tensor:
    """Patch-stem plus transformer encoder memory [N, L, E]."""
    image_ = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.stem.weight.data.dtype))
    if image_.ndim != 4:  # noqa: PLR2004
        raise DimensionError(f"Expected images [N, C, H, W], got {image_.shape}")
    config = model.config
    _, channels, height, width = image_.shape
    if height % config.patch_size or width % config.patch_size:
        raise DimensionError(f"Image {height}x{width} is not divisible by patch size {config.patch_size}")
    if (height, width) != (config.image_size, config.image_size) or channels != config.in_channels:
        raise DimensionError(f"Solver expects {config.in_channels}x{config.image_size}x{config.image_size} images")
    patches = model.stem(image_)
    n, embed = patches.shape[:2]
    hidden = patches.reshape(n, embed, -1).transpose(0, 2, 1) + model.memory_positions.tensor
    for block in model.encoder_blocks:
        hidden = block(hidden)
    return model.encoder_norm(hidden)


def _allowed_tokens(vocabulary: Vocabulary, task: Task, step: int, max_instances: int) -> np.ndarray:
    allowed = np.zeros(vocabulary.size, dtype=bool)
    if task == "dep":
        allowed[vocabulary.depth.start : vocabulary.depth.stop] = True
        return allowed
    position = step % RECORD_LENGTH
    if position == 0:
        allowed[EOS] = True
        if step // RECORD_LENGTH < max_instances:
            allowed[vocabulary.coord.start : vocabulary.coord.stop] = True
    elif position < COORD_TOKENS:
        allowed[vocabulary.coord.start : vocabulary.coord.stop] = True
    elif position == COORD_TOKENS:
        allowed[vocabulary.classes.start : vocabulary.classes.stop] = True
    else:
        allowed[vocabulary.mask.start : vocabulary.mask.stop] = True
    return allowed


def feedback_embeddings(
    table: np.ndarray, probs: np.ndarray, chosen: np.ndarray, finished: np.ndarray, mode: DecodeMode
) -> np.ndarray:
    """Next decoder inputs; finished rows feed the EOS embedding in both modes."""
    if mode == "hard":
        return table[chosen]
    soft = probs @ table.astype(np.float64)
    return np.where(finished[:, None], table[EOS], soft).astype(table.dtype)


def decode_autoregressive(
    model: SolverModel, memory: Tensor, task: Task, options: Optional[DecodeOptions] = None
) -> List[TokenSequence]:
    """Greedy decoding of one sequence per memory row, keeping each step's distribution.

    Hard mode feeds the argmax token's embedding back; soft mode feeds the
    probability-weighted average of the whole embedding table.
    """
    options = options or DecodeOptions()
    config = model.config
    vocabulary = model.vocabulary
    max_instances = options.max_instances if options.max_instances is not None else config.max_instances
    target_length = config.depth_length if task == "dep" else config.max_seq_len
    limit = min(target_length, config.max_seq_len)
    n = memory.shape[0]
    table = model.token_embedding.weight.data
    start = np.full((n, 1), vocabulary.task_token(task), dtype=np.int64)
    with no_grad():
        inputs = model.token_embedding(start).data
        tokens = np.zeros((n, 0), dtype=np.int64)
        step_probs: List[np.ndarray] = []
        finished = np.zeros(n, dtype=bool)
        for step in range(limit):
            positions = model.query_positions.data[: step + 1]
            hidden = model.decode_hidden(Tensor(inputs + positions), memory)
            logits = model.head(hidden[:, -1]).data.astype(np.float64) / options.temperature
            if options.constrained:
                logits = np.where(_allowed_tokens(vocabulary, task, step, max_instances), logits, -np.inf)
            probs = softmax(Tensor(logits)).data
            chosen = np.argmax(probs, axis=-1)
            chosen = np.where(finished, EOS, chosen)
            tokens = np.concatenate([tokens, chosen[:, None]], axis=1)
            step_probs.append(probs)
            finished |= chosen == EOS
            next_input = feedback_embeddings(table, probs, chosen, finished, options.mode)
            inputs = np.concatenate([inputs, next_input[:, None]], axis=1)
            if task == "ins" and finished.all():
                break
    stacked = np.stack(step_probs, axis=1) if step_probs else np.zeros((n, 0, vocabulary.size))
    sequences = []
    for row in range(n):
        ids = tokens[row].tolist()
        length = ids.index(EOS) + 1 if task == "ins" and EOS in ids else len(ids)
        truncated = (task == "ins" and EOS not in ids) or (task == "dep" and target_length > config.max_seq_len)
        if truncated:
            logger.warning(f"Decoding of row {row} hit max_seq_len {config.max_seq_len}")
        sequences.append(
            TokenSequence(
                ids=ids[:length],
                loss_mask=[True] * length,
                task=task,
                probs=stacked[row, :length],
                truncated=truncated,
            )
        )
    return sequences


def decode_parallel_depth(model: SolverModel, memory: Tensor) -> List[TokenSequence]:
    """Depth tokens for the whole grid from one non-causal forward pass."""
    vocabulary = model.vocabulary
    with no_grad():
        logits = model.parallel_logits(memory).data.astype(np.float64)
    sliced = softmax(Tensor(logits)).data
    full = np.zeros(sliced.shape[:2] + (vocabulary.size,), dtype=np.float64)
    full[..., vocabulary.depth.start : vocabulary.depth.stop] = sliced
    ids = np.argmax(sliced, axis=-1) + vocabulary.depth.start
    return [
        TokenSequence(ids=row.tolist(), loss_mask=[True] * len(row), task="dep", probs=probs)
        for row, probs in zip(ids, full)
    ]


def decode(model: SolverModel, memory: Tensor, task: Task, options: DecodeOptions) -> List[TokenSequence]:
    if options.parallel:
        if task != "dep":
            raise ContractError("Parallel decoding is only defined for the depth task")
        return decode_parallel_depth(model, memory)
    return decode_autoregressive(model, memory, task, options)


SolverOutput = Union[DepthMap, List[Any]]


def infer(
    model: SolverModel,
    image: np.ndarray,
    task: Task,
    options: DecodeOptions,
    detokenizer: TokenizerModel,
) -> List[SolverOutput]:
    """Task outputs for a batch of images [N, C, H, W] (or a single [C, H, W])."""
    images = np.asarray(image)
    images = images[None] if images.ndim == 3 else images  # noqa: PLR2004
    with no_grad():
        memory = encode_image(model, images)
    sequences = decode(model, memory, task, options)
    vocabulary = model.vocabulary
    outputs: List[SolverOutput] = []
    if task == "ins":
        for sequence in sequences:
            outputs.append(
                decode_instances(
                    sequence, detokenizer, vocabulary, options.score_threshold, mode=options.detokenizer
                )
            )
        return outputs
    grid = (model.config.depth_grid, model.config.depth_grid)
    for sequence in sequences:
        if options.detokenizer == "soft":
            values = detokenize(detokenizer, decode_depth_soft(sequence, vocabulary, grid))
        else:
            values = detokenize(detokenizer, decode_depth(sequence, vocabulary, grid))
        outputs.append(DepthMap.dense(values.astype(np.float32)))
    return outputs


def save_solver(
    model: SolverModel, path: Path, epoch: Optional[int] = None, extra: Optional[Dict[str, Any]] = None
) -> None:
    manifest: Dict[str, Any] = {
        "kind": "solver",
        "config": model.config.model_dump(mode="json"),
        "vocabulary": model.vocabulary.manifest(),
    }
    if epoch is not None:
        manifest["epoch"] = epoch
    manifest |= extra or {}
    state = model.state_dict() | model.optimizer_state()
    save_checkpoint(path, sorted(state.items()), manifest)


def load_solver(path: Path) -> Tuple[SolverModel, Dict[str, Any]]:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "solver":
        raise CheckpointFormatError(f"{path} is not a solver checkpoint")
    model = build_solver(SolverConfig.model_validate(manifest["config"]))
    model.load_state_dict(tensors)
    return model, manifest
