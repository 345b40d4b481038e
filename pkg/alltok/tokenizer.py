import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from alltok.base import BaseModelConfig, BaseReport
from alltok.exceptions import (
    CheckpointFormatError,
    ContractError,
    DimensionError,
    TokenIndexError,
    TrainingDivergedError,
)
from alltok.functional import binary_cross_entropy_with_logits, masked_mse, relu
from alltok.io import load_checkpoint, save_checkpoint
from alltok.nn import Conv2d, ConvTranspose2d, Module, ResBlock
from alltok.optim import TrainConfig, adam_step, zero_grad
from alltok.tensor import Tensor, dtype_of, no_grad
from alltok.types import DType, TokenizerTask
from alltok.utils import append_jsonl, batches, binary_iou, one_hot, seeded_rng
from alltok.vq import (
    Codebook,
    SoftToken,
    embed_soft,
    ema_update,
    initialize_from_batch,
    perplexity,
    quantize_hard,
    straight_through,
    vq_losses,
)

logger = logging.getLogger(__name__)

DEPTH_CHANNELS = [16, 32, 64, 128, 256]


class TokenizerConfig(BaseModel):
    task: TokenizerTask = "depth"
    n_conv_layers: int = 5
    n_resblocks: int = 2
    channel_schedule: List[int] = Field(default_factory=lambda: list(DEPTH_CHANNELS))
    downsample_ratio: int = 32
    codebook_size: int = 128
    code_dim: int = 64
    width_multiplier: float = Field(default=1.0, gt=0)
    input_range: Tuple[float, float] = (0.0, 10.0)
    input_size: int = 64
    norm_groups: int = 8
    use_bias: bool = True
    resblock_hidden: int = 64
    commitment_beta: float = Field(default=0.25, ge=0)
    ema_decay: float = Field(default=0.99, ge=0, lt=1)
    ema_epsilon: float = Field(default=1e-5, gt=0)
    dead_code_threshold: float = Field(default=0.0, ge=0)
    seed: int = 0

    @field_validator("codebook_size")
    @classmethod
    def _codebook_size_validator(cls, codebook_size: int) -> int:
        if codebook_size < 2:  # noqa: PLR2004
            raise ValueError(f"Codebook size must be at least 2, got {codebook_size}")
        return codebook_size

    @model_validator(mode="after")
    def _ratio_validator(self) -> "TokenizerConfig":
        if self.downsample_ratio != 2**self.n_conv_layers:
            raise ValueError(
                f"downsample_ratio {self.downsample_ratio} must equal 2**n_conv_layers ({2**self.n_conv_layers})"
            )
        if self.input_size % self.downsample_ratio:
            raise ValueError(f"input_size {self.input_size} is not divisible by {self.downsample_ratio}")
        low, high = self.input_range
        if not low < high:
            raise ValueError(f"Invalid input range {self.input_range}")
        return self

    @classmethod
    def depth(cls, **overrides: Any) -> "TokenizerConfig":  # noqa: ANN401
        return cls.model_validate({"task": "depth", "input_range": (0.0, 10.0)} | overrides)

    @classmethod
    def mask(cls, **overrides: Any) -> "TokenizerConfig":  # noqa: ANN401
        defaults = {
            "task": "mask",
            "n_conv_layers": 4,
            "channel_schedule": [32, 64, 128, 256],
            "downsample_ratio": 16,
            "input_range": (0.0, 1.0),
        }
        return cls.model_validate(defaults | overrides)

    @classmethod
    def ablation(
        cls, task: TokenizerTask, downsample_ratio: int, codebook_size: int = 128, width_multiplier: float = 1.0
    ) -> "TokenizerConfig":
        n_conv_layers = int(round(math.log2(downsample_ratio)))
        base = cls.depth() if task == "depth" else cls.mask()
        return cls.model_validate(
            base.model_dump()
            | {
                "n_conv_layers": n_conv_layers,
                "downsample_ratio": downsample_ratio,
                "channel_schedule": DEPTH_CHANNELS[-n_conv_layers:],
                "codebook_size": codebook_size,
                "width_multiplier": width_multiplier,
            }
        )

    def _scaled(self, channels: int) -> int:
        groups = max(1, int(round(channels * self.width_multiplier / self.norm_groups)))
        return groups * self.norm_groups

    def channels(self) -> List[int]:
        return [self._scaled(channels) for channels in self.channel_schedule]

    def hidden_channels(self) -> int:
        return self._scaled(self.resblock_hidden)

    @property
    def grid_size(self) -> int:
        return self.input_size // self.downsample_ratio


class DepthMap(BaseModelConfig):
    values: np.ndarray
    valid: np.ndarray

    @model_validator(mode="after")
    def _depth_validator(self) -> "DepthMap":
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:  # noqa: PLR2004
            raise ValueError(f"Depth values {self.values.shape} and valid {self.valid.shape} must be equal 2D shapes")
        if 0 in self.values.shape:
            raise ValueError("Depth map dimensions must be positive")
        if not np.isfinite(self.values[self.valid]).all():
            raise ValueError("Depth values must be finite where valid")
        return self

    @classmethod
    def dense(cls, values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float32)
        return cls(values=values, valid=np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


class MaskAugSpec(BaseModel):
    mask_ratio: float = Field(default=0.5, ge=0, le=1)
    patch_size: int = Field(default=16, ge=1)
    fill_value: float = 0.0

    def patch_count(self, shape: Tuple[int, int]) -> Tuple[int, int]:
        height, width = shape
        if height % self.patch_size or width % self.patch_size:
            raise DimensionError(f"Patch size {self.patch_size} does not divide input {height}x{width}")
        return height // self.patch_size, width // self.patch_size

    def masked_count(self, n_patches: int) -> int:
        return int(math.floor(self.mask_ratio * n_patches + 0.5))


class AugmentedSample(BaseModelConfig):
    corrupted: np.ndarray
    target: np.ndarray
    loss_mask: np.ndarray
    patch_mask: np.ndarray


class TokenizerDataset(BaseModelConfig):
    """Stacked training inputs in physical units with their validity."""

    values: np.ndarray
    valid: np.ndarray

    @model_validator(mode="after")
    def _dataset_validator(self) -> "TokenizerDataset":
        if self.values.ndim != 3 or self.values.shape != self.valid.shape:  # noqa: PLR2004
            raise ValueError(f"Dataset arrays must be [N, H, W] of equal shape, got {self.values.shape}")
        return self

    @classmethod
    def from_arrays(cls, values: np.ndarray, valid: Optional[np.ndarray] = None) -> "TokenizerDataset":
        values = np.asarray(values, dtype=np.float32)
        valid = np.ones(values.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        return cls(values=values, valid=valid)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def subset(self, indices: List[int]) -> "TokenizerDataset":
        return TokenizerDataset(values=self.values[indices], valid=self.valid[indices])

    def split(self, n_holdout: int) -> Tuple["TokenizerDataset", "TokenizerDataset"]:
        cut = len(self) - n_holdout
        return self.subset(list(range(cut))), self.subset(list(range(cut, len(self))))


class TokenizerModel(Module):
    config: TokenizerConfig
    encoder_convs: List[Conv2d]
    encoder_blocks: List[ResBlock]
    encoder_out: Conv2d
    decoder_in: Conv2d
    decoder_blocks: List[ResBlock]
    decoder_deconvs: List[ConvTranspose2d]
    codebook: Codebook

    @property
    def grid_size(self) -> int:
        return self.config.grid_size

    def normalize(self, values: np.ndarray) -> np.ndarray:
        low, high = self.config.input_range
        return ((np.asarray(values) - low) / (high - low)).astype(self.dtype)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        low, high = self.config.input_range
        return low + np.asarray(values) * (high - low)

    @property
    def dtype(self) -> Any:  # noqa: ANN401
        return self.encoder_out.weight.data.dtype

    def encode(self, x: Tensor) -> Tensor:
        hidden = x
        for conv in self.encoder_convs:
            hidden = relu(conv(hidden))
        for block in self.encoder_blocks:
            hidden = block(hidden)
        return self.encoder_out(hidden)

    def decode(self, z_q: Tensor) -> Tensor:
        """Decoder logits; apply a sigmoid for outputs in [0, 1]."""
        hidden = self.decoder_in(z_q)
        for block in self.decoder_blocks:
            hidden = block(hidden)
        hidden = relu(hidden)
        for index, deconv in enumerate(self.decoder_deconvs):
            hidden = deconv(hidden)
            if index < len(self.decoder_deconvs) - 1:
                hidden = relu(hidden)
        return hidden

    def quantize(self, z: Tensor) -> Tuple[np.ndarray, Tensor, Tensor, Tensor]:
        """Indices [N,h,w], straight-through latents [N,D,h,w], flat z and flat z_q."""
        n, dim, height, width = z.shape
        flat = z.transpose(0, 2, 3, 1).reshape(-1, dim)
        indices, z_q = quantize_hard(flat, self.codebook)
        passed = straight_through(flat, z_q).reshape(n, height, width, dim).transpose(0, 3, 1, 2)
        return indices.reshape(n, height, width), passed, flat, z_q

    def forward(self, x: Tensor, quantize: bool = True) -> Tensor:
        """Decoder logits; with ``quantize=False`` the bottleneck is the identity."""
        z = self.encode(x)
        if not quantize:
            return self.decode(z)
        _, passed, _, _ = self.quantize(z)
        return self.decode(passed)

    def soft_logits(self, probs: Tensor) -> Tensor:
        """Decoder logits [N, H, W] from codebook probabilities [N, h, w, K] or [N, h*w, K]."""
        n = probs.shape[0]
        grid = self.grid_size
        if int(np.prod(probs.shape[1:-1])) != grid * grid:
            raise DimensionError(f"Soft grid {probs.shape[1:-1]} does not match the {grid}x{grid} token grid")
        embedded = embed_soft(probs.reshape(n, grid * grid, probs.shape[-1]), self.codebook)
        latents = embedded.reshape(n, grid, grid, self.codebook.dim).transpose(0, 3, 1, 2)
        logits = self.decode(latents)
        return logits.reshape(n, logits.shape[2], logits.shape[3])

    def decode_soft(self, probs: Tensor) -> Tensor:
        return self.soft_logits(probs).sigmoid()

    def reconstruction_loss(self, logits: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
        n, _, height, width = logits.shape
        flat = logits.reshape(n, height, width)
        if self.config.task == "mask":
            return binary_cross_entropy_with_logits(flat, target, valid)
        return masked_mse(flat.sigmoid(), target, valid)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = super().state_dict()
        state["codebook.embeddings"] = self.codebook.embeddings
        state["codebook.ema_size"] = self.codebook.ema_cluster_size
        state["codebook.ema_sum"] = self.codebook.ema_embed_sum
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        super().load_state_dict(state)
        self.codebook.embeddings = state["codebook.embeddings"].copy()
        self.codebook.ema_cluster_size = state["codebook.ema_size"].copy()
        self.codebook.ema_embed_sum = state["codebook.ema_sum"].copy()

    def cast(self, dtype: DType) -> None:
        super().cast(dtype)
        self.codebook.cast(dtype_of(dtype))


def build_tokenizer(config: TokenizerConfig) -> TokenizerModel:
    if len(config.channel_schedule) != config.n_conv_layers:
        raise DimensionError(
            f"Channel schedule has {len(config.channel_schedule)} entries for {config.n_conv_layers} conv layers"
        )
    rng = seeded_rng(config.seed)
    channels = config.channels()
    bias = config.use_bias
    encoder_convs = []
    previous = 1
    for current in channels:
        encoder_convs.append(Conv2d.build(previous, current, 3, rng, stride=2, padding=1, bias=bias))
        previous = current
    top = channels[-1]
    hidden = config.hidden_channels()
    encoder_blocks = [ResBlock.build(top, hidden, config.norm_groups, rng, bias) for _ in range(config.n_resblocks)]
    decoder_blocks = [ResBlock.build(top, hidden, config.norm_groups, rng, bias) for _ in range(config.n_resblocks)]
    targets = [*reversed(channels[:-1]), 1]
    decoder_deconvs = []
    previous = top
    for current in targets:
        decoder_deconvs.append(ConvTranspose2d.build(previous, current, rng, bias=bias))
        previous = current
    model = TokenizerModel(
        config=config,
        encoder_convs=encoder_convs,
        encoder_blocks=encoder_blocks,
        encoder_out=Conv2d.build(top, config.code_dim, 1, rng, bias=bias),
        decoder_in=Conv2d.build(config.code_dim, top, 1, rng, bias=bias),
        decoder_blocks=decoder_blocks,
        decoder_deconvs=decoder_deconvs,
        codebook=Codebook.create(
            config.codebook_size,
            config.code_dim,
            rng,
            decay=config.ema_decay,
            epsilon=config.ema_epsilon,
            dead_code_threshold=config.dead_code_threshold,
        ),
    )
    logger.info(f"Built {config.task} tokenizer with {model.parameter_count()} parameters")
    return model


TokenizerInput = Union[DepthMap, np.ndarray]


def _as_batch(model: TokenizerModel, item: TokenizerInput) -> Tuple[np.ndarray, bool]:
    """Normalized inputs [N, 1, H, W] with invalid pixels at 0."""
    if isinstance(item, DepthMap):
        values, valid, single = item.values[None], item.valid[None], True
    else:
        values = np.asarray(item)
        single = values.ndim == 2  # noqa: PLR2004
        values = values[None] if single else values
        valid = np.isfinite(values)
    if values.ndim != 3:  # noqa: PLR2004
        raise DimensionError(f"Expected a [H, W] or [N, H, W] input, got {values.shape}")
    ratio = model.config.downsample_ratio
    if values.shape[1] % ratio or values.shape[2] % ratio:
        raise DimensionError(f"Input {values.shape[1]}x{values.shape[2]} is not divisible by ratio {ratio}")
    normalized = np.where(valid, model.normalize(np.where(valid, values, 0)), 0).astype(model.dtype)
    return normalized[:, None], single


def tokenize(model: TokenizerModel, item: TokenizerInput) -> np.ndarray:
    """Token grid [h, w] (or [N, h, w] for a batch) of codebook indices."""
    x, single = _as_batch(model, item)
    with no_grad():
        indices, _, _, _ = model.quantize(model.encode(Tensor(x)))
    return indices[0] if single else indices


def detokenize(model: TokenizerModel, tokens: Union[np.ndarray, SoftToken]) -> np.ndarray:
    """Reconstruction in input units; the hard path is the soft path on one-hot rows."""
    size = model.codebook.size
    if isinstance(tokens, SoftToken):
        probs = tokens.probs
        if probs.shape[-1] != size:
            raise DimensionError(f"Soft tokens over {probs.shape[-1]} entries, codebook has {size}")
    else:
        indices = np.asarray(tokens, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= size):
            raise TokenIndexError(f"Token index out of range [0, {size})")
        probs = one_hot(indices, size, dtype=model.dtype)
    single = probs.ndim == 3  # noqa: PLR2004
    probs = probs[None] if single else probs
    grid = model.grid_size
    if probs.shape[1:3] != (grid, grid):
        raise DimensionError(f"Token grid {probs.shape[1:3]} does not match the expected {grid}x{grid}")
    with no_grad():
        output = model.decode_soft(Tensor(probs.astype(model.dtype, copy=False))).data
    output = model.denormalize(output)
    return output[0] if single else output


def _augment_arrays(
    values: np.ndarray, valid: np.ndarray, spec: MaskAugSpec, rng: np.random.Generator
) -> AugmentedSample:
    rows, cols = spec.patch_count(values.shape)  # type: ignore[arg-type]
    n_patches = rows * cols
    chosen = rng.choice(n_patches, spec.masked_count(n_patches), replace=False)
    patch_mask = np.zeros(values.shape, dtype=bool)
    size = spec.patch_size
    for patch in chosen:
        row, col = divmod(int(patch), cols)
        patch_mask[row * size : (row + 1) * size, col * size : (col + 1) * size] = True
    corrupted = np.where(patch_mask, np.asarray(spec.fill_value, dtype=values.dtype), values)
    return AugmentedSample(corrupted=corrupted, target=values.copy(), loss_mask=valid.copy(), patch_mask=patch_mask)


def mask_augment(item: DepthMap, spec: MaskAugSpec, rng: np.random.Generator) -> AugmentedSample:
    return _augment_arrays(item.values, item.valid, spec, rng)


class TokenizerEpochMetrics(BaseReport):
    epoch: int
    loss: float
    recon_metric: float
    lr: float


class TokenizerTrainingResult(BaseModelConfig):
    model: TokenizerModel
    history: List[TokenizerEpochMetrics]


def _batch_metric(model: TokenizerModel, logits: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    output = 1 / (1 + np.exp(-logits.astype(np.float64)))
    if model.config.task == "mask":
        return float(np.mean([binary_iou(o > 0.5, t > 0.5, empty=1.0) for o, t in zip(output, target)]))
    if not valid.any():
        return 0.0
    return float(np.sqrt(np.mean((output[valid] - target[valid]) ** 2)))


def _training_step(
    model: TokenizerModel,
    values: np.ndarray,
    valid: np.ndarray,
    aug: Optional[MaskAugSpec],
    rng: np.random.Generator,
    lr: float,
    train_cfg: TrainConfig,
) -> Tuple[float, float, np.ndarray]:
    target = np.where(valid, model.normalize(np.where(valid, values, 0)), 0).astype(model.dtype)
    inputs = target.copy()
    if aug is not None and aug.mask_ratio > 0:
        for index in range(len(inputs)):
            inputs[index] = _augment_arrays(target[index], valid[index], aug, rng).corrupted
    z = model.encode(Tensor(inputs[:, None]))
    n, dim, height, width = z.shape
    if not model.codebook.initialized:
        initialize_from_batch(model.codebook, z.data.transpose(0, 2, 3, 1).reshape(-1, dim), rng)
    indices, passed, flat, z_q = model.quantize(z)
    logits = model.decode(passed)
    loss = model.reconstruction_loss(logits, target, valid) + vq_losses(flat, z_q, model.config.commitment_beta)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"Tokenizer loss became {value} (lr {lr:.3e})")
    params = model.parameters()
    zero_grad(params)
    loss.backward()
    adam_step(params, lr, train_cfg)
    ema_update(model.codebook, flat.data, indices.reshape(-1), rng)
    metric = _batch_metric(model, logits.data.reshape(n, logits.shape[2], logits.shape[3]), target, valid)
    return value, metric, indices


def train_tokenizer(
    dataset: TokenizerDataset,
    config: TokenizerConfig,
    train_cfg: TrainConfig,
    aug: Optional[MaskAugSpec] = None,
    validation: Optional[TokenizerDataset] = None,
    checkpoint_path: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    resume: Optional[Path] = None,
) -> TokenizerTrainingResult:
    """Train a tokenizer; every epoch draws its randomness from ``(seed, epoch)``."""
    if not len(dataset):
        raise ContractError("Cannot train a tokenizer on an empty dataset")
    model = build_tokenizer(config)
    start = 0
    if resume is not None:
        model, manifest = load_tokenizer(resume)
        if model.config.model_dump() != config.model_dump():
            raise ContractError(f"Checkpoint {resume} was trained with a different tokenizer config")
        start = int(manifest.get("epoch", -1)) + 1
        logger.info(f"Resuming tokenizer training at epoch {start}")
    history: List[TokenizerEpochMetrics] = []
    for epoch in range(start, train_cfg.epochs):
        rng = seeded_rng(train_cfg.seed, epoch)
        lr = train_cfg.learning_rate(epoch)
        losses, metrics, used = [], [], []
        for batch in batches(rng.permutation(len(dataset)).tolist(), train_cfg.batch_size):
            try:
                loss, metric, indices = _training_step(
                    model, dataset.values[batch], dataset.valid[batch], aug, rng, lr, train_cfg
                )
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"Epoch {epoch}, batch starting at sample {batch[0]}: {e}") from e
            losses.append(loss)
            metrics.append(metric)
            used.append(indices.reshape(-1))
        recon_metric = float(np.mean(metrics))
        if validation is not None and len(validation):
            recon_metric = (
                reconstruction_iou(model, validation)
                if config.task == "mask"
                else reconstruction_rmse(model, validation)
            )
        row = TokenizerEpochMetrics(epoch=epoch, loss=float(np.mean(losses)), recon_metric=recon_metric, lr=lr)
        history.append(row)
        logger.info(
            f"Epoch {epoch}: loss {row.loss:.5f}, recon {row.recon_metric:.5f}, "
            f"perplexity {perplexity(np.concatenate(used), config.codebook_size):.1f}"
        )
        if metrics_path is not None:
            append_jsonl(metrics_path, row.description())
        if checkpoint_path is not None:
            save_tokenizer(model, checkpoint_path, epoch=epoch, train_cfg=train_cfg)
    return TokenizerTrainingResult(model=model, history=history)


def reconstruct(model: TokenizerModel, dataset: TokenizerDataset, batch_size: int = 32) -> np.ndarray:
    """Tokenize then detokenize every sample; returns values in input units."""
    outputs = []
    for batch in batches(list(range(len(dataset))), batch_size):
        values = np.where(dataset.valid[batch], dataset.values[batch], np.nan)
        outputs.append(detokenize(model, tokenize(model, values)))
    return np.concatenate(outputs) if outputs else np.zeros((0,) + dataset.values.shape[1:])


def reconstruction_rmse(model: TokenizerModel, dataset: TokenizerDataset) -> float:
    """RMSE over valid pixels in normalized units."""
    recon = model.normalize(reconstruct(model, dataset)).astype(np.float64)
    target = model.normalize(dataset.values).astype(np.float64)
    valid = dataset.valid
    return float(np.sqrt(np.mean((recon[valid] - target[valid]) ** 2))) if valid.any() else 0.0


def reconstruction_iou(model: TokenizerModel, dataset: TokenizerDataset) -> float:
    recon = reconstruct(model, dataset)
    return float(np.mean([binary_iou(r > 0.5, t > 0.5, empty=1.0) for r, t in zip(recon, dataset.values)]))


def inpainting_rmse(model: TokenizerModel, dataset: TokenizerDataset, spec: MaskAugSpec, seed: int = 0) -> float:
    """Normalized RMSE restricted to deliberately blanked patches of valid pixels."""
    rng = seeded_rng(seed)
    errors = []
    for index in range(len(dataset)):
        normalized = np.where(dataset.valid[index], model.normalize(dataset.values[index]), 0)
        sample = _augment_arrays(normalized, dataset.valid[index], spec, rng)
        region = sample.patch_mask & sample.loss_mask
        if not region.any():
            continue
        recon = model.normalize(detokenize(model, tokenize(model, model.denormalize(sample.corrupted))))
        errors.append((recon[region] - sample.target[region]) ** 2)
    if not errors:
        return 0.0
    return float(np.sqrt(np.mean(np.concatenate(errors))))


def save_tokenizer(
    model: TokenizerModel, path: Path, epoch: Optional[int] = None, train_cfg: Optional[TrainConfig] = None
) -> None:
    manifest: Dict[str, Any] = {
        "kind": "tokenizer",
        "config": model.config.model_dump(mode="json"),
        "codebook_initialized": model.codebook.initialized,
    }
    if epoch is not None:
        manifest["epoch"] = epoch
    if train_cfg is not None:
        manifest["train"] = train_cfg.model_dump(mode="json")
    state = model.state_dict() | model.optimizer_state()
    save_checkpoint(path, sorted(state.items()), manifest)


def load_tokenizer(path: Path) -> Tuple[TokenizerModel, Dict[str, Any]]:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "tokenizer":
        raise CheckpointFormatError(f"{path} is not a tokenizer checkpoint")
    model = build_tokenizer(TokenizerConfig.model_validate(manifest["config"]))
    model.load_state_dict(tensors)
    model.codebook.initialized = bool(manifest.get("codebook_initialized", True))
    return model, manifest
