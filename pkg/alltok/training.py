"""Solver datasets, multi-task training and evaluation."""

import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from alltok.base import COORD_TOKENS, RECORD_LENGTH, BaseModelConfig, BaseReport
from alltok.bench import DepthMetrics, MaskMetrics, SyntheticScene, depth_metrics, mask_metrics
from alltok.exceptions import ContractError, MissingTokenizerError, TrainingDivergedError, VocabularyMismatchError
from alltok.functional import binary_cross_entropy_with_logits, masked_cross_entropy, masked_mse, softmax
from alltok.optim import TrainConfig, adam_step, zero_grad
from alltok.sequence import InstanceAnnotation, Vocabulary, encode_depth, encode_instances
from alltok.solver import DecodeOptions, SolverModel, encode_image, infer, load_solver, save_solver
from alltok.tensor import Tensor
from alltok.tokenizer import DepthMap, TokenizerModel, tokenize
from alltok.types import Task
from alltok.utils import append_jsonl, batches, seeded_rng

logger = logging.getLogger(__name__)

TOKENIZER_TASKS: Dict[Task, Literal["depth", "mask"]] = {"dep": "depth", "ins": "mask"}


class LossConfig(BaseModel):
    token_loss_weight: Dict[Task, float] = Field(default_factory=lambda: {"ins": 5.0, "dep": 1.0})
    aux_loss_weight: float = Field(default=0.0, ge=0)
    aux_task_loss: Dict[Task, Literal["mse", "bce"]] = Field(default_factory=lambda: {"dep": "mse", "ins": "bce"})
    aux_tasks: List[Task] = Field(default_factory=lambda: ["dep", "ins"])
    parallel_loss_weight: float = Field(default=1.0, ge=0)

    @field_validator("token_loss_weight")
    @classmethod
    def _weights_validator(cls, weights: Dict[Task, float]) -> Dict[Task, float]:
        if any(weight < 0 for weight in weights.values()):
            raise ValueError(f"Token loss weights must be non-negative, got {weights}")
        return weights

    @classmethod
    def joint(cls, **overrides: object) -> "LossConfig":
        """Joint depth and instance training; the auxiliary loss only supervises depth."""
        defaults = {"token_loss_weight": {"ins": 5.0, "dep": 1.0}, "aux_loss_weight": 0.2, "aux_tasks": ["dep"]}
        return cls.model_validate(defaults | overrides)

    def weight(self, task: Task) -> float:
        return self.token_loss_weight.get(task, 1.0)

    def aux_weight(self, task: Task) -> float:
        return self.aux_loss_weight if task in self.aux_tasks else 0.0


def downsample_image(image: np.ndarray, size: int) -> np.ndarray:
    """Block-average a [C, S, S] image down to [C, size, size]."""
    channels, height, _ = image.shape
    factor = height // size
    if factor * size != height:
        raise ContractError(f"Image side {height} is not a multiple of {size}")
    return image.reshape(channels, size, factor, size, factor).mean(axis=(2, 4)).astype(np.float32)


class SolverDataset(BaseModelConfig):
    images: np.ndarray
    depth_values: np.ndarray
    depth_valid: np.ndarray
    depth_tokens: Optional[np.ndarray] = None
    instances: List[List[InstanceAnnotation]] = Field(default_factory=list)
    mask_tokens: List[List[np.ndarray]] = Field(default_factory=list)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def depth_size(self) -> int:
        return int(self.depth_values.shape[-1])

    @classmethod
    def build(
        cls,
        scenes: Sequence[SyntheticScene],
        tokenizers: Dict[Task, TokenizerModel],
        image_size: int,
    ) -> "SolverDataset":
        """Pre-tokenize the targets of every scene with the frozen tokenizers."""
        if not scenes:
            raise ContractError("Cannot build a solver dataset without scenes")
        depth_values = np.stack([scene.depth.values for scene in scenes]).astype(np.float32)
        depth_valid = np.stack([scene.depth.valid for scene in scenes])
        depth_tokens = None
        if "dep" in tokenizers:
            depth_tokens = tokenize(tokenizers["dep"], np.where(depth_valid, depth_values, np.nan))
        instances = [list(scene.instances) for scene in scenes]
        mask_tokens: List[List[np.ndarray]] = [[] for _ in scenes]
        if "ins" in tokenizers:
            for index, scene_instances in enumerate(instances):
                if scene_instances:
                    crops = np.stack([instance.mask64 for instance in scene_instances]).astype(np.float32)
                    mask_tokens[index] = list(tokenize(tokenizers["ins"], crops))
        return cls(
            images=np.stack([downsample_image(scene.image, image_size) for scene in scenes]),
            depth_values=depth_values,
            depth_valid=depth_valid,
            depth_tokens=depth_tokens,
            instances=instances,
            mask_tokens=mask_tokens,
        )

    def subset(self, indices: Sequence[int]) -> "SolverDataset":
        indices = list(indices)
        return SolverDataset(
            images=self.images[indices],
            depth_values=self.depth_values[indices],
            depth_valid=self.depth_valid[indices],
            depth_tokens=None if self.depth_tokens is None else self.depth_tokens[indices],
            instances=[self.instances[i] for i in indices],
            mask_tokens=[self.mask_tokens[i] for i in indices] if self.mask_tokens else [],
        )


def check_tokenizers(model: SolverModel, tokenizers: Dict[Task, TokenizerModel], tasks: Set[Task]) -> None:
    """Refuse tokenizers whose codebooks or grids disagree with the solver vocabulary."""
    vocabulary = model.vocabulary
    actual = vocabulary.model_dump()
    for task in sorted(tasks):
        tokenizer = tokenizers.get(task)
        if tokenizer is None:
            raise MissingTokenizerError(f"Task {task} needs a {TOKENIZER_TASKS[task]} tokenizer")
        if tokenizer.config.task != TOKENIZER_TASKS[task]:
            raise MissingTokenizerError(f"Task {task} got a {tokenizer.config.task} tokenizer")
        actual["depth_codebook_size" if task == "dep" else "mask_codebook_size"] = tokenizer.codebook.size
    vocabulary.check_compatible(Vocabulary.model_validate(actual))
    if "dep" in tasks and tokenizers["dep"].grid_size != model.config.depth_grid:
        raise VocabularyMismatchError({"depth_grid": (model.config.depth_grid, tokenizers["dep"].grid_size)})


class SolverEpochMetrics(BaseReport):
    epoch: int
    loss: float
    token_loss: Dict[str, float]
    aux_loss: float
    lr: float


class SolverTrainingResult(BaseModelConfig):
    model: SolverModel
    history: List[SolverEpochMetrics]


class InstanceTargets(BaseModelConfig):
    ids: np.ndarray
    loss_mask: np.ndarray
    orders: List[List[int]]


def instance_targets(
    dataset: SolverDataset,
    batch: Sequence[int],
    mask_tokenizer: TokenizerModel,
    vocabulary: Vocabulary,
    max_instances: int,
    rng: np.random.Generator,
) -> InstanceTargets:
    """Noise-padded instance sequences plus, per sample, which real instance each record holds."""
    ids, loss_mask, orders = [], [], []
    for index in batch:
        real = dataset.instances[index][:max_instances]
        grids = dataset.mask_tokens[index][:max_instances]
        sequence = encode_instances(real, mask_tokenizer, max_instances - len(real), rng, vocabulary, mask_tokens=grids)
        orders.append(sequence.record_order)
        ids.append(sequence.ids)
        loss_mask.append(sequence.loss_mask)
    return InstanceTargets(
        ids=np.asarray(ids, dtype=np.int64), loss_mask=np.asarray(loss_mask, dtype=bool), orders=orders
    )


def sequence_token_loss(logits: Tensor, ids: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    vocabulary_size = logits.shape[-1]
    return masked_cross_entropy(logits.reshape(-1, vocabulary_size), ids.reshape(-1), ignore=~loss_mask.reshape(-1))


def _slice_probs(logits: Tensor, start: int, stop: int) -> Tensor:
    return softmax(logits[..., start:stop], axis=-1)


def depth_aux_loss(
    logits: Tensor, tokenizer: TokenizerModel, vocabulary: Vocabulary, values: np.ndarray, valid: np.ndarray
) -> Tensor:
    """Soft-detokenized depth against the normalized target over valid pixels."""
    probs = _slice_probs(logits, vocabulary.depth.start, vocabulary.depth.stop)
    prediction = tokenizer.decode_soft(probs)
    target = np.where(valid, tokenizer.normalize(np.where(valid, values, 0)), 0)
    return masked_mse(prediction, target, valid)


def instance_aux_loss(
    logits: Tensor,
    tokenizer: TokenizerModel,
    vocabulary: Vocabulary,
    targets: InstanceTargets,
    instances: Sequence[Sequence[InstanceAnnotation]],
) -> Optional[Tensor]:
    """BCE of soft-detokenized masks at the mask positions of real records only."""
    rows, positions, masks = [], [], []
    for row, (order, sample) in enumerate(zip(targets.orders, instances)):
        for record, instance_index in enumerate(order):
            start = record * RECORD_LENGTH + COORD_TOKENS + 1
            rows.append([row] * (RECORD_LENGTH - COORD_TOKENS - 1))
            positions.append(list(range(start, start + RECORD_LENGTH - COORD_TOKENS - 1)))
            masks.append(sample[instance_index].mask64)
    if not masks:
        return None
    gathered = logits[np.asarray(rows), np.asarray(positions)]
    probs = _slice_probs(gathered, vocabulary.mask.start, vocabulary.mask.stop)
    return binary_cross_entropy_with_logits(tokenizer.soft_logits(probs), np.stack(masks).astype(np.float32))


def _interleave(queues: Dict[Task, List[List[int]]]) -> List[Tuple[Task, List[int]]]:
    schedule = []
    for step in range(max((len(queue) for queue in queues.values()), default=0)):
        for task in sorted(queues):
            if step < len(queues[task]):
                schedule.append((task, queues[task][step]))
    return schedule


def uses_parallel_head(model: SolverModel, loss_cfg: LossConfig) -> bool:
    return model.has_parallel_head and loss_cfg.parallel_loss_weight > 0


def solver_batch_loss(
    model: SolverModel,
    dataset: SolverDataset,
    tokenizers: Dict[Task, TokenizerModel],
    loss_cfg: LossConfig,
    task: Task,
    batch: Sequence[int],
    rng: np.random.Generator,
) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """Total, token and auxiliary loss of one single-task batch."""
    batch = list(batch)
    vocabulary = model.vocabulary
    memory = encode_image(model, dataset.images[batch])
    aux: Optional[Tensor] = None
    if task == "dep":
        if dataset.depth_tokens is None:
            raise MissingTokenizerError("The dataset carries no depth tokens")
        grid = dataset.depth_tokens[batch]
        ids = np.asarray([encode_depth(tokens, vocabulary).ids for tokens in grid], dtype=np.int64)
        loss_mask = np.ones(ids.shape, dtype=bool)
        logits = model.teacher_forced_logits(memory, task, ids)
        token = sequence_token_loss(logits, ids, loss_mask)
        total = token * loss_cfg.weight(task)
        if uses_parallel_head(model, loss_cfg):
            parallel = model.parallel_logits(memory)
            offsets = grid.reshape(len(batch), -1)
            total = total + sequence_token_loss(parallel, offsets, loss_mask) * loss_cfg.parallel_loss_weight
        if loss_cfg.aux_weight(task) > 0:
            aux = depth_aux_loss(
                logits, tokenizers["dep"], vocabulary, dataset.depth_values[batch], dataset.depth_valid[batch]
            )
    else:
        targets = instance_targets(dataset, batch, tokenizers["ins"], vocabulary, model.config.max_instances, rng)
        logits = model.teacher_forced_logits(memory, task, targets.ids)
        token = sequence_token_loss(logits, targets.ids, targets.loss_mask)
        total = token * loss_cfg.weight(task)
        if loss_cfg.aux_weight(task) > 0:
            instances = [dataset.instances[i] for i in batch]
            aux = instance_aux_loss(logits, tokenizers["ins"], vocabulary, targets, instances)
    if aux is not None:
        total = total + aux * loss_cfg.aux_weight(task)
    return total, token, aux


def train_solver(
    model: SolverModel,
    dataset: SolverDataset,
    tokenizers: Dict[Task, TokenizerModel],
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    tasks: Set[Task],
    checkpoint_path: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    resume: Optional[Path] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> SolverTrainingResult:
    """Teacher-forced training; joint runs alternate task batches round-robin."""
    if not tasks:
        raise ContractError("train_solver needs at least one task")
    if not len(dataset):
        raise ContractError("Cannot train the solver on an empty dataset")
    check_tokenizers(model, tokenizers, tasks)
    for tokenizer in tokenizers.values():
        tokenizer.freeze()
    start = 0
    if resume is not None:
        config = model.config
        model, manifest = load_solver(resume)
        if model.config.model_dump() != config.model_dump():
            raise ContractError(f"Checkpoint {resume} was trained with a different solver config")
        start = int(manifest.get("epoch", -1)) + 1
        logger.info(f"Resuming solver training at epoch {start}")
    history: List[SolverEpochMetrics] = []
    for epoch in range(start, train_cfg.epochs):
        rng = seeded_rng(train_cfg.seed, epoch)
        lr = train_cfg.learning_rate(epoch)
        queues = {
            task: list(batches(rng.permutation(len(dataset)).tolist(), train_cfg.batch_size)) for task in sorted(tasks)
        }
        totals: List[float] = []
        token_losses: Dict[str, List[float]] = {task: [] for task in sorted(tasks)}
        aux_losses: List[float] = []
        for task, batch in _interleave(queues):
            total, token, aux = solver_batch_loss(model, dataset, tokenizers, loss_cfg, task, batch, rng)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"Solver loss became {value} at epoch {epoch} on task {task}")
            params = model.task_parameters(task, parallel=uses_parallel_head(model, loss_cfg))
            zero_grad(model.parameters())
            total.backward()
            adam_step(params, lr, train_cfg)
            totals.append(value)
            token_losses[task].append(token.item())
            if aux is not None:
                aux_losses.append(aux.item())
        row = SolverEpochMetrics(
            epoch=epoch,
            loss=float(np.mean(totals)),
            token_loss={task: float(np.mean(values)) for task, values in token_losses.items()},
            aux_loss=float(np.mean(aux_losses)) if aux_losses else 0.0,
            lr=lr,
        )
        history.append(row)
        logger.info(f"Epoch {epoch}: loss {row.loss:.5f}, token {row.token_loss}, aux {row.aux_loss:.5f}")
        if metrics_path is not None:
            append_jsonl(metrics_path, row.description())
        if checkpoint_path is not None:
            save_solver(model, checkpoint_path, epoch=epoch, extra={"tasks": sorted(tasks)} | (extra or {}))
    return SolverTrainingResult(model=model, history=history)


class SolverEvaluation(BaseReport):
    task: Task
    mode: str
    detokenizer_mode: str
    parallel: bool
    n_images: int
    runtime_seconds: float
    depth: Optional[DepthMetrics] = None
    masks: Optional[MaskMetrics] = None


def _average_mask_metrics(metrics: List[MaskMetrics]) -> MaskMetrics:
    return MaskMetrics(
        mean_iou=float(np.mean([m.mean_iou for m in metrics])),
        ap=float(np.mean([m.ap for m in metrics])),
        thresholds=metrics[0].thresholds,
        ap_per_threshold=np.mean([m.ap_per_threshold for m in metrics], axis=0).tolist(),
    )


def evaluate_solver(
    model: SolverModel,
    dataset: SolverDataset,
    detokenizer: TokenizerModel,
    task: Task,
    options: DecodeOptions,
    batch_size: int = 16,
) -> SolverEvaluation:
    """Decode every image and score the task outputs against the ground truth."""
    if not len(dataset):
        raise ContractError("Cannot evaluate on an empty dataset")
    started = time.perf_counter()
    predictions = []
    for batch in batches(list(range(len(dataset))), batch_size):
        predictions += infer(model, dataset.images[batch], task, options, detokenizer)
    runtime = time.perf_counter() - started
    depth: Optional[DepthMetrics] = None
    masks: Optional[MaskMetrics] = None
    if task == "dep":
        pred = np.stack([p.values for p in predictions if isinstance(p, DepthMap)])
        # scored in normalized units like the tokenizer benchmarks
        depth = depth_metrics(
            detokenizer.normalize(pred).astype(np.float64),
            detokenizer.normalize(dataset.depth_values).astype(np.float64),
            dataset.depth_valid,
        )
    else:
        masks = _average_mask_metrics(
            [
                mask_metrics(list(p), gt, dataset.depth_size)
                for p, gt in zip(predictions, dataset.instances)
                if isinstance(p, list)
            ]
        )
    return SolverEvaluation(
        task=task,
        mode=options.mode,
        detokenizer_mode=options.detokenizer,
        parallel=options.parallel,
        n_images=len(dataset),
        runtime_seconds=runtime,
        depth=depth,
        masks=masks,
    )
