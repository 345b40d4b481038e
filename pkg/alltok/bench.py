"""Synthetic scenes and the depth / mask evaluation metrics."""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import ndimage

from alltok.base import MAX_DEPTH, BaseModelConfig, BaseReport
from alltok.exceptions import CheckpointFormatError, ContractError, EmptyValidMaskError
from alltok.io import load_checkpoint, save_checkpoint, write_pgm
from alltok.sequence import InstanceAnnotation, crop_mask
from alltok.tokenizer import DepthMap, TokenizerDataset
from alltok.types import Primitive, TokenizerTask
from alltok.utils import binary_iou, seeded_rng

logger = logging.getLogger(__name__)

PRIMITIVES: Tuple[Primitive, ...] = ("rectangle", "ellipse")
DEFAULT_IOU_THRESHOLDS = [round(0.5 + 0.05 * step, 2) for step in range(10)]
HOLE_STREAM = 1


class SceneSpec(BaseModel):
    image_size: int = Field(default=64, ge=8)
    min_objects: int = Field(default=1, ge=0)
    max_objects: int = Field(default=3, ge=0)
    primitives: List[Primitive] = Field(default_factory=lambda: list(PRIMITIVES))
    depth_range: Tuple[float, float] = (0.5, MAX_DEPTH)
    background_depth: float = 9.0
    min_separation: float = 0.5
    shade: float = Field(default=0.8, ge=0, le=1)
    min_object_size: int = Field(default=12, ge=2)
    max_object_size: int = 32
    min_visible_pixels: int = 16
    hole_fraction: float = Field(default=0.0, ge=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _spec_validator(self) -> "SceneSpec":
        if self.min_objects > self.max_objects:
            raise ValueError(f"min_objects {self.min_objects} exceeds max_objects {self.max_objects}")
        if self.max_object_size > self.image_size or self.min_object_size > self.max_object_size:
            raise ValueError("Object sizes must satisfy min <= max <= image_size")
        near, far = self.depth_range
        if not near < self.background_depth - self.min_separation <= far:
            raise ValueError(f"Background depth {self.background_depth} leaves no room inside {self.depth_range}")
        if not self.primitives:
            raise ValueError("At least one primitive is required")
        return self


class SyntheticScene(BaseModelConfig):
    image: np.ndarray
    depth: DepthMap
    observed: DepthMap
    instances: List[InstanceAnnotation]
    seed: int

    @property
    def image_size(self) -> int:
        return int(self.image.shape[-1])


class _SceneObject(BaseModel):
    index: int
    primitive: Primitive
    top: int
    left: int
    height: int
    width: int
    base_depth: float
    slant: Tuple[float, float]
    color: Tuple[float, float, float]

    def region(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        rows_inside = (rows >= self.top) & (rows < self.top + self.height)
        inside = rows_inside & (cols >= self.left) & (cols < self.left + self.width)
        if self.primitive == "rectangle":
            return inside
        center_row = self.top + (self.height - 1) / 2
        center_col = self.left + (self.width - 1) / 2
        radial = ((rows - center_row) / (self.height / 2)) ** 2 + ((cols - center_col) / (self.width / 2)) ** 2
        return inside & (radial <= 1)

    def surface(self, rows: np.ndarray, cols: np.ndarray, size: int) -> np.ndarray:
        center_row = self.top + self.height / 2
        center_col = self.left + self.width / 2
        return self.base_depth + self.slant[0] * (rows - center_row) / size + self.slant[1] * (cols - center_col) / size


def _sample_objects(spec: SceneSpec, rng: np.random.Generator) -> List[_SceneObject]:
    objects = []
    size = spec.image_size
    for index in range(int(rng.integers(spec.min_objects, spec.max_objects + 1))):
        height, width = (int(value) for value in rng.integers(spec.min_object_size, spec.max_object_size + 1, 2))
        color = rng.uniform(0.2, 1.0, 3)
        slant = rng.uniform(-0.5, 0.5, 2)
        objects.append(
            _SceneObject(
                index=index,
                primitive=spec.primitives[int(rng.integers(len(spec.primitives)))],
                top=int(rng.integers(0, size - height + 1)),
                left=int(rng.integers(0, size - width + 1)),
                height=height,
                width=width,
                base_depth=float(rng.uniform(spec.depth_range[0], spec.background_depth - spec.min_separation)),
                slant=(float(slant[0]), float(slant[1])),
                color=(float(color[0]), float(color[1]), float(color[2])),
            )
        )
    return objects


def gen_scene(spec: SceneSpec, seed: Optional[int] = None) -> SyntheticScene:
    """Render a scene far-to-near so nearer objects occlude farther ones."""
    seed = spec.seed if seed is None else seed
    rng = seeded_rng(seed)
    size = spec.image_size
    rows, cols = np.mgrid[0:size, 0:size]
    depth = np.full((size, size), spec.background_depth, dtype=np.float64)
    labels = np.full((size, size), -1, dtype=np.int64)
    albedo = np.full((3, size, size), 0.5, dtype=np.float64)
    objects = _sample_objects(spec, rng)
    ceiling = spec.background_depth - spec.min_separation / 2
    for item in sorted(objects, key=lambda o: (-o.base_depth, o.index)):
        region = item.region(rows, cols)
        surface = np.clip(item.surface(rows, cols, size), spec.depth_range[0], ceiling)
        depth[region] = surface[region]
        labels[region] = item.index
        albedo[:, region] = np.asarray(item.color)[:, None]
    image = (albedo * (1 - spec.shade * depth / MAX_DEPTH)[None]).astype(np.float32)
    instances = []
    for item in objects:
        visible = labels == item.index
        if visible.sum() < spec.min_visible_pixels:
            continue
        filled_rows, filled_cols = np.nonzero(visible)
        box = (
            filled_cols.min() / size,
            filled_rows.min() / size,
            (filled_cols.max() + 1) / size,
            (filled_rows.max() + 1) / size,
        )
        instances.append(
            InstanceAnnotation(box=box, class_id=PRIMITIVES.index(item.primitive), mask64=crop_mask(visible, box))
        )
    truth = DepthMap.dense(depth.astype(np.float32))
    return SyntheticScene(
        image=image,
        depth=truth,
        observed=corrupt_depth(truth, spec.hole_fraction, seed),
        instances=instances,
        seed=seed,
    )


def scene_seed(seed: int, index: int) -> int:
    return int(seeded_rng(seed, index).integers(2**31))


def generate_scenes(spec: SceneSpec, n: int, seed: int) -> List[SyntheticScene]:
    """Scenes whose seeds derive from ``(seed, index)``, so any prefix is reproducible on its own."""
    return [gen_scene(spec, seed=scene_seed(seed, index)) for index in range(n)]


def corrupt_depth(depth: DepthMap, hole_fraction: float, seed: int, smoothness: float = 4.0) -> DepthMap:
    """Blank smooth irregular regions covering about ``hole_fraction`` of the map."""
    if not 0 <= hole_fraction < 1:
        raise ContractError(f"Hole fraction must lie in [0, 1), got {hole_fraction}")
    if hole_fraction == 0:
        return DepthMap(values=depth.values.copy(), valid=depth.valid.copy())
    rng = seeded_rng(seed, HOLE_STREAM)
    field = ndimage.gaussian_filter(rng.standard_normal(depth.values.shape), sigma=smoothness)
    holes = field > np.quantile(field, 1 - hole_fraction)
    return DepthMap(
        values=np.where(holes, 0, depth.values).astype(depth.values.dtype),
        valid=depth.valid & ~holes,
    )


class DepthMetrics(BaseReport):
    rmse: float
    rel: float
    log10: float
    delta1: float
    delta2: float
    delta3: float

    @model_validator(mode="after")
    def _ordering_validator(self) -> "DepthMetrics":
        if not 0 <= self.delta1 <= self.delta2 <= self.delta3 <= 1:
            raise ValueError("Threshold accuracies must satisfy 0 <= delta1 <= delta2 <= delta3 <= 1")
        return self


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> DepthMetrics:
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EmptyValidMaskError("Depth metrics need at least one valid pixel")
    p = np.maximum(np.asarray(pred, dtype=np.float64)[valid], 1e-6)
    g = np.asarray(gt, dtype=np.float64)[valid]
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


class MaskMetrics(BaseReport):
    mean_iou: float
    ap: float
    thresholds: List[float]
    ap_per_threshold: List[float]


def mask_iou(first: np.ndarray, second: np.ndarray) -> float:
    return binary_iou(first, second)


def _class_ap(ious: np.ndarray, n_pred: int, n_gt: int, threshold: float) -> float:
    if not n_gt and not n_pred:
        return 1.0
    if not n_gt or not n_pred:
        return 0.0
    pairs = sorted(
        ((ious[p, g], p, g) for p in range(n_pred) for g in range(n_gt)), key=lambda pair: (-pair[0], pair[1], pair[2])
    )
    used_pred, used_gt = set(), set()
    for iou, p, g in pairs:
        if iou < threshold:
            break
        if p in used_pred or g in used_gt:
            continue
        used_pred.add(p)
        used_gt.add(g)
    true_positives = len(used_pred)
    return (true_positives / n_pred) * (true_positives / n_gt)


def mask_metrics(
    pred: Sequence[InstanceAnnotation],
    gt: Sequence[InstanceAnnotation],
    image_size: int,
    iou_thresholds: Optional[Sequence[float]] = None,
) -> MaskMetrics:
    """Greedy per-class matching; AP at a threshold is precision times recall."""
    thresholds = list(iou_thresholds or DEFAULT_IOU_THRESHOLDS)
    pred_masks = [instance.paste(image_size) for instance in pred]
    gt_masks = [instance.paste(image_size) for instance in gt]
    classes = sorted({instance.class_id for instance in [*pred, *gt]})
    per_class: Dict[int, Tuple[List[int], List[int], np.ndarray]] = {}
    for class_id in classes:
        p_idx = [i for i, instance in enumerate(pred) if instance.class_id == class_id]
        g_idx = [i for i, instance in enumerate(gt) if instance.class_id == class_id]
        ious = np.array([[mask_iou(pred_masks[p], gt_masks[g]) for g in g_idx] for p in p_idx]).reshape(
            len(p_idx), len(g_idx)
        )
        per_class[class_id] = (p_idx, g_idx, ious)
    ap_per_threshold = []
    for threshold in thresholds:
        if not classes:
            ap_per_threshold.append(1.0)
            continue
        scores = [_class_ap(ious, len(p), len(g), threshold) for p, g, ious in per_class.values()]
        ap_per_threshold.append(float(np.mean(scores)))
    if gt:
        best = []
        for _, g_idx, ious in per_class.values():
            for column in range(len(g_idx)):
                best.append(float(ious[:, column].max()) if ious.shape[0] else 0.0)
        mean_iou = float(np.mean(best))
    else:
        mean_iou = 0.0 if pred else 1.0
    return MaskMetrics(
        mean_iou=mean_iou,
        ap=float(np.mean(ap_per_threshold)),
        thresholds=thresholds,
        ap_per_threshold=ap_per_threshold,
    )


def save_scene(scene: SyntheticScene, path: Path) -> None:
    records = [
        ("image", scene.image),
        ("depth.values", scene.depth.values),
        ("depth.valid", scene.depth.valid),
        ("observed.values", scene.observed.values),
        ("observed.valid", scene.observed.valid),
    ]
    records += [(f"instance.{index}.mask64", instance.mask64) for index, instance in enumerate(scene.instances)]
    manifest: Dict[str, Any] = {
        "kind": "scene",
        "seed": scene.seed,
        "instances": [{"box": list(i.box), "class_id": i.class_id} for i in scene.instances],
    }
    save_checkpoint(path, records, manifest)


def load_scene(path: Path) -> SyntheticScene:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "scene":
        raise CheckpointFormatError(f"{path} is not a scene file")
    instances = [
        InstanceAnnotation(box=tuple(item["box"]), class_id=item["class_id"], mask64=tensors[f"instance.{i}.mask64"])
        for i, item in enumerate(manifest["instances"])
    ]
    return SyntheticScene(
        image=tensors["image"],
        depth=DepthMap(values=tensors["depth.values"], valid=tensors["depth.valid"]),
        observed=DepthMap(values=tensors["observed.values"], valid=tensors["observed.valid"]),
        instances=instances,
        seed=int(manifest["seed"]),
    )


def scene_path(directory: Path, index: int) -> Path:
    return directory / f"scene_{index:05d}.aitk"


def load_scenes(directory: Path) -> List[SyntheticScene]:
    paths = sorted(directory.glob("scene_*.aitk"))
    if not paths:
        logger.warning(f"No scenes found in {directory}")
    return [load_scene(path) for path in paths]


def export_previews(scene: SyntheticScene, directory: Path, stem: str) -> List[Path]:
    outputs = [directory / f"{stem}_depth.pgm", directory / f"{stem}_observed.pgm", directory / f"{stem}_image.pgm"]
    write_pgm(outputs[0], scene.depth.values, 0.0, MAX_DEPTH)
    write_pgm(outputs[1], scene.observed.values, 0.0, MAX_DEPTH)
    write_pgm(outputs[2], scene.image.mean(axis=0), 0.0, 1.0)
    return outputs


def tokenizer_dataset(scenes: Sequence[SyntheticScene], task: TokenizerTask, observed: bool = True) -> TokenizerDataset:
    """Depth maps (observed or ground truth) or every instance's 64x64 mask crop."""
    if task == "depth":
        maps = [scene.observed if observed else scene.depth for scene in scenes]
        if not maps:
            raise ContractError("No scenes to build a depth dataset from")
        return TokenizerDataset(
            values=np.stack([item.values for item in maps]).astype(np.float32),
            valid=np.stack([item.valid for item in maps]),
        )
    masks = [instance.mask64 for scene in scenes for instance in scene.instances]
    if not masks:
        raise ContractError("No instances to build a mask dataset from")
    return TokenizerDataset.from_arrays(np.stack(masks).astype(np.float32))
