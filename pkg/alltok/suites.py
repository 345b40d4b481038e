"""Verification suites behind the ``roundtrip`` and ``gradcheck`` commands."""

import logging
from typing import Callable, List, Tuple

import numpy as np

from alltok.base import GRADCHECK_TOLERANCE, MASK_SIZE, MASK_TOKENS, BaseReport
from alltok.exceptions import ContractError
from alltok.functional import (
    binary_cross_entropy_with_logits,
    conv2d,
    conv_transpose2d,
    embedding_lookup,
    group_norm,
    layer_norm,
    linear,
    log_softmax,
    masked_cross_entropy,
    masked_mse,
    relu,
    scaled_dot_product_attention,
    softmax,
)
from alltok.gradcheck import GradCheckResult, grad_check
from alltok.interpolation import InterpolationTokenizer
from alltok.sequence import (
    EOS,
    InstanceAnnotation,
    InstanceRecord,
    Vocabulary,
    decode_depth,
    dequantize_box,
    encode_depth,
    encode_instances,
    parse_instance_records,
    quantize_box,
)
from alltok.solver import SolverConfig, build_solver, encode_image
from alltok.tensor import Tensor, concat, masked_fill, where
from alltok.tokenizer import TokenizerConfig, TokenizerModel, build_tokenizer
from alltok.types import RoundtripSuite
from alltok.utils import binary_iou, one_hot, seeded_rng
from alltok.vq import Codebook, embed_indices, embed_soft, ema_update, quantize_hard

logger = logging.getLogger(__name__)

GRADCHECK_EPS = 1e-5
PRIMITIVE_SIZES = (1, 2, 3)

GradCase = Tuple[str, Callable[..., Tensor], List[np.ndarray]]


class SuiteCheck(BaseReport):
    name: str
    passed: bool
    value: float = 0.0


class SuiteReport(BaseReport):
    suite: str
    checks: List[SuiteCheck]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failures(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]


class GradSuiteReport(BaseReport):
    results: List[GradCheckResult]

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def max_relative_error(self) -> float:
        return max((result.max_relative_error for result in self.results), default=0.0)

    def failures(self) -> List[str]:
        return [result.name for result in self.results if not result.passed]


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.0, size=shape)


def primitive_cases(rng: np.random.Generator, size: int) -> List[GradCase]:
    """Every differentiable primitive at a size-dependent shape, reduced with fixed random weights."""
    n, k = size + 1, size + 2
    channels, spatial = 2, 2 * size + 2
    image = (1, channels, spatial, spatial)
    weights = rng.normal(size=(n, k))
    rows = np.arange(1.0, 2 * n + 1)[:, None]
    targets = rng.integers(0, k, n)
    ignore = np.arange(n) == 0
    valid = rng.uniform(size=(n, k)) > 0.3
    mask = rng.uniform(size=(n, k)) > 0.5
    picks = rng.integers(0, n, 2 * n)
    regression_target = rng.normal(size=(n, k))
    binary_target = (rng.uniform(size=(n, k)) > 0.5).astype(np.float64)

    def weighted(out: Tensor) -> Tensor:
        return (out * weights).sum()

    def normal(*shape: int) -> np.ndarray:
        return rng.normal(size=shape)

    return [
        ("add", lambda a, b: weighted(a + b), [normal(n, k), normal(k)]),
        ("sub", lambda a, b: weighted(a - b), [normal(n, k), normal(n, 1)]),
        ("mul", lambda a, b: weighted(a * b), [normal(n, k), normal(n, 1)]),
        ("div", lambda a, b: weighted(a / b), [normal(n, k), rng.uniform(0.5, 2.0, (n, k))]),
        ("pow", lambda a: weighted(a**3), [normal(n, k)]),
        ("matmul", lambda a, b: ((a @ b) ** 2).sum(), [normal(2, n, 3), normal(3, k)]),
        ("sum", lambda a: (a.sum(axis=1) ** 2).sum(), [normal(n, k)]),
        ("mean", lambda a: (a.mean(axis=0, keepdims=True) ** 2).sum(), [normal(n, k)]),
        ("reshape_transpose", lambda a: weighted(a.reshape(k, n).transpose(1, 0)), [normal(k, n)]),
        ("getitem", lambda a: (a[picks] * rows).sum(), [normal(n, k)]),
        ("exp", lambda a: weighted(a.exp()), [normal(n, k)]),
        ("log", lambda a: weighted(a.log()), [rng.uniform(0.5, 2.0, (n, k))]),
        ("sigmoid", lambda a: weighted(a.sigmoid()), [normal(n, k)]),
        ("softplus", lambda a: weighted(a.softplus()), [normal(n, k)]),
        ("relu", lambda a: weighted(relu(a)), [_away_from_zero(rng, (n, k))]),
        ("softmax", lambda a: weighted(softmax(a)), [normal(n, k)]),
        ("log_softmax", lambda a: weighted(log_softmax(a)), [normal(n, k)]),
        ("concat", lambda a, b: (concat([a, b], axis=0) * rows).sum(), [normal(n, k), normal(n, k)]),
        ("where", lambda a, b: weighted(where(mask, a, b)), [normal(n, k), normal(n, k)]),
        ("masked_fill", lambda a: weighted(masked_fill(a, mask, -2.0)), [normal(n, k)]),
        ("linear", lambda x, w, b: (linear(x, w, b) ** 2).sum(), [normal(n, k), normal(3, k), normal(3)]),
        (
            "conv2d",
            lambda x, w, b: (conv2d(x, w, b, stride=2, padding=1) ** 2).sum(),
            [normal(*image), normal(3, channels, 3, 3), normal(3)],
        ),
        (
            "conv_transpose2d",
            lambda x, w, b: (conv_transpose2d(x, w, b, stride=2, padding=1) ** 2).sum(),
            [normal(*image), normal(channels, 3, 4, 4), normal(3)],
        ),
        (
            "group_norm",
            lambda x, w, b: (group_norm(x, 2, w, b) ** 3).sum(),
            [normal(1, 4, spatial, spatial), normal(4), normal(4)],
        ),
        ("layer_norm", lambda x, w, b: (layer_norm(x, w, b) ** 3).sum(), [normal(n, k), normal(k), normal(k)]),
        ("embedding_lookup", lambda w: weighted(embedding_lookup(w, targets)), [normal(k, k)]),
        (
            "attention",
            lambda q, key, v: (scaled_dot_product_attention(q, key, v, causal=True) ** 2).sum(),
            [normal(1, n, 4), normal(1, n, 4), normal(1, n, 4)],
        ),
        ("masked_cross_entropy", lambda a: masked_cross_entropy(a, targets, ignore), [normal(n, k)]),
        ("masked_mse", lambda a: masked_mse(a, regression_target, valid), [normal(n, k)]),
        ("bce_with_logits", lambda a: binary_cross_entropy_with_logits(a, binary_target, valid), [normal(n, k)]),
    ]


def toy_tokenizer(seed: int = 0) -> TokenizerModel:
    """A 16x16 depth tokenizer with a 4x4 token grid, cast to float64."""
    config = TokenizerConfig.depth(
        n_conv_layers=2,
        downsample_ratio=4,
        channel_schedule=[4, 8],
        input_size=16,
        n_resblocks=1,
        resblock_hidden=4,
        norm_groups=2,
        code_dim=4,
        codebook_size=8,
        seed=seed,
    )
    model = build_tokenizer(config)
    model.cast("f64")
    return model


def toy_solver_config(seed: int = 0) -> SolverConfig:
    return SolverConfig(
        image_size=8,
        patch_size=4,
        embed_dim=8,
        n_heads=2,
        n_encoder_blocks=1,
        n_decoder_blocks=1,
        ffn_hidden=16,
        max_seq_len=22,
        depth_size=8,
        depth_downsample_ratio=4,
        max_instances=1,
        n_parallel_blocks=1,
        vocabulary=Vocabulary(n_coord_bins=16, n_classes=2, mask_codebook_size=8, depth_codebook_size=8),
        seed=seed,
    )


def _relative_difference(first: np.ndarray, second: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(first), np.abs(second)), 1e-8)
    return float((np.abs(first - second) / scale).max())


def composite_cases(rng: np.random.Generator) -> List[GradCase]:
    tokenizer = toy_tokenizer()
    tokenizer.freeze()
    side, grid, size = tokenizer.config.input_size, tokenizer.grid_size, tokenizer.codebook.size
    target = rng.uniform(size=(1, side, side))
    valid = rng.uniform(size=(1, side, side)) > 0.2
    binary_target = (rng.uniform(size=(1, side, side)) > 0.5).astype(np.float64)

    def tokenizer_loss(x: Tensor) -> Tensor:
        return tokenizer.reconstruction_loss(tokenizer.forward(x, quantize=False), target, valid)

    def depth_aux(logits: Tensor) -> Tensor:
        return masked_mse(tokenizer.decode_soft(softmax(logits)), target, valid)

    def mask_aux(logits: Tensor) -> Tensor:
        return binary_cross_entropy_with_logits(tokenizer.soft_logits(softmax(logits)), binary_target)

    codebook_weights = rng.normal(size=(grid * grid, tokenizer.codebook.dim))

    def soft_embedding(logits: Tensor) -> Tensor:
        return (embed_soft(softmax(logits), tokenizer.codebook) * codebook_weights).sum()

    solver = build_solver(toy_solver_config())
    solver.cast("f64")
    vocabulary = solver.vocabulary
    config = solver.config
    depth_ids = vocabulary.depth.start + rng.integers(0, vocabulary.depth.size, (1, config.depth_length))

    def solver_loss(image: Tensor) -> Tensor:
        memory = encode_image(solver, image)
        logits = solver.teacher_forced_logits(memory, "dep", depth_ids)
        loss = masked_cross_entropy(logits.reshape(-1, vocabulary.size), depth_ids.reshape(-1))
        parallel = solver.parallel_logits(memory)
        offsets = (depth_ids - vocabulary.depth.start).reshape(-1)
        return loss + masked_cross_entropy(parallel.reshape(-1, vocabulary.depth.size), offsets)

    return [
        ("tokenizer_forward", tokenizer_loss, [rng.uniform(0, 1, (1, 1, side, side))]),
        ("embed_soft", soft_embedding, [rng.normal(size=(grid * grid, size))]),
        ("aux_depth_frozen_detokenizer", depth_aux, [rng.normal(size=(1, grid * grid, size))]),
        ("aux_mask_frozen_detokenizer", mask_aux, [rng.normal(size=(1, grid * grid, size))]),
        ("solver_forward", solver_loss, [rng.uniform(0, 1, (1, config.in_channels, side, side))]),
    ]


def straight_through_check(rng: np.random.Generator) -> GradCheckResult:
    """The STE gradient equals the gradient of the decoder applied at ``encode(x) + (z_q - z)``.

    The offset is frozen at the base point, so the surrogate is smooth and
    can itself be finite-differenced.
    """
    tokenizer = toy_tokenizer()
    side = tokenizer.config.input_size
    base = rng.uniform(0, 1, (1, 1, side, side))
    target = rng.uniform(size=(1, side, side))
    valid = np.ones((1, side, side), dtype=bool)
    with_ste = Tensor(base.copy(), requires_grad=True)
    _, passed, _, _ = tokenizer.quantize(tokenizer.encode(with_ste))
    tokenizer.reconstruction_loss(tokenizer.decode(passed), target, valid).backward()
    z = tokenizer.encode(Tensor(base)).data
    _, quantized, _, _ = tokenizer.quantize(Tensor(z))
    offset = quantized.data - z

    def surrogate(x: Tensor) -> Tensor:
        return tokenizer.reconstruction_loss(tokenizer.decode(tokenizer.encode(x) + offset), target, valid)

    through_surrogate = Tensor(base.copy(), requires_grad=True)
    surrogate(through_surrogate).backward()
    if with_ste.grad is None or through_surrogate.grad is None:
        raise ContractError("Straight-through check produced no input gradient")
    error = max(
        _relative_difference(with_ste.grad, through_surrogate.grad),
        grad_check(surrogate, [base], eps=GRADCHECK_EPS),
    )
    return GradCheckResult(name="straight_through_composite", max_relative_error=error, tolerance=GRADCHECK_TOLERANCE)


def gradcheck_suite(seed: int = 0) -> GradSuiteReport:
    rng = seeded_rng(seed)
    results: List[GradCheckResult] = []
    cases = [case for size in PRIMITIVE_SIZES for case in primitive_cases(rng, size)]
    for index, (name, fn, inputs) in enumerate(cases + composite_cases(rng)):
        label = f"{name}[{index}]" if index < len(cases) else name
        error = grad_check(fn, inputs, eps=GRADCHECK_EPS)
        results.append(GradCheckResult(name=label, max_relative_error=error, tolerance=GRADCHECK_TOLERANCE))
        if not results[-1].passed:
            logger.warning(f"Gradient check {label} failed with relative error {error:.3e}")
    results.append(straight_through_check(rng))
    return GradSuiteReport(results=results)


def vq_suite(seed: int = 0) -> SuiteReport:
    rng = seeded_rng(seed)
    codebook = Codebook.create(16, 4, rng)
    codebook.cast(np.dtype(np.float64))
    indices = rng.integers(0, codebook.size, 256)
    soft = embed_soft(one_hot(indices, codebook.size, dtype=np.float64), codebook).data
    z = rng.normal(size=(256, codebook.dim))
    first, z_q = quantize_hard(z, codebook)
    second, _ = quantize_hard(z_q, codebook)
    probs = rng.dirichlet(np.ones(codebook.size), 256)
    mixed = embed_soft(probs, codebook).data
    low, high = codebook.embeddings.min(axis=0), codebook.embeddings.max(axis=0)
    outside = float(np.maximum(np.maximum(low - mixed, mixed - high), 0).max())
    before = float(codebook.ema_cluster_size.sum())
    ema_update(codebook, z, first)
    expected = codebook.decay * before + (1 - codebook.decay) * len(z)
    drift = abs(float(codebook.ema_cluster_size.sum()) - expected)
    return SuiteReport(
        suite="vq",
        checks=[
            SuiteCheck(
                name="one_hot_soft_equals_hard", passed=bool(np.array_equal(soft, embed_indices(indices, codebook)))
            ),
            SuiteCheck(name="quantize_idempotent", passed=bool(np.array_equal(first, second))),
            SuiteCheck(name="soft_embedding_in_convex_hull", passed=outside <= 1e-12, value=outside),
            SuiteCheck(name="ema_count_conservation", passed=drift <= 1e-5, value=drift),
        ],
    )


def _record_ids(record: InstanceRecord, vocabulary: Vocabulary) -> List[int]:
    return (
        [vocabulary.token("coord", bin_) for bin_ in record.coord_bins]
        + [vocabulary.classes.start + record.class_offset]
        + [vocabulary.token("mask", offset) for offset in record.mask_offsets]
    )


def _random_box(rng: np.random.Generator) -> Tuple[float, float, float, float]:
    xs, ys = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
    return float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1])


def codec_suite(seed: int = 0, n_lists: int = 1000, n_grids: int = 1000, max_instances: int = 4) -> SuiteReport:
    """Token-level identity of the instance and depth codecs on random inputs."""
    rng = seeded_rng(seed)
    vocabulary = Vocabulary()
    mask_tokenizer = build_tokenizer(TokenizerConfig.mask(seed=seed))
    grid = int(np.sqrt(MASK_TOKENS))
    identity_failures = 0
    content_failures = 0
    worst_box_error = 0.0
    for _ in range(n_lists):
        count = int(rng.integers(0, max_instances + 1))
        instances = [
            InstanceAnnotation(
                box=_random_box(rng),
                class_id=int(rng.integers(0, vocabulary.n_classes)),
                mask64=np.zeros((MASK_SIZE, MASK_SIZE), dtype=bool),
            )
            for _ in range(count)
        ]
        grids = [rng.integers(0, vocabulary.mask_codebook_size, (grid, grid)) for _ in range(count)]
        n_noise = int(rng.integers(0, max_instances - count + 1))
        sequence = encode_instances(instances, mask_tokenizer, n_noise, rng, vocabulary, mask_tokens=grids)
        records = parse_instance_records(sequence.ids, vocabulary)
        rebuilt = [token for record in records for token in _record_ids(record, vocabulary)] + [EOS]
        if rebuilt != sequence.ids or len(records) != count + n_noise:
            identity_failures += 1
        decoded = sorted(
            (tuple(r.coord_bins), r.class_offset, tuple(r.mask_offsets))
            for r in records
            if r.class_offset != vocabulary.n_classes
        )
        expected = sorted(
            (tuple(quantize_box(i.box, vocabulary.n_coord_bins)), i.class_id, tuple(g.reshape(-1).tolist()))
            for i, g in zip(instances, grids)
        )
        if decoded != expected:
            content_failures += 1
        for instance in instances:
            restored = dequantize_box(quantize_box(instance.box, vocabulary.n_coord_bins), vocabulary.n_coord_bins)
            worst_box_error = max(worst_box_error, float(np.abs(np.subtract(restored, instance.box)).max()))
    depth_failures = 0
    for _ in range(n_grids):
        tokens = rng.integers(0, vocabulary.depth_codebook_size, (grid, grid))
        if not np.array_equal(decode_depth(encode_depth(tokens, vocabulary), vocabulary, (grid, grid)), tokens):
            depth_failures += 1
    bound = 1 / (2 * vocabulary.n_coord_bins)
    return SuiteReport(
        suite="codec",
        checks=[
            SuiteCheck(name="instance_token_identity", passed=not identity_failures, value=identity_failures),
            SuiteCheck(name="instance_content", passed=not content_failures, value=content_failures),
            SuiteCheck(name="box_dequantization_error", passed=worst_box_error <= bound + 1e-12, value=worst_box_error),
            SuiteCheck(name="depth_token_identity", passed=not depth_failures, value=depth_failures),
        ],
    )


def interp_suite() -> SuiteReport:
    depth_codec = InterpolationTokenizer.depth()
    constant = np.full((MASK_SIZE, MASK_SIZE), 5.0)
    constant_error = float(np.abs(depth_codec.roundtrip(constant) - constant).max())
    mask_codec = InterpolationTokenizer.mask()
    square = np.zeros((MASK_SIZE, MASK_SIZE))
    square[16:48, 16:48] = 1.0
    square_iou = binary_iou(mask_codec.roundtrip(square) > 0.5, square > 0.5)
    rows, cols = np.indices((MASK_SIZE, MASK_SIZE))
    checkerboard = ((rows + cols) % 2 == 0).astype(np.float64)
    checker_iou = binary_iou(mask_codec.roundtrip(checkerboard) > 0.5, checkerboard > 0.5)
    return SuiteReport(
        suite="interp",
        checks=[
            SuiteCheck(
                name="constant_depth_bin_error",
                passed=constant_error <= depth_codec.bin_width / 2 + 1e-9,
                value=constant_error,
            ),
            SuiteCheck(name="block_aligned_square_iou", passed=square_iou == 1.0, value=square_iou),
            SuiteCheck(name="checkerboard_iou", passed=checker_iou <= 0.5, value=checker_iou),
        ],
    )


def roundtrip_suite(suite: RoundtripSuite, seed: int = 0) -> SuiteReport:
    if suite == "vq":
        return vq_suite(seed)
    if suite == "codec":
        return codec_suite(seed)
    return interp_suite()
