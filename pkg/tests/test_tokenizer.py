from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from alltok.exceptions import CheckpointFormatError, ContractError, DimensionError, TokenIndexError
from alltok.functional import softmax
from alltok.io import save_checkpoint
from alltok.optim import TrainConfig
from alltok.tensor import Tensor
from alltok.tokenizer import (
    DepthMap,
    MaskAugSpec,
    TokenizerConfig,
    TokenizerDataset,
    TokenizerModel,
    build_tokenizer,
    detokenize,
    inpainting_rmse,
    load_tokenizer,
    mask_augment,
    reconstruction_rmse,
    save_tokenizer,
    tokenize,
    train_tokenizer,
)
from alltok.vq import SoftToken


def _depth_dataset(rng: np.random.Generator, n: int = 6) -> TokenizerDataset:
    values = rng.uniform(1.0, 9.0, (n, 64, 64)).astype(np.float32)
    valid = rng.uniform(size=(n, 64, 64)) > 0.1
    return TokenizerDataset.from_arrays(values, valid)


def test_presets() -> None:
    depth, mask = TokenizerConfig.depth(), TokenizerConfig.mask()
    assert (depth.downsample_ratio, depth.grid_size, depth.input_range) == (32, 2, (0.0, 10.0))
    assert (mask.downsample_ratio, mask.grid_size, mask.channel_schedule) == (16, 4, [32, 64, 128, 256])
    ablation = TokenizerConfig.ablation("depth", 8, codebook_size=64, width_multiplier=0.5)
    assert (ablation.n_conv_layers, ablation.channel_schedule, ablation.codebook_size) == (3, [64, 128, 256], 64)
    assert ablation.channels() == [32, 64, 128]


def test_config_validation() -> None:
    with pytest.raises(ValidationError):
        TokenizerConfig.depth(downsample_ratio=16)
    with pytest.raises(ValidationError):
        TokenizerConfig.depth(codebook_size=1)
    with pytest.raises(ValidationError):
        TokenizerConfig.depth(input_range=(1.0, 1.0))
    with pytest.raises(DimensionError):
        build_tokenizer(TokenizerConfig.depth(channel_schedule=[4, 4]))


def test_depth_map_validation() -> None:
    values = np.ones((4, 4))
    values[0, 0] = np.nan
    with pytest.raises(ValidationError):
        DepthMap(values=values, valid=np.ones((4, 4), dtype=bool))
    valid = np.ones((4, 4), dtype=bool)
    valid[0, 0] = False
    assert DepthMap(values=values, valid=valid).shape == (4, 4)
    with pytest.raises(ValidationError):
        DepthMap(values=np.ones((4, 4)), valid=np.ones((4, 3), dtype=bool))


def test_tokenize_shapes(depth_tokenizer: TokenizerModel, rng: np.random.Generator) -> None:
    single = tokenize(depth_tokenizer, DepthMap.dense(rng.uniform(1, 9, (64, 64))))
    assert single.shape == (2, 2)
    batch = tokenize(depth_tokenizer, rng.uniform(1, 9, (3, 64, 64)))
    assert batch.shape == (3, 2, 2)
    assert batch.min() >= 0 and batch.max() < depth_tokenizer.codebook.size
    with pytest.raises(DimensionError):
        tokenize(depth_tokenizer, np.ones((48, 48)))


def test_hard_detokenize_equals_soft_on_one_hot(depth_tokenizer: TokenizerModel) -> None:
    tokens = np.array([[0, 3], [7, 1]])
    hard = detokenize(depth_tokenizer, tokens)
    soft = detokenize(depth_tokenizer, SoftToken.from_indices(tokens, depth_tokenizer.codebook.size))
    assert hard.shape == (64, 64)
    assert np.array_equal(hard, soft)
    assert hard.min() >= 0.0 and hard.max() <= 10.0


def test_detokenize_errors(depth_tokenizer: TokenizerModel) -> None:
    with pytest.raises(TokenIndexError):
        detokenize(depth_tokenizer, np.array([[0, 8], [0, 0]]))
    with pytest.raises(DimensionError):
        detokenize(depth_tokenizer, np.zeros((4, 4), dtype=np.int64))
    with pytest.raises(DimensionError):
        detokenize(depth_tokenizer, SoftToken(probs=np.full((2, 2, 4), 0.25)))


def test_soft_decoding_is_differentiable_through_frozen_decoder(depth_tokenizer: TokenizerModel) -> None:
    depth_tokenizer.freeze()
    logits = Tensor(np.zeros((1, 4, depth_tokenizer.codebook.size), dtype=np.float32), requires_grad=True)
    output = depth_tokenizer.decode_soft(softmax(logits))
    assert output.shape == (1, 64, 64)
    output.mean().backward()
    assert logits.grad is not None
    assert np.abs(logits.grad).sum() > 0
    assert all(param.grad is None for param in depth_tokenizer.parameters())


def test_mask_augment(rng: np.random.Generator) -> None:
    item = DepthMap.dense(np.full((64, 64), 5.0))
    sample = mask_augment(item, MaskAugSpec(mask_ratio=0.5, patch_size=16), rng)
    assert sample.patch_mask.sum() == 8 * 16 * 16
    assert np.all(sample.corrupted[sample.patch_mask] == 0.0)
    assert np.all(sample.corrupted[~sample.patch_mask] == 5.0)
    assert np.array_equal(sample.loss_mask, item.valid)
    assert np.array_equal(sample.target, item.values)
    untouched = mask_augment(item, MaskAugSpec(mask_ratio=0.0), rng)
    assert not untouched.patch_mask.any()
    with pytest.raises(DimensionError):
        mask_augment(item, MaskAugSpec(patch_size=24), rng)


def test_dataset_split(rng: np.random.Generator) -> None:
    train, validation = _depth_dataset(rng).split(2)
    assert (len(train), len(validation)) == (4, 2)


def test_training_writes_history_and_checkpoint(
    tmp_path: Path, depth_config: TokenizerConfig, rng: np.random.Generator
) -> None:
    dataset = _depth_dataset(rng)
    checkpoint, metrics = tmp_path / "tokenizer.aitk", tmp_path / "metrics.jsonl"
    result = train_tokenizer(
        dataset,
        depth_config,
        TrainConfig(epochs=2, batch_size=4, lr=1e-3),
        aug=MaskAugSpec(mask_ratio=0.25),
        checkpoint_path=checkpoint,
        metrics_path=metrics,
    )
    assert [row.epoch for row in result.history] == [0, 1]
    assert all(np.isfinite(row.loss) for row in result.history)
    assert len(metrics.read_text().splitlines()) == 2
    assert result.model.codebook.initialized
    loaded, manifest = load_tokenizer(checkpoint)
    assert manifest["epoch"] == 1
    assert np.array_equal(tokenize(loaded, dataset.values[:2]), tokenize(result.model, dataset.values[:2]))


def test_training_is_deterministic_and_resumable(
    tmp_path: Path, depth_config: TokenizerConfig, rng: np.random.Generator
) -> None:
    dataset = _depth_dataset(rng)
    two_epochs = TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=5)
    first = train_tokenizer(dataset, depth_config, two_epochs).model
    second = train_tokenizer(dataset, depth_config, two_epochs).model
    checkpoint = tmp_path / "tokenizer.aitk"
    one_epoch = TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=5)
    train_tokenizer(dataset, depth_config, one_epoch, checkpoint_path=checkpoint)
    resumed = train_tokenizer(dataset, depth_config, two_epochs, resume=checkpoint)
    assert [row.epoch for row in resumed.history] == [1]
    for state in (second.state_dict(), resumed.model.state_dict()):
        reference = first.state_dict()
        assert sorted(state) == sorted(reference)
        assert all(np.array_equal(state[name], reference[name]) for name in reference)
    with pytest.raises(ContractError):
        train_tokenizer(dataset, depth_config.model_copy(update={"codebook_size": 16}), two_epochs, resume=checkpoint)


def test_invalid_pixels_never_reach_the_reconstruction_gradient(
    depth_tokenizer: TokenizerModel, rng: np.random.Generator
) -> None:
    valid = rng.uniform(size=(2, 64, 64)) > 0.3
    target = np.where(valid, rng.uniform(0.1, 0.9, (2, 64, 64)), 0).astype(np.float32)
    perturbed = np.where(valid, target, rng.uniform(-50, 50, (2, 64, 64))).astype(np.float32)
    values = rng.normal(size=(2, 1, 64, 64)).astype(np.float32)
    results = []
    for candidate in (target, perturbed):
        logits = Tensor(values.copy(), requires_grad=True)
        loss = depth_tokenizer.reconstruction_loss(logits, candidate, valid)
        loss.backward()
        assert logits.grad is not None
        assert np.all(logits.grad[:, 0][~valid] == 0)
        results.append((loss.item(), logits.grad))
    assert results[0][0] == results[1][0]
    assert np.array_equal(results[0][1], results[1][1])


def test_invalid_pixels_never_influence_training(depth_config: TokenizerConfig, rng: np.random.Generator) -> None:
    dataset = _depth_dataset(rng)
    noisy = TokenizerDataset.from_arrays(
        np.where(dataset.valid, dataset.values, rng.uniform(-100, 100, dataset.values.shape)), dataset.valid
    )
    train_cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=2)
    aug = MaskAugSpec(mask_ratio=0.25, patch_size=16)
    clean_run = train_tokenizer(dataset, depth_config, train_cfg, aug=aug)
    noisy_run = train_tokenizer(noisy, depth_config, train_cfg, aug=aug)
    assert [row.loss for row in clean_run.history] == [row.loss for row in noisy_run.history]
    reference, state = clean_run.model.state_dict(), noisy_run.model.state_dict()
    assert all(np.array_equal(state[name], reference[name]) for name in reference)


def test_training_needs_data(depth_config: TokenizerConfig) -> None:
    empty = TokenizerDataset.from_arrays(np.zeros((0, 64, 64)))
    with pytest.raises(ContractError):
        train_tokenizer(empty, depth_config, TrainConfig(epochs=1))


def test_reconstruction_metrics(depth_tokenizer: TokenizerModel, rng: np.random.Generator) -> None:
    dataset = _depth_dataset(rng, n=2)
    rmse = reconstruction_rmse(depth_tokenizer, dataset)
    assert 0.0 <= rmse <= 1.0
    assert 0.0 <= inpainting_rmse(depth_tokenizer, dataset, MaskAugSpec(mask_ratio=0.5)) <= 1.0


def test_checkpoint_kind_is_checked(tmp_path: Path, depth_tokenizer: TokenizerModel) -> None:
    path = tmp_path / "tokenizer.aitk"
    save_tokenizer(depth_tokenizer, path)
    model, manifest = load_tokenizer(path)
    assert manifest["kind"] == "tokenizer"
    assert model.config == depth_tokenizer.config
    other = tmp_path / "other.aitk"
    save_checkpoint(other, [], {"kind": "solver"})
    with pytest.raises(CheckpointFormatError):
        load_tokenizer(other)
