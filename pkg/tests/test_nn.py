import numpy as np
import pytest

from alltok.exceptions import CheckpointFormatError, DimensionError
from alltok.nn import DecoderBlock, GroupNorm, Linear, MultiHeadAttention, ResBlock
from alltok.optim import TrainConfig, adam_step
from alltok.tensor import Tensor


def test_named_parameters_walk_nested_modules(rng: np.random.Generator) -> None:
    block = DecoderBlock.build(8, 2, 16, rng)
    names = [name for name, _ in block.named_parameters()]
    assert "self_attention.query.weight" in names
    assert "feed_forward.fc_2.bias" in names
    assert block.parameter_count() == sum(param.data.size for param in block.parameters())


def test_state_dict_round_trip(rng: np.random.Generator) -> None:
    first = ResBlock.build(4, 4, 2, rng)
    second = ResBlock.build(4, 4, 2, rng)
    second.load_state_dict(first.state_dict())
    x = Tensor(rng.normal(size=(1, 4, 3, 3)).astype(np.float32))
    assert np.array_equal(first(x).data, second(x).data)


def test_load_state_dict_checks_shapes(rng: np.random.Generator) -> None:
    layer = Linear.build(3, 2, rng)
    with pytest.raises(CheckpointFormatError):
        layer.load_state_dict({"weight": np.zeros((3, 3)), "bias": np.zeros(2)})
    with pytest.raises(CheckpointFormatError):
        layer.load_state_dict({"weight": np.zeros((2, 3))})


def test_freeze_and_cast(rng: np.random.Generator) -> None:
    layer = Linear.build(3, 2, rng)
    layer.freeze()
    layer.cast("f64")
    assert all(not param.tensor.requires_grad for param in layer.parameters())
    assert layer.weight.data.dtype == np.float64


def test_optimizer_state_is_exported(rng: np.random.Generator) -> None:
    layer = Linear.build(3, 2, rng)
    layer(Tensor(np.ones((1, 3), dtype=np.float32))).sum().backward()
    adam_step(layer.parameters(), 0.01, TrainConfig())
    state = layer.optimizer_state()
    assert int(state["optim.weight.step"]) == 1
    fresh = Linear.build(3, 2, rng)
    fresh.load_state_dict(layer.state_dict() | state)
    assert fresh.weight.step == 1
    assert fresh.weight.first_moment is not None


def test_attention_and_norm_shapes(rng: np.random.Generator) -> None:
    with pytest.raises(DimensionError):
        MultiHeadAttention.build(6, 4, rng)
    with pytest.raises(DimensionError):
        GroupNorm.build(6, 4)
    attention = MultiHeadAttention.build(8, 2, rng)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    memory = Tensor(rng.normal(size=(2, 3, 8)))
    assert attention(x, context=memory).shape == (2, 5, 8)
