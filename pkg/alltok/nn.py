from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from alltok.base import BaseModelConfig
from alltok.exceptions import CheckpointFormatError, DimensionError
from alltok.functional import (
    conv2d,
    conv_transpose2d,
    embedding_lookup,
    group_norm,
    layer_norm,
    linear,
    relu,
    scaled_dot_product_attention,
)
from alltok.optim import Parameter
from alltok.tensor import Tensor, dtype_of
from alltok.types import DType


def _walk(value: Any, name: str) -> Iterator[Tuple[str, Parameter]]:  # noqa: ANN401
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{name}.")
    elif isinstance(value, list):
        for index, item in enumerate(value):
            yield from _walk(item, f"{name}.{index}")


def normal_init(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Module(BaseModelConfig):
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name in type(self).model_fields:
            yield from _walk(getattr(self, name), f"{prefix}{name}")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(param.data.size for param in self.parameters()))

    def freeze(self) -> None:
        for param in self.parameters():
            param.tensor.requires_grad = False
            param.zero_grad()

    def cast(self, dtype: DType) -> None:
        for param in self.parameters():
            param.tensor = Tensor(
                param.data.astype(dtype_of(dtype)), requires_grad=param.tensor.requires_grad
            )
            param.reset_state()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data for name, param in self.named_parameters()}

    def optimizer_state(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {}
        for name, param in self.named_parameters():
            if param.first_moment is not None and param.second_moment is not None:
                state[f"optim.{name}.m"] = param.first_moment
                state[f"optim.{name}.v"] = param.second_moment
                state[f"optim.{name}.step"] = np.asarray(param.step, dtype=np.int64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, param in self.named_parameters():
            if name not in state:
                raise CheckpointFormatError(f"Checkpoint is missing parameter {name}")
            array = state[name]
            if array.shape != param.data.shape:
                raise CheckpointFormatError(f"Parameter {name} has shape {array.shape}, expected {param.data.shape}")
            param.tensor = Tensor(array.astype(param.data.dtype), requires_grad=param.tensor.requires_grad)
            if f"optim.{name}.m" in state:
                param.first_moment = state[f"optim.{name}.m"].copy()
                param.second_moment = state[f"optim.{name}.v"].copy()
                param.step = int(state[f"optim.{name}.step"])
            else:
                param.reset_state()


class Conv2d(Module):
    weight: Parameter
    bias: Optional[Parameter] = None
    stride: int = 1
    padding: int = 0

    @classmethod
    def build(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ) -> "Conv2d":
        fan_in = in_channels * kernel * kernel
        return cls(
            weight=Parameter.create(normal_init(rng, (out_channels, in_channels, kernel, kernel), np.sqrt(2 / fan_in))),
            bias=Parameter.create(np.zeros(out_channels, dtype=np.float32)) if bias else None,
            stride=stride,
            padding=padding,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(
            x, self.weight.tensor, self.bias.tensor if self.bias else None, self.stride, self.padding
        )


class ConvTranspose2d(Module):
    weight: Parameter
    bias: Optional[Parameter] = None
    stride: int = 2
    padding: int = 1

    @classmethod
    def build(
        cls,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel: int = 4,
        stride: int = 2,
        padding: int = 1,
        bias: bool = True,
    ) -> "ConvTranspose2d":
        fan_in = in_channels * kernel * kernel / (stride * stride)
        return cls(
            weight=Parameter.create(normal_init(rng, (in_channels, out_channels, kernel, kernel), np.sqrt(2 / fan_in))),
            bias=Parameter.create(np.zeros(out_channels, dtype=np.float32)) if bias else None,
            stride=stride,
            padding=padding,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(
            x, self.weight.tensor, self.bias.tensor if self.bias else None, self.stride, self.padding
        )


class Linear(Module):
    weight: Parameter
    bias: Optional[Parameter] = None

    @classmethod
    def build(cls, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True) -> "Linear":
        return cls(
            weight=Parameter.create(normal_init(rng, (out_features, in_features), np.sqrt(1 / in_features))),
            bias=Parameter.create(np.zeros(out_features, dtype=np.float32)) if bias else None,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight.tensor, self.bias.tensor if self.bias else None)


class GroupNorm(Module):
    num_groups: int
    weight: Parameter
    bias: Parameter

    @classmethod
    def build(cls, channels: int, num_groups: int) -> "GroupNorm":
        if channels % num_groups:
            raise DimensionError(f"{channels} channels cannot be split into {num_groups} groups")
        return cls(
            num_groups=num_groups,
            weight=Parameter.create(np.ones(channels, dtype=np.float32)),
            bias=Parameter.create(np.zeros(channels, dtype=np.float32)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.num_groups, self.weight.tensor, self.bias.tensor)


class LayerNorm(Module):
    weight: Parameter
    bias: Parameter

    @classmethod
    def build(cls, features: int) -> "LayerNorm":
        return cls(
            weight=Parameter.create(np.ones(features, dtype=np.float32)),
            bias=Parameter.create(np.zeros(features, dtype=np.float32)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight.tensor, self.bias.tensor)


class Embedding(Module):
    weight: Parameter

    @classmethod
    def build(cls, count: int, features: int, rng: np.random.Generator) -> "Embedding":
        return cls(weight=Parameter.create(normal_init(rng, (count, features), 0.02)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding_lookup(self.weight.tensor, ids)


class ResBlock(Module):
    """conv3x3 -> norm -> relu -> conv3x3 -> norm, plus the identity skip."""

    conv_1: Conv2d
    norm_1: GroupNorm
    conv_2: Conv2d
    norm_2: GroupNorm

    @classmethod
    def build(
        cls, channels: int, hidden: int, num_groups: int, rng: np.random.Generator, bias: bool = True
    ) -> "ResBlock":
        return cls(
            conv_1=Conv2d.build(channels, hidden, 3, rng, padding=1, bias=bias),
            norm_1=GroupNorm.build(hidden, num_groups),
            conv_2=Conv2d.build(hidden, channels, 3, rng, padding=1, bias=bias),
            norm_2=GroupNorm.build(channels, num_groups),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.norm_2(self.conv_2(relu(self.norm_1(self.conv_1(x)))))


class MultiHeadAttention(Module):
    n_heads: int
    query: Linear
    key: Linear
    value: Linear
    out: Linear

    @classmethod
    def build(cls, embed_dim: int, n_heads: int, rng: np.random.Generator) -> "MultiHeadAttention":
        if embed_dim % n_heads:
            raise DimensionError(f"embed_dim {embed_dim} is not divisible by n_heads {n_heads}")
        return cls(
            n_heads=n_heads,
            query=Linear.build(embed_dim, embed_dim, rng),
            key=Linear.build(embed_dim, embed_dim, rng),
            value=Linear.build(embed_dim, embed_dim, rng),
            out=Linear.build(embed_dim, embed_dim, rng),
        )

    def _split(self, x: Tensor) -> Tensor:
        n, length, embed_dim = x.shape
        return x.reshape(n, length, self.n_heads, embed_dim // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Optional[Tensor] = None, causal: bool = False) -> Tensor:
        source = x if context is None else context
        attended = scaled_dot_product_attention(
            self._split(self.query(x)), self._split(self.key(source)), self._split(self.value(source)), causal=causal
        )
        n, _, length, head_dim = attended.shape
        return self.out(attended.transpose(0, 2, 1, 3).reshape(n, length, self.n_heads * head_dim))


class FeedForward(Module):
    fc_1: Linear
    fc_2: Linear

    @classmethod
    def build(cls, embed_dim: int, hidden: int, rng: np.random.Generator) -> "FeedForward":
        return cls(fc_1=Linear.build(embed_dim, hidden, rng), fc_2=Linear.build(hidden, embed_dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc_2(relu(self.fc_1(x)))


class EncoderBlock(Module):
    norm_1: LayerNorm
    attention: MultiHeadAttention
    norm_2: LayerNorm
    feed_forward: FeedForward

    @classmethod
    def build(cls, embed_dim: int, n_heads: int, hidden: int, rng: np.random.Generator) -> "EncoderBlock":
        return cls(
            norm_1=LayerNorm.build(embed_dim),
            attention=MultiHeadAttention.build(embed_dim, n_heads, rng),
            norm_2=LayerNorm.build(embed_dim),
            feed_forward=FeedForward.build(embed_dim, hidden, rng),
        )

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm_1(x))
        return x + self.feed_forward(self.norm_2(x))


class DecoderBlock(Module):
    """Self-attention, cross-attention over the image memory, then an FFN."""

    norm_1: LayerNorm
    self_attention: MultiHeadAttention
    norm_2: LayerNorm
    cross_attention: MultiHeadAttention
    norm_3: LayerNorm
    feed_forward: FeedForward

    @classmethod
    def build(cls, embed_dim: int, n_heads: int, hidden: int, rng: np.random.Generator) -> "DecoderBlock":
        return cls(
            norm_1=LayerNorm.build(embed_dim),
            self_attention=MultiHeadAttention.build(embed_dim, n_heads, rng),
            norm_2=LayerNorm.build(embed_dim),
            cross_attention=MultiHeadAttention.build(embed_dim, n_heads, rng),
            norm_3=LayerNorm.build(embed_dim),
            feed_forward=FeedForward.build(embed_dim, hidden, rng),
        )

    def __call__(self, x: Tensor, memory: Tensor, causal: bool = True) -> Tensor:
        x = x + self.self_attention(self.norm_1(x), causal=causal)
        x = x + self.cross_attention(self.norm_2(x), context=memory)
        return x + self.feed_forward(self.norm_3(x))
