"""Differentiable primitives used by the tokenizers and the task-solver.

Convolutions go through an im2col view built with
``numpy.lib.stride_tricks.sliding_window_view``; their backward passes
scatter the column gradient back with one strided add per kernel tap.
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from alltok.exceptions import DimensionError, TokenIndexError
from alltok.tensor import Operand, Tensor, as_tensor, masked_fill, where


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _check_conv_args(x: Tensor, weight: Tensor, in_axis: int, stride: int, padding: int) -> None:
    if x.ndim != 4:  # noqa: PLR2004
        raise DimensionError(f"Expected input of shape [N, C, H, W], got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:  # noqa: PLR2004
        raise DimensionError(f"Expected a square kernel of rank 4, got {weight.shape}")
    if weight.shape[in_axis] != x.shape[1]:
        raise DimensionError(
            f"Input has {x.shape[1]} channels but weight {weight.shape} expects {weight.shape[in_axis]}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"Invalid stride {stride} or padding {padding}")


def _im2col(padded: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    # [N, C, Ho, Wo, k, k] -> [N, Ho, Wo, C, k, k]
    return windows.transpose(0, 2, 3, 1, 4, 5)


def _col2im(
    columns: np.ndarray, shape: Tuple[int, int, int, int], kernel: int, stride: int
) -> np.ndarray:
    n, h_out, w_out = columns.shape[:3]
    image = np.zeros(shape, dtype=columns.dtype)
    for i in range(kernel):
        for j in range(kernel):
            image[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += columns[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return image


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    _check_conv_args(x, weight, 1, stride, padding)
    n, c, h, w = x.shape
    out_channels, _, kernel, _ = weight.shape
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"Kernel {kernel} does not fit input {h}x{w} with padding {padding}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    columns = _im2col(padded, kernel, stride, out_h, out_w).reshape(n * out_h * out_w, c * kernel * kernel)
    w_mat = weight.data.reshape(out_channels, -1)
    out = columns @ w_mat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, out_h, out_w, out_channels).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g_mat.T @ columns).reshape(weight.shape)
        grad_b = g_mat.sum(axis=0) if bias is not None else None
        grad_columns = (g_mat @ w_mat).reshape(n, out_h, out_w, c, kernel, kernel)
        grad_padded = _col2im(grad_columns, padded.shape, kernel, stride)
        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution with weight laid out as [C_in, C_out, k, k].

    With kernel 4, stride 2 and padding 1 the output is exactly twice the
    input size.
    """
    _check_conv_args(x, weight, 0, stride, padding)
    n, c, h, w = x.shape
    _, out_channels, kernel, _ = weight.shape
    out_h = conv_transpose_output_size(h, kernel, stride, padding)
    out_w = conv_transpose_output_size(w, kernel, stride, padding)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"Transposed convolution output would be empty for input {h}x{w}")
    full_shape = (n, out_channels, (h - 1) * stride + kernel, (w - 1) * stride + kernel)
    x_mat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    w_mat = weight.data.reshape(c, -1)
    columns = (x_mat @ w_mat).reshape(n, h, w, out_channels, kernel, kernel)
    full = _col2im(columns, full_shape, kernel, stride)
    out = full[:, :, padding : padding + out_h, padding : padding + out_w]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        grad_full = np.zeros(full_shape, dtype=g.dtype)
        grad_full[:, :, padding : padding + out_h, padding : padding + out_w] = g
        grad_columns = _im2col(grad_full, kernel, stride, h, w).reshape(n * h * w, -1)
        grad_x = (grad_columns @ w_mat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        grad_w = (x_mat.T @ grad_columns).reshape(weight.shape)
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"Linear input features {x.shape[-1]} != weight columns {weight.shape[1]}")
    out = x @ weight.T
    return out + bias if bias is not None else out


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return Tensor.from_op(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,), "relu")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"Axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def group_norm(
    x: Tensor, num_groups: int, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5
) -> Tensor:
    n, c = x.shape[:2]
    if c % num_groups:
        raise DimensionError(f"{c} channels cannot be split into {num_groups} groups")
    grouped = x.reshape(n, num_groups, -1)
    mean = grouped.mean(axis=-1, keepdims=True)
    centered = grouped - mean
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = (centered / (variance + eps) ** 0.5).reshape(x.shape)
    affine_shape = (1, c) + (1,) * (x.ndim - 2)
    if weight is not None:
        normalized = normalized * weight.reshape(affine_shape)
    if bias is not None:
        normalized = normalized + bias.reshape(affine_shape)
    return normalized


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = centered / (variance + eps) ** 0.5
    if weight is not None:
        normalized = normalized * weight
    if bias is not None:
        normalized = normalized + bias
    return normalized


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise TokenIndexError(f"Token ids must lie in [0, {weight.shape[0]}), got range [{ids.min()}, {ids.max()}]")
    return weight[ids]


def causal_mask(query_length: int, key_length: int) -> np.ndarray:
    """Boolean mask, True where a query position may NOT attend."""
    offset = key_length - query_length
    return np.triu(np.ones((query_length, key_length), dtype=bool), k=1 + offset)


def scaled_dot_product_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    causal: bool = False,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    if query.shape[-1] != key.shape[-1] or key.shape[-2] != value.shape[-2]:
        raise DimensionError(f"Incompatible attention shapes q={query.shape} k={key.shape} v={value.shape}")
    query_length, key_length = query.shape[-2], key.shape[-2]
    blocked = np.zeros((query_length, key_length), dtype=bool)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (query_length, key_length):
            raise DimensionError(f"Mask shape {mask.shape} does not match scores {(query_length, key_length)}")
        blocked = blocked | mask
    if causal:
        blocked = blocked | causal_mask(query_length, key_length)
    scores = (query @ key.transpose(*range(key.ndim - 2), key.ndim - 1, key.ndim - 2)) / float(
        np.sqrt(query.shape[-1])
    )
    if blocked.any():
        scores = masked_fill(scores, blocked, -np.inf)
    return softmax(scores, axis=-1) @ value


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, ignore: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over the positions that are not ignored.

    Ignored positions contribute neither loss nor gradient; a batch where
    everything is ignored yields exactly 0.
    """
    if logits.ndim != 2:  # noqa: PLR2004
        raise DimensionError(f"Expected logits of shape [N, K], got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    ignore = np.zeros(n, dtype=bool) if ignore is None else np.asarray(ignore, dtype=bool).reshape(-1)
    if targets.shape[0] != n or ignore.shape[0] != n:
        raise DimensionError(f"Targets {targets.shape} / ignore {ignore.shape} do not match {n} logits rows")
    counted = ~ignore
    if counted.any():
        active = targets[counted]
        if active.min() < 0 or active.max() >= k:
            raise TokenIndexError(f"Target out of vocabulary [0, {k}): range [{active.min()}, {active.max()}]")
    safe_targets = np.where(counted, targets, 0)
    log_probs = log_softmax(logits, axis=-1)
    picked = log_probs[np.arange(n), safe_targets]
    weights = counted.astype(logits.dtype) / max(int(counted.sum()), 1)
    return -(picked * weights).sum()


def masked_mse(pred: Tensor, target: Operand, valid: Optional[np.ndarray] = None) -> Tensor:
    target_ = as_tensor(target, like=pred)
    if pred.shape != target_.shape:
        raise DimensionError(f"Prediction {pred.shape} and target {target_.shape} differ")
    valid = np.broadcast_to(np.asarray(True if valid is None else valid, dtype=bool), pred.shape)
    clean_target = where(valid, target_, 0.0)
    diff = where(valid, pred - clean_target, 0.0)
    return (diff * diff).sum() / float(max(int(valid.sum()), 1))


def binary_cross_entropy_with_logits(
    logits: Tensor, target: np.ndarray, valid: Optional[np.ndarray] = None
) -> Tensor:
    target = np.asarray(target, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise DimensionError(f"Logits {logits.shape} and target {target.shape} differ")
    valid = np.broadcast_to(np.asarray(True if valid is None else valid, dtype=bool), logits.shape)
    per_element = logits.softplus() - logits * np.where(valid, target, 0)
    return where(valid, per_element, 0.0).sum() / float(max(int(valid.sum()), 1))
