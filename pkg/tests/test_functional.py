import numpy as np
import pytest

from alltok.exceptions import DimensionError, TokenIndexError
from alltok.functional import (
    binary_cross_entropy_with_logits,
    causal_mask,
    conv2d,
    conv_transpose2d,
    embedding_lookup,
    group_norm,
    log_softmax,
    masked_cross_entropy,
    masked_mse,
    scaled_dot_product_attention,
    softmax,
)
from alltok.gradcheck import grad_check
from alltok.tensor import Tensor


def test_conv2d_matches_direct_sum(rng: np.random.Generator) -> None:
    x = rng.normal(size=(1, 2, 5, 5))
    weight = rng.normal(size=(3, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(weight), stride=2, padding=1).data
    assert out.shape == (1, 3, 3, 3)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.einsum("cij,ocij->o", padded[0, :, 2:5, 2:5], weight)
    assert out[0, :, 1, 1] == pytest.approx(expected)


def test_conv_transpose_doubles_size(rng: np.random.Generator) -> None:
    weight = Tensor(rng.normal(size=(3, 5, 4, 4)))
    out = conv_transpose2d(Tensor(rng.normal(size=(2, 3, 4, 4))), weight, stride=2, padding=1)
    assert out.shape == (2, 5, 8, 8)


def test_conv_transpose_is_adjoint_of_conv(rng: np.random.Generator) -> None:
    weight = rng.normal(size=(3, 2, 4, 4))
    x = rng.normal(size=(1, 2, 8, 8))
    y = rng.normal(size=(1, 3, 4, 4))
    forward = conv2d(Tensor(x), Tensor(weight), stride=2, padding=1).data
    backward = conv_transpose2d(Tensor(y), Tensor(weight), stride=2, padding=1).data
    assert float((forward * y).sum()) == pytest.approx(float((x * backward).sum()))


def test_conv2d_rejects_channel_mismatch() -> None:
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_softmax_rows_sum_to_one(rng: np.random.Generator) -> None:
    out = softmax(Tensor(rng.normal(size=(4, 7)) * 50)).data
    assert out.sum(axis=-1) == pytest.approx(np.ones(4))
    assert np.exp(log_softmax(Tensor(np.array([[1.0, 2.0, 3.0]]))).data).sum() == pytest.approx(1.0)


def test_softmax_rejects_bad_axis() -> None:
    with pytest.raises(DimensionError):
        softmax(Tensor(np.ones((2, 2))), axis=2)


def test_group_norm_normalizes_groups(rng: np.random.Generator) -> None:
    out = group_norm(Tensor(rng.normal(3.0, 2.0, (2, 4, 3, 3))), 2).data
    grouped = out.reshape(2, 2, -1)
    assert grouped.mean(axis=-1) == pytest.approx(np.zeros((2, 2)), abs=1e-6)
    assert grouped.std(axis=-1) == pytest.approx(np.ones((2, 2)), abs=1e-3)
    with pytest.raises(DimensionError):
        group_norm(Tensor(np.ones((1, 3, 2, 2))), 2)


def test_embedding_lookup_range() -> None:
    weight = Tensor(np.arange(6.0).reshape(3, 2))
    assert embedding_lookup(weight, np.array([2, 0])).data.tolist() == [[4.0, 5.0], [0.0, 1.0]]
    with pytest.raises(TokenIndexError):
        embedding_lookup(weight, np.array([3]))


def test_causal_mask() -> None:
    assert causal_mask(3, 3).tolist() == [[False, True, True], [False, False, True], [False, False, False]]


def test_causal_attention_ignores_future(rng: np.random.Generator) -> None:
    q, k, v = (rng.normal(size=(1, 4, 2)) for _ in range(3))
    changed = v.copy()
    changed[0, 3] += 100.0
    first = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), causal=True).data
    second = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(changed), causal=True).data
    assert np.allclose(first[0, :3], second[0, :3])
    assert not np.allclose(first[0, 3], second[0, 3])


def test_masked_cross_entropy_all_ignored_is_zero() -> None:
    logits = Tensor(np.ones((3, 4)), requires_grad=True)
    loss = masked_cross_entropy(logits, np.array([0, 1, 2]), ignore=np.ones(3, dtype=bool))
    assert loss.item() == 0.0
    loss.backward()
    assert logits.grad is not None
    assert not logits.grad.any()


def test_masked_cross_entropy_uniform_logits() -> None:
    loss = masked_cross_entropy(Tensor(np.zeros((2, 4))), np.array([1, 3]))
    assert loss.item() == pytest.approx(np.log(4))


def test_masked_cross_entropy_checks_targets() -> None:
    with pytest.raises(TokenIndexError):
        masked_cross_entropy(Tensor(np.zeros((2, 4))), np.array([1, 4]))
    masked_cross_entropy(Tensor(np.zeros((2, 4))), np.array([1, 9]), ignore=np.array([False, True]))


def test_masked_mse_counts_valid_only() -> None:
    pred = Tensor(np.array([1.0, 2.0, 3.0]))
    target = np.array([1.0, 0.0, np.nan])
    assert masked_mse(pred, target, np.array([True, True, False])).item() == pytest.approx(2.0)


def test_bce_with_logits_extremes() -> None:
    loss = binary_cross_entropy_with_logits(Tensor(np.array([100.0, -100.0])), np.array([1.0, 0.0]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    assert binary_cross_entropy_with_logits(Tensor(np.zeros(2)), np.array([1.0, 0.0])).item() == pytest.approx(
        np.log(2)
    )


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradients(rng: np.random.Generator, stride: int, padding: int) -> None:
    inputs = [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)]
    assert grad_check(lambda x, w, b: (conv2d(x, w, b, stride, padding) ** 2).sum(), inputs) < 1e-4
    transposed = [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3)]
    assert grad_check(lambda x, w, b: (conv_transpose2d(x, w, b, 2, 1) ** 2).sum(), transposed) < 1e-4


def test_attention_gradient(rng: np.random.Generator) -> None:
    inputs = [rng.normal(size=(2, 3, 4)) for _ in range(3)]
    assert grad_check(lambda q, k, v: (scaled_dot_product_attention(q, k, v, causal=True) ** 2).sum(), inputs) < 1e-4
