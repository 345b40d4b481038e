import math

import numpy as np
import pytest
from pydantic import ValidationError

from alltok.exceptions import MissingGradientError
from alltok.optim import Parameter, TrainConfig, adam_step, gradients_finite, zero_grad


def test_first_adam_step_moves_by_learning_rate() -> None:
    param = Parameter.create(np.array([1.0]))
    (param.tensor * 3.0).sum().backward()
    adam_step([param], 0.1, TrainConfig(lr=0.1))
    assert param.data[0] == pytest.approx(0.9, abs=1e-6)
    assert param.step == 1


def test_weight_decay_is_decoupled() -> None:
    param = Parameter.create(np.array([2.0]))
    (param.tensor * 0.0).sum().backward()
    adam_step([param], 0.1, TrainConfig(lr=0.1, weight_decay=0.5))
    assert param.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_missing_gradient_raises() -> None:
    with pytest.raises(MissingGradientError):
        adam_step([Parameter.create(np.zeros(2))], 0.1, TrainConfig())


def test_zero_grad_and_finiteness() -> None:
    param = Parameter.create(np.ones(2))
    param.tensor.grad = np.array([np.inf, 0.0])
    assert not gradients_finite([param])
    zero_grad([param])
    assert param.grad is None
    assert gradients_finite([param])


def test_learning_rate_schedules() -> None:
    exponential = TrainConfig(lr=1.0, schedule="exponential", decay=0.5)
    assert exponential.learning_rate(3) == pytest.approx(0.125)
    cosine = TrainConfig(lr=1.0, schedule="cosine", epochs=4)
    assert cosine.learning_rate(0) == pytest.approx(1.0)
    assert cosine.learning_rate(2) == pytest.approx(0.5)
    linear = TrainConfig(lr=1.0, schedule="linear", epochs=4)
    assert linear.learning_rate(1) == pytest.approx(0.75)
    step = TrainConfig(lr=1.0, schedule="step", milestones=[2, 4], gamma=0.1)
    assert [step.learning_rate(epoch) for epoch in (1, 2, 4)] == pytest.approx([1.0, 0.1, 0.01])
    assert math.isclose(TrainConfig.mask_tokenizer().learning_rate(0), 3e-4)


def test_train_config_validation() -> None:
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(beta1=1.0)
    assert TrainConfig.mask_tokenizer().batch_size == 64
    assert TrainConfig.depth_tokenizer(epochs=3).epochs == 3
