import logging
import math
from typing import Iterable, List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from alltok.base import BaseModelConfig
from alltok.exceptions import MissingGradientError
from alltok.tensor import Tensor
from alltok.types import Schedule

logger = logging.getLogger(__name__)


class Parameter(BaseModelConfig):
    tensor: Tensor
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None
    step: int = 0

    @classmethod
    def create(cls, array: np.ndarray) -> "Parameter":
        return cls(tensor=Tensor(array, requires_grad=True))

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def reset_state(self) -> None:
        self.first_moment = None
        self.second_moment = None
        self.step = 0


class TrainConfig(BaseModel):
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=8, ge=1)
    schedule: Schedule = "exponential"
    decay: float = 0.98
    milestones: List[int] = Field(default_factory=lambda: [18])
    gamma: float = 0.1
    seed: int = 0

    @field_validator("lr")
    @classmethod
    def _lr_validator(cls, lr: float) -> float:
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        return lr

    @model_validator(mode="after")
    def _betas_validator(self) -> "TrainConfig":
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0 < beta < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {beta}")
        return self

    @classmethod
    def depth_tokenizer(cls, **overrides: object) -> "TrainConfig":
        return cls.model_validate({"schedule": "exponential", "decay": 0.98, "batch_size": 8} | overrides)

    @classmethod
    def mask_tokenizer(cls, **overrides: object) -> "TrainConfig":
        return cls.model_validate({"schedule": "cosine", "batch_size": 64} | overrides)

    def learning_rate(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        if self.schedule == "exponential":
            return self.lr * self.decay**epoch
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1 + math.cos(math.pi * epoch / self.epochs))
        if self.schedule == "linear":
            return self.lr * (1 - epoch / self.epochs)
        passed = sum(1 for milestone in self.milestones if epoch >= milestone)
        return self.lr * self.gamma**passed


def adam_step(params: Iterable[Parameter], lr_t: float, config: TrainConfig) -> None:
    """Decoupled-weight-decay Adam update with bias correction."""
    for param in params:
        grad = param.grad
        if grad is None:
            raise MissingGradientError(f"Parameter of shape {param.tensor.shape} has no gradient")
        data = param.tensor.data
        grad = grad.astype(data.dtype, copy=False)
        if param.first_moment is None or param.second_moment is None:
            param.first_moment = np.zeros_like(data)
            param.second_moment = np.zeros_like(data)
        param.step += 1
        param.first_moment = config.beta1 * param.first_moment + (1 - config.beta1) * grad
        param.second_moment = config.beta2 * param.second_moment + (1 - config.beta2) * grad * grad
        m_hat = param.first_moment / (1 - config.beta1**param.step)
        v_hat = param.second_moment / (1 - config.beta2**param.step)
        update = m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * data
        param.tensor.data = (data - lr_t * update).astype(data.dtype, copy=False)


def zero_grad(params: Iterable[Parameter]) -> None:
    for param in params:
        param.zero_grad()


def gradients_finite(params: Iterable[Parameter]) -> bool:
    return all(param.grad is None or bool(np.isfinite(param.grad).all()) for param in params)
