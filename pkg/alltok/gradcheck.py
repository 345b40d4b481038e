from typing import Callable, List, Sequence

import numpy as np

from alltok.base import BaseReport
from alltok.exceptions import ContractError
from alltok.tensor import Tensor


class GradCheckResult(BaseReport):
    name: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def _scalar(output: Tensor) -> float:
    if output.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {output.shape}")
    return float(output.data.reshape(-1)[0])


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Relative error per coordinate is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8). Inputs are cast to float64.
    """
    arrays: List[np.ndarray] = [np.array(value, dtype=np.float64) for value in inputs]
    tensors = [Tensor(array, requires_grad=True) for array in arrays]
    output = fn(*tensors)
    _scalar(output)
    output.backward()
    worst = 0.0
    for position, tensor in enumerate(tensors):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(arrays[position])
        flat = arrays[position].reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + eps
            plus = _scalar(fn(*[Tensor(a) for a in arrays]))
            flat[index] = original - eps
            minus = _scalar(fn(*[Tensor(a) for a in arrays]))
            flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            exact = float(analytic.reshape(-1)[index])
            scale = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / scale)
    return worst
