"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class NonFiniteGradError(FloatingPointError):
    """A gradient contained NaN/Inf; the step was aborted."""


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
               v: np.ndarray, step: int, lr: float, beta1: float = 0.9,
               beta2: float = 0.95, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One in-place update of a single parameter array.

    `step` is 1-based and drives bias correction.  Raises
    NonFiniteGradError before touching any state if the gradient is bad.
    """
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("betas must lie in [0, 1)")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradError(
            f"non-finite gradient (step {step}, shape {param.shape})")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)


def cosine_lr(step: int, warm_steps: int, total_steps: int,
              base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay toward 0 at total_steps."""
    if step < warm_steps:
        return base_lr * (step + 1) / warm_steps
    if step >= total_steps:
        return 0.0
    span = max(total_steps - warm_steps, 1)
    progress = (step - warm_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Optimizer over a named parameter dict {name: Tensor}.

    Mutates parameter arrays in place; call only between tape lifetimes.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
                 weight_decay: float = 0.0,
                 no_decay: tuple[str, ...] = ("bias", "ln_", "_gain", "pet", "per")):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def _decay_for(self, name: str) -> float:
        if any(tag in name for tag in self.no_decay):
            return 0.0
        return self.weight_decay

    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            try:
                adamw_step(tensor.data, tensor.grad, self._m[name],
                           self._v[name], self.step_count, lr,
                           self.beta1, self.beta2, self.eps,
                           self._decay_for(name))
            except NonFiniteGradError as exc:
                raise NonFiniteGradError(f"parameter {name!r}: {exc}") from exc

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None
