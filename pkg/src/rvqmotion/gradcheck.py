"""Central-difference verification of reverse-mode gradients.

Finite differences are always evaluated in float64 (they are hopeless at
float32 step sizes); the autodiff gradient is taken at whatever precision
the supplied parameter arrays carry.  Float32 model values are exactly
representable in float64, so both sides see identical parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tape, Tensor

# Relative error uses max(|a|,|b|) as denominator; below this magnitude the
# comparison degrades gracefully to an absolute one.
_REL_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self):
        lines = [f"grad_check tol={self.tol:g} "
                 f"{'PASS' if self.passed else 'FAIL'} "
                 f"(max rel err {self.max_rel_err:.3e})"]
        for name, err in self.per_param.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    if denom < _REL_FLOOR:
        return abs(a - b)
    return abs(a - b) / denom


def grad_check(build: Callable[[list[Tensor]], Tensor],
               params: Sequence[tuple[str, np.ndarray]],
               eps: float = 1e-5,
               tol: float = 1e-4,
               max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function against central
    differences.

    build: maps a list of parameter Tensors (same order as `params`) to a
        scalar Tensor.  It must be re-evaluable: every call re-runs the
        computation on the tensors it is given.
    params: (name, initial value) pairs; array dtype selects the autodiff
        precision.
    max_entries: optional per-parameter cap on checked entries (chosen by a
        seeded draw) to bound runtime on large parameters.
    """
    tensors = [Tensor(v.copy(), requires_grad=True) for _, v in params]
    with Tape() as tape:
        loss = build(tensors)
    if loss.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued computation")
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def eval64(arrays: list[np.ndarray]) -> float:
        out = build([Tensor(a) for a in arrays])
        return float(out.data.reshape(()))

    base64 = [v.astype(np.float64).copy() for _, v in params]
    rng = np.random.Generator(np.random.Philox(key=seed))
    report = GradCheckReport(tol=tol)
    for p_idx, (name, value) in enumerate(params):
        flat_ids = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_ids = np.sort(rng.choice(value.size, size=max_entries,
                                          replace=False))
        worst = 0.0
        a_grad = analytic[p_idx].reshape(-1)
        for j in flat_ids:
            arrays = [b.copy() for b in base64]
            flat = arrays[p_idx].reshape(-1)
            h = eps * (1.0 + abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            f_plus = eval64(arrays)
            flat[j] = orig - h
            f_minus = eval64(arrays)
            fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(float(a_grad[j]), fd))
        report.per_param[name] = worst
    return report
