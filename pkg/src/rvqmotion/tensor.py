"""Dense-tensor engine with tape-based reverse-mode differentiation.

Design constraints kept deliberately tight so every backward rule stays
auditable: no general broadcasting (only scalar operands, explicit-axis bias,
and constant masks), ops record onto an explicitly scoped Tape, and every
forward result is checked for NaN/Inf.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .kernels import conv1d_backward_w, conv1d_backward_x, conv1d_forward

float32 = np.float32
float64 = np.float64
DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class Tensor:
    """Contiguous real-valued array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # Operators cover only the unambiguous elementwise cases.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed ops.

    Record order is execution order, which is a topological order of the
    computation DAG by construction (an op can only consume tensors that
    already exist). backward() visits each record exactly once in reverse,
    accumulating gradients at fan-out nodes.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and propagate through records in reverse."""
        if loss.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for inputs, output, backward_fn in reversed(self._records):
            g_out = grads.get(id(output))
            if g_out is None:
                continue
            g_inputs = backward_fn(g_out)
            for tensor, g in zip(inputs, g_inputs):
                if g is None or not tensor.requires_grad:
                    continue
                acc = grads.get(id(tensor))
                if acc is None:
                    grads[id(tensor)] = g.copy() if g.base is not None or g is g_out else g
                else:
                    acc += g
        # Publish accumulators onto the tensors that asked for them.
        seen: set[int] = set()
        for inputs, output, _ in self._records:
            for tensor in (*inputs, output):
                if id(tensor) in seen:
                    continue
                seen.add(id(tensor))
                if tensor.requires_grad:
                    tensor.grad = grads.get(id(tensor))
        if loss.requires_grad:
            loss.grad = grads[id(loss)]


def _record(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._records.append((inputs, out, backward_fn))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, or either operand a scalar tensor."""
    b = _as_tensor(b, a)
    _check_same_dtype(a, b, "add")
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif b.size == 1:
        def bwd(g):
            return g, g.sum().reshape(b.shape)
    elif a.size == 1:
        def bwd(g):
            return g.sum().reshape(a.shape), g
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _record("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b, "sub")
    if a.shape == b.shape:
        def bwd(g):
            return g, -g
    elif b.size == 1:
        def bwd(g):
            return g, -g.sum().reshape(b.shape)
    elif a.size == 1:
        def bwd(g):
            return g.sum().reshape(a.shape), -g
    else:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _record("sub", (a, b), a.data - b.data, bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product for equal shapes, or either operand scalar."""
    b = _as_tensor(b, a)
    _check_same_dtype(a, b, "mul")
    if a.shape == b.shape:
        def bwd(g):
            return g * b.data, g * a.data
    elif b.size == 1:
        def bwd(g):
            return g * b.data, (g * a.data).sum().reshape(b.shape)
    elif a.size == 1:
        def bwd(g):
            return (g * b.data).sum().reshape(a.shape), g * a.data
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _record("mul", (a, b), a.data * b.data, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient to the constant)."""
    c = float(c)
    return _record("scale", (a,), a.data * a.dtype.type(c), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant array broadcastable to a's shape (e.g. a causal mask)."""
    c_arr = np.asarray(c, dtype=a.dtype)
    out = a.data + c_arr
    if out.shape != a.shape:
        raise ShapeError("add_const: constant must broadcast to input shape")
    return _record("add_const", (a,), out, lambda g: (g,))


def add_bias(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a 1-d per-channel bias along the given axis."""
    _check_same_dtype(x, b, "add_bias")
    if b.data.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit axis {axis} "
                         f"of {x.shape}")
    expand = [1] * x.data.ndim
    expand[axis] = b.shape[0]
    reduce_axes = tuple(i for i in range(x.data.ndim)
                        if i != axis % x.data.ndim)

    def bwd(g):
        return g, g.sum(axis=reduce_axes)

    return _record("add_bias", (x, b), x.data + b.data.reshape(expand), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.ascontiguousarray(np.transpose(x.data, axes)),
                   lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _record("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: empty input list")
    for t in xs[1:]:
        _check_same_dtype(xs[0], t, "concat")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", xs, np.concatenate([t.data for t in xs], axis=axis), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    key = [slice(None)] * x.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record("slice_axis", (x,), np.ascontiguousarray(x.data[key]), bwd)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row gather from a 2-d table; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup: table must be 2-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding_lookup: index out of range")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding_lookup", (table,), table.data[idx], bwd)


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same values, no history."""
    return x.detach()


def straight_through(x: Tensor, values) -> Tensor:
    """Forward the given values bit-exactly; backward is the identity on x."""
    vals = np.asarray(values, dtype=x.dtype)
    if vals.shape != x.shape:
        raise ShapeError(f"straight_through: value shape {vals.shape} != "
                         f"input shape {x.shape}")
    return _record("straight_through", (x,), vals.copy(), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions & nonlinearities
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return _record("sum_all", (x,), x.data.sum(dtype=x.dtype).reshape(()),
                   lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _record("mean", (x,), x.data.mean(dtype=x.dtype).reshape(()),
                   lambda g: (np.full_like(x.data, g / n),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, x.dtype.type(0)),
                   lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU (GPT-2 convention)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dt = (1.0 - t ** 2) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _record("gelu", (x,), out.astype(x.dtype), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _record("sigmoid", (x,), s.astype(x.dtype),
                   lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y.astype(x.dtype), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)

    return _record("layer_norm", (x, gain, bias), out.astype(x.dtype), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate)
    factor = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * factor
    return _record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), a.data @ b.data, bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading batch axis: (B,m,k) @ (B,k,n)."""
    _check_same_dtype(a, b, "bmm")
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError(f"bmm: incompatible shapes {a.shape} x {b.shape}")

    def bwd(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _record("bmm", (a, b), a.data @ b.data, bwd)


# ---------------------------------------------------------------------------
# sequence ops
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation along time.  x: (B,C_in,T), w: (C_out,C_in,k)."""
    _check_same_dtype(x, w, "conv1d")
    if stride < 1 or dilation < 1:
        raise ShapeError("conv1d: stride and dilation must be >= 1")
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} x {w.shape}")
    t = x.shape[2]
    k = w.shape[2]
    t_out = (t + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: output length {t_out} < 1 "
                         f"(T={t}, k={k}, stride={stride}, dilation={dilation}, "
                         f"padding={padding})")
    y = conv1d_forward(x.data, w.data, stride, dilation, padding)

    def bwd(g):
        gx = conv1d_backward_x(g, w.data, stride, dilation, padding, t)
        gw = conv1d_backward_w(g, x.data, stride, dilation, padding, k)
        return gx, gw

    out = _record("conv1d", (x, w), y, bwd)
    if bias is not None:
        out = add_bias(out, bias, axis=1)
    return out


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat each time step `factor` times; gradient sums over the repeats."""
    if factor < 1:
        raise ShapeError("nearest_upsample: factor must be >= 1")
    if x.data.ndim != 3:
        raise ShapeError("nearest_upsample: expected (B,C,T)")
    if factor == 1:
        return _record("nearest_upsample", (x,), x.data.copy(), lambda g: (g,))

    def bwd(g):
        b, c, tf = g.shape
        return (g.reshape(b, c, tf // factor, factor).sum(axis=3),)

    return _record("nearest_upsample", (x,),
                   np.repeat(x.data, factor, axis=2), bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smooth_l1(pred: Tensor, target: Tensor, threshold: float = 1.0) -> Tensor:
    """Mean smooth-L1: quadratic inside |d| < threshold, linear outside."""
    target = _as_tensor(target, pred)
    _check_same_dtype(pred, target, "smooth_l1")
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: shape mismatch {pred.shape} vs "
                         f"{target.shape}")
    d = pred.data - target.data
    absd = np.abs(d)
    quad = absd < threshold
    elem = np.where(quad, 0.5 * d * d / threshold, absd - 0.5 * threshold)
    n = pred.size

    def bwd(g):
        dd = np.where(quad, d / threshold, np.sign(d)) * (g / n)
        return dd.astype(pred.dtype), (-dd).astype(pred.dtype)

    return _record("smooth_l1", (pred, target),
                   elem.mean(dtype=pred.dtype).reshape(()), bwd)


def cross_entropy_from_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis of (N,K) logits."""
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy_from_logits: logits must be (N,K)")
    n, k = logits.shape
    if k == 0:
        raise ShapeError("cross_entropy_from_logits: empty class axis")
    if idx.shape != (n,):
        raise ShapeError("cross_entropy_from_logits: targets must be (N,)")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError("cross_entropy_from_logits: target out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), idx]
    denom = n if reduction == "mean" else 1
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), idx] -= 1.0
        return ((g / denom) * p.astype(logits.dtype),)

    return _record("cross_entropy_from_logits", (logits,),
                   (nll.sum() / denom).astype(logits.dtype).reshape(()), bwd)


def binary_cross_entropy_from_logits(logits: Tensor, targets,
                                     reduction: str = "mean") -> Tensor:
    """Numerically stable BCE on raw logits; targets in [0,1]."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError("binary_cross_entropy_from_logits: shape mismatch")
    z = logits.data
    elem = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    denom = logits.size if reduction == "mean" else 1
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return ((g / denom) * (s - y).astype(logits.dtype),)

    return _record("binary_cross_entropy_from_logits", (logits,),
                   (elem.sum() / denom).astype(logits.dtype).reshape(()), bwd)
