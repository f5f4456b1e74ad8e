"""Residual vector quantization with a single codebook shared across depths.

Quantization picks codes greedily: at every depth the squared-L2-nearest
entry to the current residual is chosen (ties to the lowest index), then
subtracted.  The codebook itself is never gradient-trained; it follows an
exponential moving average of the vectors assigned to each entry, with a
reset sweep that re-seeds entries that fall out of use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .kernels import nearest_codes
from .serialization import read_rvqc_bytes, write_rvqc_bytes
from .tensor import Tensor


@dataclass
class Codebook:
    entries: np.ndarray              # (K, d)
    ema_cluster_size: np.ndarray     # (K,)
    ema_cluster_sum: np.ndarray      # (K, d)
    usage_count: np.ndarray          # (K,) selections since the last reset sweep
    decay: float = 0.99
    epsilon: float = 1e-5

    def __post_init__(self):
        k, d = self.entries.shape
        if k < 2 or d < 1:
            raise ValueError(f"codebook needs K >= 2 and d >= 1, got {k}x{d}")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def width(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def initialise(cls, k: int, d: int, rng: np.random.Generator,
                   decay: float = 0.99, epsilon: float = 1e-5,
                   scale: float = 1.0, dtype=np.float32) -> "Codebook":
        entries = rng.normal(0.0, scale, size=(k, d)).astype(dtype)
        return cls(entries=entries,
                   ema_cluster_size=np.ones(k, dtype=dtype),
                   ema_cluster_sum=entries.copy(),
                   usage_count=np.zeros(k, dtype=np.int64),
                   decay=decay, epsilon=epsilon)

    def to_bytes(self) -> bytes:
        return write_rvqc_bytes(self.entries, self.ema_cluster_size,
                                self.ema_cluster_sum, self.decay, self.epsilon)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Codebook":
        entries, size, total, decay, epsilon = read_rvqc_bytes(blob)
        return cls(entries=entries, ema_cluster_size=size,
                   ema_cluster_sum=total,
                   usage_count=np.zeros(entries.shape[0], dtype=np.int64),
                   decay=decay, epsilon=epsilon)


@dataclass
class CodeMatrix:
    indices: np.ndarray              # (n, R) integer codes

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[0] < 1 \
                or self.indices.shape[1] < 1:
            raise ValueError(f"code matrix must be (n>=1, R>=1), "
                             f"got {self.indices.shape}")
        if self.indices.min() < 0:
            raise ValueError("negative code index")

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def depth(self) -> int:
        return self.indices.shape[1]


@dataclass
class QuantizationResult:
    codes: CodeMatrix
    quantized: np.ndarray            # (n, d), equals partial_sums[:, -1]
    partial_sums: np.ndarray         # (n, R, d) cumulative code sums
    residual_norms: np.ndarray       # (n, R) L2 norm of Z - partial sum

    def depth_targets(self, latents: np.ndarray) -> np.ndarray:
        """Residual each depth's code was chosen to approximate: (n, R, d).

        Depth 1 targets the raw latent; depth w targets the residual left
        after the first w-1 partial sums.
        """
        return np.concatenate(
            [latents[:, None, :],
             latents[:, None, :] - self.partial_sums[:, :-1, :]], axis=1)


def quantize_residual(latents: np.ndarray, codebook: Codebook,
                      depth: int) -> QuantizationResult:
    """Greedy residual quantization of (n, d) latents to `depth` codes each."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    z = np.asarray(latents)
    if z.ndim != 2 or z.shape[1] != codebook.width:
        raise ValueError(f"latents {z.shape} do not match codebook width "
                         f"{codebook.width}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite latent")
    n = z.shape[0]
    codes = np.empty((n, depth), dtype=np.int64)
    partial = np.empty((n, depth, codebook.width), dtype=z.dtype)
    norms = np.empty((n, depth), dtype=z.dtype)
    entries = codebook.entries.astype(z.dtype, copy=False)
    residual = z.copy()
    cumulative = np.zeros_like(z)
    for w in range(depth):
        idx = nearest_codes(residual, entries)
        chosen = entries[idx]
        codes[:, w] = idx
        cumulative = cumulative + chosen
        residual = residual - chosen
        partial[:, w, :] = cumulative
        norms[:, w] = np.linalg.norm(residual, axis=1)
    return QuantizationResult(codes=CodeMatrix(codes),
                              quantized=partial[:, -1, :].copy(),
                              partial_sums=partial, residual_norms=norms)


def dequantize(codes: CodeMatrix, codebook: Codebook,
               dtype=None) -> np.ndarray:
    """Sum the looked-up entries along the residual axis: (n, d).

    Accumulates depth by depth in the same order as quantize_residual so the
    round trip reproduces the quantizer's own output bit-exactly.
    """
    idx = codes.indices
    if idx.max() >= codebook.size:
        raise IndexError(f"code index {idx.max()} out of range for "
                         f"codebook of size {codebook.size}")
    entries = codebook.entries if dtype is None \
        else codebook.entries.astype(dtype, copy=False)
    out = np.zeros((codes.n, codebook.width), dtype=entries.dtype)
    for w in range(codes.depth):
        out = out + entries[idx[:, w]]
    return out


def commitment_loss(latents: Tensor, partial_sums: np.ndarray,
                    mode: str = "cumulative") -> Tensor:
    """Sum over depths of the mean squared latent-to-approximation error.

    Gradients flow only into `latents`; the approximations enter as
    stop-gradient constants (the codebook is EMA-trained, not
    gradient-trained).  `cumulative` compares against the running partial
    sums; `per-code` compares against each depth's single code vector
    (kept selectable for ablation).
    """
    if mode not in ("cumulative", "per-code"):
        raise ValueError(f"unknown commitment mode {mode!r}")
    n, depth, _ = partial_sums.shape
    if latents.shape != (n, partial_sums.shape[2]):
        raise ValueError("latent/partial-sum shape mismatch")
    total = None
    for w in range(depth):
        if mode == "cumulative":
            target = partial_sums[:, w, :]
        else:
            target = partial_sums[:, w, :] - (partial_sums[:, w - 1, :]
                                              if w else 0.0)
        diff = T.sub(latents, Tensor(target.astype(latents.dtype.type)))
        term = T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / n)
        total = term if total is None else T.add(total, term)
    return total


def straight_through(latents: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward the quantized values; backward passes gradients to latents."""
    return T.straight_through(latents, quantized)


def ema_update(codebook: Codebook, depth_targets: np.ndarray,
               assignments: np.ndarray) -> None:
    """Fold one batch of assignments into the EMA statistics, in place.

    The codebook is shared across depths, so targets and assignments from
    every depth pool into a single update.  depth_targets: (n, R, d),
    assignments: (n, R).
    """
    k, d = codebook.entries.shape
    flat_idx = assignments.reshape(-1)
    flat_vec = depth_targets.reshape(-1, d)
    counts = np.bincount(flat_idx, minlength=k).astype(codebook.entries.dtype)
    sums = np.zeros((k, d), dtype=np.float64)
    np.add.at(sums, flat_idx, flat_vec.astype(np.float64))
    sums = sums.astype(codebook.entries.dtype)
    decay = codebook.decay
    codebook.ema_cluster_size = decay * codebook.ema_cluster_size \
        + (1.0 - decay) * counts
    codebook.ema_cluster_sum = decay * codebook.ema_cluster_sum \
        + (1.0 - decay) * sums
    total = codebook.ema_cluster_size.sum()
    smoothed = (codebook.ema_cluster_size + codebook.epsilon) \
        / (total + k * codebook.epsilon) * total
    codebook.entries = codebook.ema_cluster_sum / smoothed[:, None]
    codebook.usage_count += np.bincount(flat_idx, minlength=k)


def code_reset(codebook: Codebook, batch_latents: np.ndarray, min_usage: int,
               rng: np.random.Generator) -> list[int]:
    """Re-seed under-used entries from the batch; clears all usage counters.

    Every entry selected fewer than `min_usage` times since the last sweep
    is replaced by a uniformly drawn latent (the depth-1 residual) and its
    EMA statistics are restarted around the new value.  Returns the list of
    reset indices.
    """
    if batch_latents.shape[0] < 1:
        raise ValueError("code_reset needs a nonempty batch")
    stale = np.flatnonzero(codebook.usage_count < min_usage)
    for idx in stale:
        draw = int(rng.integers(batch_latents.shape[0]))
        new_entry = batch_latents[draw].astype(codebook.entries.dtype)
        codebook.entries[idx] = new_entry
        codebook.ema_cluster_size[idx] = 1.0
        codebook.ema_cluster_sum[idx] = new_entry
    codebook.usage_count[:] = 0
    return [int(i) for i in stale]
