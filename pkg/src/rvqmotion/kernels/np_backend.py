"""Pure-numpy implementations of the hot kernels.

Fallback for environments where the compiled extension is unavailable; also
the reference the compiled kernels are tested against.
"""

import numpy as np


def _gather_index(t_out: int, k: int, stride: int, dilation: int) -> np.ndarray:
    return (np.arange(t_out)[:, None] * stride
            + np.arange(k)[None, :] * dilation)


def conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int, dilation: int,
                   padding: int) -> np.ndarray:
    """Cross-correlation.  x: (B,Ci,T), w: (Co,Ci,k) -> (B,Co,T')."""
    b, ci, t = x.shape
    co, _, k = w.shape
    t_out = (t + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    idx = _gather_index(t_out, k, stride, dilation)
    patches = x[:, :, idx]                      # (B, Ci, T', k)
    return np.einsum("bcti,oci->bot", patches, w, optimize=True)


def conv1d_backward_x(gy: np.ndarray, w: np.ndarray, stride: int,
                      dilation: int, padding: int, t_in: int) -> np.ndarray:
    """Gradient w.r.t. the input.  gy: (B,Co,T') -> (B,Ci,T)."""
    b, co, t_out = gy.shape
    _, ci, k = w.shape
    gpatches = np.einsum("bot,oci->bcti", gy, w, optimize=True)
    gxp = np.zeros((b, ci, t_in + 2 * padding), dtype=gy.dtype)
    # Per-tap strided scatter: positions j*dilation + stride*[0..T') are
    # distinct within one tap, so plain slice-add is alias-free.
    for j in range(k):
        stop = j * dilation + stride * t_out
        gxp[:, :, j * dilation:stop:stride] += gpatches[:, :, :, j]
    if padding:
        return np.ascontiguousarray(gxp[:, :, padding:padding + t_in])
    return gxp


def conv1d_backward_w(gy: np.ndarray, x: np.ndarray, stride: int,
                      dilation: int, padding: int, k: int) -> np.ndarray:
    """Gradient w.r.t. the kernel weights.  -> (Co,Ci,k)."""
    t_out = gy.shape[2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    idx = _gather_index(t_out, k, stride, dilation)
    patches = x[:, :, idx]
    return np.einsum("bot,bcti->oci", gy, patches, optimize=True)


def nearest_codes(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the squared-L2-nearest codebook row per vector.

    Ties break to the lowest index (np.argmin keeps the first minimum).
    z: (n,d), entries: (K,d) -> int64 (n,).
    """
    diff = z[:, None, :] - entries[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    return np.argmin(d2, axis=1).astype(np.int64)
