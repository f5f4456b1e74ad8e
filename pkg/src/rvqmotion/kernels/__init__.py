"""Hot-kernel backend selection.

The compiled Cython extension is preferred when present; the numpy fallback
is always available.  Selection happens once at import and can be forced with
the environment variable RVQMOTION_KERNELS in {auto, compiled, numpy}.
"""

import os

import numpy as np

from . import np_backend

BACKEND = "numpy"
_impl = np_backend

_requested = os.environ.get("RVQMOTION_KERNELS", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise ValueError(
        f"RVQMOTION_KERNELS must be auto, compiled or numpy, got {_requested!r}")

if _requested in ("auto", "compiled"):
    try:
        from . import _ckernels
        _impl = _ckernels
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "RVQMOTION_KERNELS=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`")


def _c3(a):
    return np.ascontiguousarray(a)


def conv1d_forward(x, w, stride, dilation, padding):
    return _impl.conv1d_forward(_c3(x), _c3(w), stride, dilation, padding)


def conv1d_backward_x(gy, w, stride, dilation, padding, t_in):
    return _impl.conv1d_backward_x(_c3(gy), _c3(w), stride, dilation,
                                   padding, t_in)


def conv1d_backward_w(gy, x, stride, dilation, padding, k):
    return _impl.conv1d_backward_w(_c3(gy), _c3(x), stride, dilation,
                                   padding, k)


def nearest_codes(z, entries):
    return _impl.nearest_codes(_c3(z), _c3(entries))
