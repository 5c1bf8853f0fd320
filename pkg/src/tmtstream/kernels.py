"""Row-softmax kernels with a compiled path and a numpy fallback.

The compiled module is built from ``_kernels.pyx`` at install time when
Cython and a C compiler are available. Set ``TMTSTREAM_PURE_PYTHON=1`` to
force the fallback. Both paths take and return float64 arrays whose last
axis is the softmax axis.
"""

from __future__ import annotations

import os

import numpy as np


def softmax_forward_py(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward_py(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1, a.shape[-1])


try:
    if os.environ.get("TMTSTREAM_PURE_PYTHON"):
        raise ImportError("pure Python requested")
    from . import _kernels
except ImportError:
    _kernels = None

BACKEND = "compiled" if _kernels is not None else "python"


def softmax_forward_compiled(x: np.ndarray) -> np.ndarray:
    if _kernels is None:
        raise RuntimeError("compiled kernels are not built")
    if x.size == 0:
        return softmax_forward_py(x)
    return _kernels.softmax_forward(_rows(x)).reshape(x.shape)


def softmax_backward_compiled(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    if _kernels is None:
        raise RuntimeError("compiled kernels are not built")
    if p.size == 0:
        return softmax_backward_py(p, g)
    return _kernels.softmax_backward(_rows(p), _rows(g)).reshape(p.shape)


if _kernels is not None:
    softmax_forward, softmax_backward = softmax_forward_compiled, softmax_backward_compiled
else:
    softmax_forward, softmax_backward = softmax_forward_py, softmax_backward_py
