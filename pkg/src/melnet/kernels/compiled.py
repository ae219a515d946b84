"""Wrapper over the Cython direct-loop kernels with allocate-and-return calls.

For large problems the BLAS-backed im2col path wins, so the dispatcher in
``melnet.kernels`` only routes small convolutions here; this module itself
always uses the compiled loops.
"""

from __future__ import annotations

import numpy as np

from . import _convops
from .fallback import out_extent


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    out = np.empty(
        (n, co, out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad)), dtype=x.dtype
    )
    _convops.conv2d_forward(_c(x), _c(w), out, stride, pad)
    return out


def conv2d_backward_input(
    w: np.ndarray, dy: np.ndarray, x_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=dy.dtype)
    _convops.conv2d_backward_input(_c(w), _c(dy), dx, stride, pad)
    return dx


def conv2d_backward_weight(
    x: np.ndarray, dy: np.ndarray, w_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    dw = np.zeros(w_shape, dtype=dy.dtype)
    _convops.conv2d_backward_weight(_c(x), _c(dy), dw, stride, pad)
    return dw
