"""Convolution kernel selection.

Two interchangeable implementations of the same contract:

* ``compiled`` - Cython direct loops, no temporaries; fastest on the small
  feature maps that dominate test-scale training.
* ``numpy``    - im2col + BLAS matmul; fastest on large feature maps and the
  only path when the extension is not built.

When the extension is present the default backend dispatches per call on
problem size. ``MELNET_BACKEND=numpy|compiled`` pins one path (the
benchmark and the differential tests use this).
"""

from __future__ import annotations

import os

import numpy as np

from . import fallback
from .fallback import out_extent

try:
    from . import compiled

    HAS_COMPILED = True
except ImportError:
    compiled = None
    HAS_COMPILED = False

# Crossover measured with benchmarks/bench_conv.py: below ~2 MFLOP the loop
# kernels beat im2col's allocation + BLAS setup cost.
_DIRECT_FLOP_LIMIT = 2_000_000

_FORCED = os.environ.get("MELNET_BACKEND", "").strip().lower() or None
if _FORCED not in (None, "numpy", "compiled"):
    raise ValueError(f"MELNET_BACKEND must be 'numpy' or 'compiled', got {_FORCED!r}")
if _FORCED == "compiled" and not HAS_COMPILED:
    raise ImportError("MELNET_BACKEND=compiled but the extension is not built")


def backend_name() -> str:
    if _FORCED:
        return _FORCED
    return "compiled" if HAS_COMPILED else "numpy"


def get_impl(name: str):
    """Return one concrete implementation module ('numpy' or 'compiled')."""
    if name == "numpy":
        return fallback
    if name == "compiled":
        if not HAS_COMPILED:
            raise ValueError("compiled kernels are not available")
        return compiled
    raise ValueError(f"unknown kernel implementation {name!r}")


def _use_compiled(flops: int) -> bool:
    if _FORCED == "numpy" or not HAS_COMPILED:
        return False
    if _FORCED == "compiled":
        return True
    return flops <= _DIRECT_FLOP_LIMIT


def _conv_flops(x_shape: tuple, w_shape: tuple, stride: int, pad: int) -> int:
    n, c, h, wd = x_shape
    co, ci, k, _ = w_shape
    oh = out_extent(h, k, stride, pad)
    ow = out_extent(wd, k, stride, pad)
    return n * co * oh * ow * ci * k * k


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    if _use_compiled(_conv_flops(x.shape, w.shape, stride, pad)):
        return compiled.conv2d_forward(x, w, stride, pad)
    return fallback.conv2d_forward(x, w, stride, pad)


def conv2d_backward_input(
    w: np.ndarray, dy: np.ndarray, x_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    if _use_compiled(_conv_flops(x_shape, w.shape, stride, pad)):
        return compiled.conv2d_backward_input(w, dy, x_shape, stride, pad)
    return fallback.conv2d_backward_input(w, dy, x_shape, stride, pad)


def conv2d_backward_weight(
    x: np.ndarray, dy: np.ndarray, w_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    if _use_compiled(_conv_flops(x.shape, w_shape, stride, pad)):
        return compiled.conv2d_backward_weight(x, dy, w_shape, stride, pad)
    return fallback.conv2d_backward_weight(x, dy, w_shape, stride, pad)
