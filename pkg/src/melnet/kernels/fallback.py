"""NumPy im2col convolution path: always available, BLAS-backed matmul.

Shares its contract with the compiled direct-loop kernels in ``_convops``:
cross-correlation (no kernel flip), explicit stride and zero padding.
"""

from __future__ import annotations

import numpy as np


def out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (n, c, h, w) into columns (n, c*k*k, oh*ow)."""
    n, c, h, w = x.shape
    oh = out_extent(h, k, stride, pad)
    ow = out_extent(w, k, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(n, c * k * k, oh * ow)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    oh = out_extent(h, k, stride, pad)
    ow = out_extent(wd, k, stride, pad)
    cols = _im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(co, ci * k * k), cols)
    return out.reshape(n, co, oh, ow)


def conv2d_backward_input(
    w: np.ndarray, dy: np.ndarray, x_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    n, c, h, wd = x_shape
    co, ci, k, _ = w.shape
    oh, ow = dy.shape[2], dy.shape[3]
    dcols = np.matmul(w.reshape(co, ci * k * k).T, dy.reshape(n, co, oh * ow))
    dcols = dcols.reshape(n, ci, k, k, oh, ow)
    # Scatter-add column gradients back; one slice-add per kernel tap.
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride] += dcols[
                :, :, ki, kj
            ]
    if pad > 0:
        return dxp[:, :, pad : pad + h, pad : pad + wd].copy()
    return dxp


def conv2d_backward_weight(
    x: np.ndarray, dy: np.ndarray, w_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    co, ci, k, _ = w_shape
    n = x.shape[0]
    oh, ow = dy.shape[2], dy.shape[3]
    cols = _im2col(x, k, stride, pad)
    dw = np.einsum("nop,nqp->oq", dy.reshape(n, co, oh * ow), cols, optimize=True)
    return dw.reshape(w_shape)
