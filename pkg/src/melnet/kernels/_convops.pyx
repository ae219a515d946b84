# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop 2D cross-correlation kernels (forward, input grad, weight grad).

Single-threaded on purpose: training must be bit-reproducible, so no
nondeterministic reduction orders. Padding is virtual (out-of-range taps
are skipped), no padded copies are made.
"""

import numpy as np

cimport cython
from cython cimport floating


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[:, :, :, ::1] out, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wdt = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t b, oc, ic, i, j, ki, kj, ih, iw
    cdef floating acc

    for b in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0
                    for ic in range(ci):
                        for ki in range(k):
                            ih = i * stride - pad + ki
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(k):
                                iw = j * stride - pad + kj
                                if iw < 0 or iw >= wdt:
                                    continue
                                acc = acc + x[b, ic, ih, iw] * w[oc, ic, ki, kj]
                    out[b, oc, i, j] = acc


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_backward_input(floating[:, :, :, ::1] w, floating[:, :, :, ::1] dy,
                          floating[:, :, :, ::1] dx, int stride, int pad):
    cdef Py_ssize_t n = dx.shape[0], ci = dx.shape[1], h = dx.shape[2], wdt = dx.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t b, oc, ic, i, j, ki, kj, ih, iw
    cdef floating g

    for b in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    g = dy[b, oc, i, j]
                    for ic in range(ci):
                        for ki in range(k):
                            ih = i * stride - pad + ki
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(k):
                                iw = j * stride - pad + kj
                                if iw < 0 or iw >= wdt:
                                    continue
                                dx[b, ic, ih, iw] += g * w[oc, ic, ki, kj]


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_backward_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] dy,
                           floating[:, :, :, ::1] dw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wdt = x.shape[3]
    cdef Py_ssize_t co = dw.shape[0], k = dw.shape[2]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t b, oc, ic, i, j, ki, kj, ih, iw
    cdef floating g

    for b in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    g = dy[b, oc, i, j]
                    for ic in range(ci):
                        for ki in range(k):
                            ih = i * stride - pad + ki
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(k):
                                iw = j * stride - pad + kj
                                if iw < 0 or iw >= wdt:
                                    continue
                                dw[oc, ic, ki, kj] += g * x[b, ic, ih, iw]
