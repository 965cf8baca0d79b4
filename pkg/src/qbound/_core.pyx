# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: direct convolution and implicit conv row-sum scan.

Mirrors qbound._core_py; selected at import time by qbound.kernels.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t groups):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], cg = w.shape[1], p = w.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - p) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - p) // stride + 1
    cdef Py_ssize_t og = o // groups
    out_arr = np.zeros((b, o, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oc, g, c0, oy, ox, ky, kx, ic, iy, ix
    cdef double acc
    for n in range(b):
        for oc in range(o):
            g = oc // og
            c0 = g * cg
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ky in range(p):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(p):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wd:
                                continue
                            for ic in range(cg):
                                acc += w[oc, ic, ky, kx] * x[n, c0 + ic, iy, ix]
                    out[n, oc, oy, ox] = acc
    return out_arr


def conv_rowsum_max(double[:, :, :, ::1] w, Py_ssize_t h, Py_ssize_t wd,
                    Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t groups):
    cdef Py_ssize_t o = w.shape[0], cg = w.shape[1], p = w.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - p) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - p) // stride + 1
    if ho <= 0 or wo <= 0:
        return 0.0
    # per-tap weight mass, summed over the group's input channels
    a_arr = np.abs(np.asarray(w)).sum(axis=1)
    cdef double[:, :, ::1] a = np.ascontiguousarray(a_arr)
    cdef double best = 0.0, acc
    cdef Py_ssize_t oc, oy, ox, ky, kx, iy, ix
    for oc in range(o):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ky in range(p):
                    iy = oy * stride - pad + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(p):
                        ix = ox * stride - pad + kx
                        if ix < 0 or ix >= wd:
                            continue
                        acc += a[oc, ky, kx]
                if acc > best:
                    best = acc
    return best
