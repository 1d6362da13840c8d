# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: conv2d patch movement, codebook assignment, and the
threshold activation quantizer. Semantics (including float rounding and
accumulation order) match adq._kernels.numpy_ref exactly."""

import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused floating:
    float
    double

cnp.import_array()


def im2col(floating[:, :, :, ::1] x_pad, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x_pad.shape[0], c = x_pad.shape[1]
    cdef Py_ssize_t hp = x_pad.shape[2], wp = x_pad.shape[3]
    cdef Py_ssize_t oh = (hp - k) // stride + 1
    cdef Py_ssize_t ow = (wp - k) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n * oh * ow, c * k * k), dtype=dtype)
    cdef floating[:, ::1] cols = out_arr
    cdef Py_ssize_t ni, ci, i, j, ki, kj, row, col
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (ni * oh + i) * ow + j
                for ci in range(c):
                    for ki in range(k):
                        col = (ci * k + ki) * k
                        for kj in range(k):
                            cols[row, col + kj] = x_pad[ni, ci, i * stride + ki, j * stride + kj]
    return out_arr


def col2im(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp,
           Py_ssize_t wp, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t oh = (hp - k) // stride + 1
    cdef Py_ssize_t ow = (wp - k) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, i, j, ki, kj, row, col
    # (ki, kj) outermost: overlapping pixels accumulate in the same order as
    # the reference implementation's per-offset passes.
    for ki in range(k):
        for kj in range(k):
            for ni in range(n):
                for ci in range(c):
                    col = (ci * k + ki) * k + kj
                    for i in range(oh):
                        for j in range(ow):
                            row = (ni * oh + i) * ow + j
                            out[ni, ci, i * stride + ki, j * stride + kj] += cols[row, col]
    return out_arr


def assign_nearest(floating[::1] values, floating[::1] levels):
    cdef Py_ssize_t nv = values.shape[0], nl = levels.shape[0]
    cdef Py_ssize_t nm = nl - 1
    out_arr = np.empty(nv, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef floating v
    cdef Py_ssize_t i, lo, hi, mid
    for i in range(nv):
        v = values[i]
        # lower bound over midpoints: first mid >= v, so exact midpoints go left
        lo = 0
        hi = nm
        while lo < hi:
            mid = (lo + hi) // 2
            if (levels[mid] + levels[mid + 1]) / 2 < v:
                lo = mid + 1
            else:
                hi = mid
        out[i] = lo
    return out_arr


def act_forward_levels(floating[::1] x, floating[::1] thresholds):
    cdef Py_ssize_t nx = x.shape[0], m = thresholds.shape[0]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty(nx, dtype=dtype)
    cdef floating[::1] out = out_arr
    cdef floating v
    cdef Py_ssize_t i, lo, hi, mid
    for i in range(nx):
        v = x[i]
        # upper bound: count of thresholds <= v
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) // 2
            if thresholds[mid] <= v:
                lo = mid + 1
            else:
                hi = mid
        out[i] = <floating> lo
    return out_arr


def act_backward_elems(floating[::1] grad_out, floating[::1] x,
                       floating[::1] thresholds, double out_scale):
    cdef Py_ssize_t nx = x.shape[0], m = thresholds.shape[0]
    cdef floating a = <floating> out_scale
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.empty(nx, dtype=dtype)
    f_arr = np.empty(nx, dtype=dtype)
    gt_lo_arr = np.zeros(m, dtype=np.float64)
    gt_hi_arr = np.zeros(m, dtype=np.float64)
    cdef floating[::1] gx = gx_arr
    cdef floating[::1] f = f_arr
    cdef double[::1] gt_lo = gt_lo_arr
    cdef double[::1] gt_hi = gt_hi_arr
    cdef floating v, t_lo, t_hi, width, ag
    cdef Py_ssize_t i, j, lo, hi, mid
    for i in range(nx):
        v = x[i]
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) // 2
            if thresholds[mid] <= v:
                lo = mid + 1
            else:
                hi = mid
        j = lo
        if j < 1:
            f[i] = 0
            gx[i] = 0
        elif j > m - 1:
            f[i] = <floating> m
            gx[i] = 0
        else:
            t_lo = thresholds[j - 1]
            t_hi = thresholds[j]
            width = t_hi - t_lo
            ag = a * grad_out[i]
            f[i] = <floating> (j - 1) + (v - t_lo) / width
            gx[i] = ag / width
            gt_lo[j - 1] += <double> (ag * (v - t_hi) / (width * width))
            gt_hi[j] += <double> (-(ag * (v - t_lo) / (width * width)))
    return gx_arr, gt_lo_arr + gt_hi_arr, f_arr
