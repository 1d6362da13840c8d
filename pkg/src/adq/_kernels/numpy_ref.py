"""Pure-numpy reference implementations of the hot kernels.

These mirror ``adq._kernels._core`` operation for operation. The compiled
module is preferred at import time; this module is the fallback and the
ground truth the extension is tested against (the two must agree
bit-for-bit, which pins down accumulation order in the scatter kernels).
"""

import numpy as np


def im2col(x_pad, k, stride):
    """Unfold padded images [N,C,Hp,Wp] into patch rows [N*OH*OW, C*k*k]."""
    n, c, hp, wp = x_pad.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x_pad, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, OH, OW, k, k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, hp, wp, k, stride):
    """Scatter-add patch rows back onto the padded image plane.

    Exact adjoint of :func:`im2col`. Contributions to one pixel are summed
    in ascending (ki, kj) kernel-offset order; the compiled kernel uses the
    same order so both backends round identically.
    """
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += cols6[:, :, ki, kj]
    return out


def assign_nearest(values, levels):
    """Index of the nearest level for every value, ties to the smaller level.

    ``levels`` must be sorted ascending. Uses midpoint thresholds, so each
    lookup is O(log N); a value exactly on a midpoint goes left.
    """
    mids = (levels[:-1] + levels[1:]) / 2
    return np.searchsorted(mids, values, side="left").astype(np.int64)


def act_forward_levels(x, thresholds):
    """Integer output level per element: the count of thresholds <= x."""
    return np.searchsorted(thresholds, x, side="right").astype(x.dtype)


def act_backward_elems(grad_out, x, thresholds, out_scale):
    """Surrogate gradients for the threshold activation quantizer.

    Returns (grad_x, grad_t, f) where f is the piecewise-linear surrogate
    value per element, grad_x the input gradient and grad_t (float64) the
    per-threshold gradient. grad wrt out_scale is left to the caller as
    sum(grad_out * f). Threshold gradients are accumulated lower-edge pass
    first, then upper-edge pass, in element order within each pass; the
    compiled kernel replicates that order.
    """
    m = thresholds.shape[0]
    a = x.dtype.type(out_scale)
    j = np.searchsorted(thresholds, x, side="right")
    interior = (j >= 1) & (j <= m - 1)
    jc = np.clip(j, 1, m - 1)
    t_lo = thresholds[jc - 1]
    t_hi = thresholds[jc]
    width = t_hi - t_lo
    ag = a * grad_out

    f = np.where(interior, (jc - 1).astype(x.dtype) + (x - t_lo) / width, 0)
    f = np.where(j >= m, x.dtype.type(m), f).astype(x.dtype, copy=False)
    grad_x = np.where(interior, ag / width, 0).astype(x.dtype, copy=False)

    grad_t = np.zeros(m, dtype=np.float64)
    idx = np.nonzero(interior)[0]
    if idx.size:
        g_lo = ag[idx] * (x[idx] - t_hi[idx]) / (width[idx] * width[idx])
        g_hi = -(ag[idx] * (x[idx] - t_lo[idx]) / (width[idx] * width[idx]))
        grad_t += np.bincount(jc[idx] - 1, weights=g_lo, minlength=m)
        grad_t += np.bincount(jc[idx], weights=g_hi, minlength=m)
    return grad_x, grad_t, f
