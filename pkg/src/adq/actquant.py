"""Learnable-threshold activation quantization.

Forward snaps each input to an integer level by counting thresholds at or
below it, then scales by a learnable out_scale; the output is uniform even
though the thresholds are not. Backward follows a continuous piecewise-linear
surrogate that ramps from level k-1 to k across each threshold interval, so
inputs and thresholds both receive gradients. Saturation zones (below the
first threshold, at or above the last) pass no gradient.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .tensor import Tensor, ValidationError

MIN_GAP_FRACTION = 1e-4
OUT_SCALE_FLOOR = 1e-8


@dataclass
class ActQuantizer:
    """2^n - 1 ascending thresholds plus an output scale, both learnable.

    grad_elems records how many elements the last act_forward saw; the
    training step uses it to damp the parameter gradients (see grad_scale).
    """
    bit_width: int
    thresholds: Tensor
    out_scale: Tensor
    grad_elems: int = 0

    @classmethod
    def create(cls, bit_width, thresholds, out_scale, requires_grad=True, dtype=np.float32):
        t = np.asarray(thresholds, dtype=dtype)
        q = cls(bit_width=bit_width,
                thresholds=Tensor(t, requires_grad=requires_grad),
                out_scale=Tensor(np.asarray(out_scale, dtype=dtype), requires_grad=requires_grad))
        q.validate()
        return q

    @property
    def n_levels(self):
        return 1 << self.bit_width

    def validate(self):
        t = self.thresholds.data
        if t.ndim != 1 or len(t) != self.n_levels - 1:
            raise ValidationError(f"expected {self.n_levels - 1} thresholds, got shape {t.shape}")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("thresholds must be strictly ascending")
        if float(self.out_scale.data) <= 0:
            raise ValidationError("out_scale must be positive")

    def params(self):
        return [self.thresholds, self.out_scale]

    def to_dict(self):
        return {
            "bit_width": self.bit_width,
            "thresholds": self.thresholds.data.astype(np.float32).tolist(),
            "out_scale": float(self.out_scale.data),
        }

    @classmethod
    def from_dict(cls, d, requires_grad=True):
        return cls.create(int(d["bit_width"]), d["thresholds"], d["out_scale"],
                          requires_grad=requires_grad)


def act_forward(x, q):
    """Quantize activations: out = out_scale * (count of thresholds <= x)."""
    t = np.ascontiguousarray(q.thresholds.data.astype(x.data.dtype, copy=False))
    a_val = x.data.dtype.type(q.out_scale.data)
    shape = x.data.shape
    x_flat = np.ascontiguousarray(x.data.reshape(-1))
    q.grad_elems = x_flat.size
    levels = K.act_forward_levels(x_flat, t)
    out = (a_val * levels).reshape(shape)

    def grad_fn(g):
        g_flat = np.ascontiguousarray(np.asarray(g).reshape(-1))
        grad_x, grad_t, f = K.act_backward_elems(g_flat, x_flat, t, float(a_val))
        grad_a = np.asarray((g_flat * f).sum(dtype=np.float64),
                            dtype=q.out_scale.data.dtype)
        return (grad_x.reshape(shape),
                grad_t.astype(q.thresholds.data.dtype),
                grad_a.reshape(q.out_scale.data.shape))

    return Tensor.from_op(out, (x, q.thresholds, q.out_scale), grad_fn, "act_quant")


def grad_scale(q):
    """Step-size damping for the quantizer parameters (LSQ-style).

    Threshold and out_scale gradients are sums over every activation element,
    so at the weight learning rate they overshoot by orders of magnitude and
    oscillate; 1/sqrt(N*Q) brings them back to per-element size while keeping
    some growth with layer width.
    """
    return 1.0 / math.sqrt(max(1, q.grad_elems) * (q.n_levels - 1))


def surrogate_value(x, thresholds, out_scale):
    """The continuous surrogate a*f(x) whose exact gradients act_forward uses.

    f ramps linearly from k-1 to k on [T_k, T_{k+1}), is 0 below T_1, and
    saturates at 2^n - 1 past the last threshold. Exposed for the
    finite-difference oracle; not used in the training path.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    m = len(t)
    j = np.searchsorted(t, x, side="right")
    f = np.empty_like(x)
    f[j == 0] = 0.0
    f[j == m] = float(m)
    interior = (j >= 1) & (j <= m - 1)
    ji = j[interior]
    t_lo = t[ji - 1]
    t_hi = t[ji]
    f[interior] = (ji - 1) + (x[interior] - t_lo) / (t_hi - t_lo)
    return out_scale * f


def init_thresholds(calib_acts, n, requires_grad=True, dtype=np.float32):
    """Evenly spaced thresholds on [0, 99.9th percentile of calibration data].

    T_k = k*P/2^n for k = 1..2^n-1 and out_scale = P/(2^n - 1), so the top
    level reconstructs the percentile. All-zero calibration falls back to
    the unit interval.
    """
    calib = np.asarray(calib_acts).reshape(-1)
    p = float(np.quantile(calib, 0.999)) if calib.size else 0.0
    if p <= 0:
        import warnings
        warnings.warn("calibration activations are all zero: thresholds on [0, 1]")
        p = 1.0
    n_lv = 1 << n
    t = np.arange(1, n_lv) * (p / n_lv)
    return ActQuantizer.create(n, t, p / (n_lv - 1),
                               requires_grad=requires_grad, dtype=dtype)


def project_thresholds(q):
    """Restore strict ascending order after an optimizer step.

    Left-to-right pass with minimum gap 1e-4 of the pre-projection span;
    out_scale is floored to stay positive.
    """
    t = q.thresholds.data
    span = float(t[-1] - t[0])
    gap = MIN_GAP_FRACTION * span if span > 0 else 0.0
    if gap <= 0:
        gap = 1e-8
    gap = t.dtype.type(gap)
    for i in range(1, len(t)):
        lo = t[i - 1] + gap
        if t[i] < lo:
            t[i] = lo
    if float(q.out_scale.data) < OUT_SCALE_FLOOR:
        q.out_scale.data = np.maximum(q.out_scale.data,
                                      q.out_scale.data.dtype.type(OUT_SCALE_FLOOR))
