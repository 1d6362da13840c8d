"""Per-layer weight codebooks: quantile init, nearest assignment, commitment
loss, straight-through reconstruction, and gradient-free EMA centroid updates.

All codebook machinery operates on normalized weights w' = w / s, where s is a
frozen per-output-channel max-abs scale. Levels always carry a pinned zero
entry; the zero entry is exempt from EMA drift and dead-entry reseeding so the
codebook keeps an exact sparse representation.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .tensor import Tensor, ValidationError, stop_gradient

DEAD_COUNT_FLOOR = 1e-3


@dataclass
class CommitConfig:
    beta: float = 0.25

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError(f"beta must be nonnegative, got {self.beta}")


@dataclass
class ChannelScale:
    """Positive per-output-channel normalizer, frozen after initialization."""
    s: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float32)
        if self.s.ndim != 1 or not np.all(self.s > 0):
            raise ValidationError("channel scales must be a 1-D positive vector")

    def broadcast(self, ndim, axis=0):
        """Reshape so the channel dim lands on `axis` of a rank-`ndim` weight."""
        shape = [1] * ndim
        shape[axis] = self.s.shape[0]
        return self.s.reshape(shape)


@dataclass
class Codebook:
    """Sorted quantization levels plus EMA statistics for centroid tracking."""
    levels: np.ndarray
    ema_counts: np.ndarray
    ema_sums: np.ndarray
    alpha: float = 0.99
    epsilon: float = 1e-5
    bit_width: int = 3

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float32)
        self.ema_counts = np.asarray(self.ema_counts, dtype=np.float32)
        self.ema_sums = np.asarray(self.ema_sums, dtype=np.float32)
        self.validate()

    @property
    def n_levels(self):
        return (1 << self.bit_width) - 1

    def validate(self):
        n = self.n_levels
        if self.bit_width not in (2, 3, 4):
            raise ValidationError(f"bit_width must be in {{2,3,4}}, got {self.bit_width}")
        if not (len(self.levels) == len(self.ema_counts) == len(self.ema_sums) == n):
            raise ValidationError(f"codebook arrays must all have length {n}")
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must be in (0,1), got {self.alpha}")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if np.any(self.ema_counts < 0):
            raise ValidationError("ema_counts must be nonnegative")
        if np.all(self.levels == 0):
            return  # degenerate all-zero codebook (no data to initialize from)
        if np.any(np.diff(self.levels) <= 0):
            raise ValidationError("levels must be strictly ascending")
        if np.count_nonzero(self.levels == 0) != 1:
            raise ValidationError("exactly one level must be zero")

    @property
    def zero_index(self):
        idx = np.flatnonzero(self.levels == 0)
        return int(idx[0])

    def to_dict(self):
        return {
            "levels": self.levels.tolist(),
            "ema_counts": self.ema_counts.tolist(),
            "ema_sums": self.ema_sums.tolist(),
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "bit_width": self.bit_width,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(levels=np.array(d["levels"], dtype=np.float32),
                   ema_counts=np.array(d["ema_counts"], dtype=np.float32),
                   ema_sums=np.array(d["ema_sums"], dtype=np.float32),
                   alpha=float(d["alpha"]), epsilon=float(d["epsilon"]),
                   bit_width=int(d["bit_width"]))


def compute_channel_scale(w, axis=0):
    """Per-output-channel max-abs scale; an all-zero channel gets scale 1."""
    w = np.asarray(w)
    if axis != 0:
        w = np.moveaxis(w, axis, 0)
    flat = np.abs(w.reshape(w.shape[0], -1))
    s = flat.max(axis=1)
    s[s == 0] = 1.0
    return ChannelScale(s)


def _side_count(b):
    return ((1 << b) - 1) // 2


def init_codebook_quantile(w_norm, b, alpha=0.99, epsilon=1e-5):
    """Build a codebook whose positive (negative) levels are the evenly spaced
    interior quantiles of the positive (negative) weight magnitudes, plus a
    zero level. Linear interpolation between order statistics.
    """
    w = np.asarray(w_norm, dtype=np.float64).reshape(-1)
    n_side = _side_count(b)
    probs = np.linspace(0.0, 1.0, n_side + 2)[1:-1]
    pos = w[w > 0]
    neg = -w[w < 0]
    if pos.size == 0 and neg.size == 0:
        warnings.warn("no nonzero weights: codebook initialized to all zeros")
        zeros = np.zeros((1 << b) - 1, dtype=np.float32)
        return Codebook(zeros, np.ones_like(zeros), zeros.copy(),
                        alpha=alpha, epsilon=epsilon, bit_width=b)
    if pos.size == 0:
        pos = neg
    elif neg.size == 0:
        neg = pos
    pos_levels = np.quantile(pos, probs)
    neg_levels = -np.quantile(neg, probs)
    levels = np.sort(np.concatenate([neg_levels, [0.0], pos_levels])).astype(np.float32)
    counts = np.ones_like(levels)
    return Codebook(levels, counts, counts * levels,
                    alpha=alpha, epsilon=epsilon, bit_width=b)


def random_normal_codebook(b, rng, alpha=0.99, epsilon=1e-5):
    """Ablation init: level magnitudes drawn from |N(0,1)| per side, zero pinned."""
    n_side = _side_count(b)
    pos = np.sort(np.abs(rng.standard_normal(n_side)))
    neg = -np.sort(np.abs(rng.standard_normal(n_side)))[::-1]
    levels = np.concatenate([neg, [0.0], pos]).astype(np.float32)
    counts = np.ones_like(levels)
    return Codebook(levels, counts, counts * levels,
                    alpha=alpha, epsilon=epsilon, bit_width=b)


def uniform_minmax_levels(values, b):
    """Equal-count baseline codebook: levels evenly spaced on [min, max]."""
    v = np.asarray(values, dtype=np.float64)
    return np.linspace(v.min(), v.max(), (1 << b) - 1).astype(np.float32)


def uniform_symmetric_codebook(w_norm, b, alpha=0.99, epsilon=1e-5):
    """Ablation init: levels evenly spaced on [-max|w'|, max|w'|], exact zero."""
    w = np.asarray(w_norm, dtype=np.float64).reshape(-1)
    m = float(np.abs(w).max()) if w.size else 0.0
    n_side = _side_count(b)
    if m == 0.0:
        warnings.warn("no nonzero weights: codebook initialized to all zeros")
        zeros = np.zeros((1 << b) - 1, dtype=np.float32)
        return Codebook(zeros, np.ones_like(zeros), zeros.copy(),
                        alpha=alpha, epsilon=epsilon, bit_width=b)
    pos = np.linspace(0.0, m, n_side + 1)[1:]
    levels = np.concatenate([-pos[::-1], [0.0], pos]).astype(np.float32)
    counts = np.ones_like(levels)
    return Codebook(levels, counts, counts * levels,
                    alpha=alpha, epsilon=epsilon, bit_width=b)


def assign_nearest(w_norm, cb):
    """Snap each element to its nearest level (ties to the smaller level).

    Returns (indices, snapped values). Binary search over midpoint thresholds;
    assign_nearest_reference is the brute-force oracle.
    """
    w = np.asarray(w_norm)
    levels = cb.levels if isinstance(cb, Codebook) else np.asarray(cb)
    levels = levels.astype(w.dtype, copy=False)
    idx = K.assign_nearest(np.ascontiguousarray(w.reshape(-1)),
                           np.ascontiguousarray(levels))
    idx = idx.reshape(w.shape)
    return idx, levels[idx]


def assign_nearest_reference(w_norm, levels):
    """O(N) argmin oracle with the same tie rule (first minimum = smaller level)."""
    w = np.asarray(w_norm)
    levels = np.asarray(levels, dtype=w.dtype)
    d2 = (w.reshape(-1)[:, None] - levels[None, :]) ** 2
    idx = np.argmin(d2, axis=1).astype(np.int64).reshape(w.shape)
    return idx, levels[idx]


def quantization_mse(values, levels):
    v = np.asarray(values, dtype=np.float64)
    _, snapped = assign_nearest(v, np.asarray(levels, dtype=np.float64))
    return float(np.mean((v - snapped) ** 2))


def commitment_loss(w_norm, w_hat_norm, cfg):
    """beta * mean((sg(w_hat') - w')^2); gradient reaches only w'."""
    if isinstance(w_hat_norm, Tensor):
        w_hat_norm = stop_gradient(w_hat_norm)
    else:
        w_hat_norm = Tensor(np.asarray(w_hat_norm, dtype=w_norm.data.dtype))
    if w_hat_norm.data.shape != w_norm.data.shape:
        raise ValidationError("commitment_loss shapes differ")
    d = w_hat_norm - w_norm
    return (d * d).mean() * w_norm.data.dtype.type(cfg.beta)


def ste_reconstruct(w_norm, w_hat_norm, scale):
    """Forward s*w_hat' bit-exactly; backward passes grad*s straight to w'.

    The (w_hat' - w') residual sits under stop-gradient, so the Jacobian
    w.r.t. w' is exactly diag(s). Implemented as one engine op rather than
    the w' + sg(w_hat' - w') composite to keep the forward free of the
    composite's extra rounding.
    """
    w_hat = np.asarray(w_hat_norm, dtype=w_norm.data.dtype)
    if w_hat.shape != w_norm.data.shape:
        raise ValidationError("ste_reconstruct shapes differ")
    s = np.asarray(scale, dtype=w_norm.data.dtype)
    out = s * w_hat

    def grad_fn(g):
        return (g * s,)

    return Tensor.from_op(out, (w_norm,), grad_fn, "ste_reconstruct")


def ema_update(cb, w_norm, indices, rng=None):
    """Decay-update counts/sums, recompute centroids, pin zero, reseed dead
    entries, and re-sort. Returns the max absolute level movement.

    n_i <- alpha*n_i + (1-alpha)*count_i
    E_i <- alpha*E_i + (1-alpha)*sum_i
    c_i <- E_i / (n_i + epsilon)
    """
    w = np.asarray(w_norm, dtype=np.float64).reshape(-1)
    idx = np.asarray(indices).reshape(-1)
    n = len(cb.levels)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"assignment index out of range [0, {n})")
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    sums = np.bincount(idx, weights=w, minlength=n)

    alpha = np.float64(cb.alpha)
    zero_i = cb.zero_index
    old_levels = cb.levels.copy()
    n_new = alpha * cb.ema_counts.astype(np.float64) + (1 - alpha) * counts
    e_new = alpha * cb.ema_sums.astype(np.float64) + (1 - alpha) * sums
    levels = e_new / (n_new + cb.epsilon)
    levels[zero_i] = 0.0

    dead = (n_new < DEAD_COUNT_FLOOR) & (np.arange(n) != zero_i)
    if np.any(dead) and w.size:
        if rng is None:
            rng = np.random.default_rng(0)
        for i in np.flatnonzero(dead):
            seed_val = float(w[rng.integers(0, w.size)])
            while seed_val in levels:
                seed_val += 1e-6 * (1.0 + abs(seed_val)) * rng.uniform(0.5, 1.0)
            levels[i] = seed_val
            n_new[i] = 1.0
            e_new[i] = seed_val

    order = np.argsort(levels, kind="stable")
    cb.levels = levels[order].astype(np.float32)
    cb.ema_counts = n_new[order].astype(np.float32)
    cb.ema_sums = e_new[order].astype(np.float32)
    return float(np.max(np.abs(np.sort(old_levels) - np.sort(cb.levels))))
