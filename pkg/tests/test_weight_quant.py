"""Codebook tests: hand-worked examples, sampling oracles, brute-force
assignment equivalence, Lloyd's K-means fixed point, finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adq.codebook import (ChannelScale, Codebook, CommitConfig, assign_nearest,
                          assign_nearest_reference, commitment_loss,
                          compute_channel_scale, ema_update,
                          init_codebook_quantile, quantization_mse,
                          random_normal_codebook, ste_reconstruct,
                          uniform_minmax_levels)
from adq.tensor import Tensor, ValidationError
from helpers import numeric_grad, rel_err, rng_for


def make_codebook(levels, **kw):
    levels = np.asarray(levels, dtype=np.float32)
    counts = np.ones_like(levels)
    kw.setdefault("bit_width", {3: 2, 7: 3, 15: 4}[len(levels)])
    return Codebook(levels, counts, counts * levels, **kw)


# ---- channel scale -------------------------------------------------------


def test_scale_maxabs():
    w = np.array([[-3.0, 1.0, 2.0]], dtype=np.float32)
    cs = compute_channel_scale(w)
    assert cs.s[0] == 3.0
    w_norm = w / cs.broadcast(w.ndim)
    assert np.allclose(w_norm, [[-1.0, 1 / 3, 2 / 3]])


def test_scale_zero_channel_guard():
    w = np.zeros((2, 4), dtype=np.float32)
    w[1] = [0.5, -0.25, 0.1, 0.0]
    cs = compute_channel_scale(w)
    assert cs.s[0] == 1.0 and cs.s[1] == 0.5


def test_scale_identity_when_already_unit():
    w = np.array([[0.5, -1.0, 0.25]], dtype=np.float32)
    cs = compute_channel_scale(w)
    assert cs.s[0] == 1.0
    assert np.array_equal(w / cs.broadcast(2), w)


def test_scale_conv_shape_broadcast():
    rng = rng_for(0)
    w = rng.normal(size=(8, 4, 3, 3)).astype(np.float32)
    cs = compute_channel_scale(w)
    w_norm = w / cs.broadcast(4)
    assert np.abs(w_norm).max() <= 1.0 + 1e-6
    for c in range(8):
        assert np.isclose(np.abs(w_norm[c]).max(), 1.0)


# ---- quantile init -------------------------------------------------------


def test_quantile_init_hand_example():
    cb = init_codebook_quantile(np.array([-3.0, -1.0, 1.0, 3.0]), b=2)
    assert np.allclose(cb.levels, [-2.0, 0.0, 2.0])
    assert np.array_equal(cb.ema_counts, np.ones(3))
    assert np.allclose(cb.ema_sums, cb.levels)


def test_quantile_init_uniform_sampling():
    rng = rng_for(1)
    w = rng.uniform(-1, 1, 10 ** 5)
    cb = init_codebook_quantile(w, b=3)
    expect = [-0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75]
    assert np.all(np.abs(cb.levels - expect) < 0.01)


def test_quantile_init_positive_only_mirrors():
    cb = init_codebook_quantile(np.array([1.0, 2.0, 3.0, 4.0]), b=2)
    assert cb.levels[2] == -cb.levels[0]
    assert cb.levels[1] == 0.0


def test_quantile_init_all_zero_warns():
    with pytest.warns(UserWarning):
        cb = init_codebook_quantile(np.zeros(10), b=2)
    assert np.all(cb.levels == 0)


def test_quantile_init_level_counts():
    rng = rng_for(2)
    w = rng.normal(size=1000)
    for b in (2, 3, 4):
        cb = init_codebook_quantile(w, b=b)
        n = 2 ** b - 1
        assert len(cb.levels) == n
        assert np.sum(cb.levels < 0) == n // 2
        assert np.sum(cb.levels > 0) == n // 2
        assert np.sum(cb.levels == 0) == 1
        assert np.all(np.diff(cb.levels) > 0)


def test_random_normal_codebook_structure():
    cb = random_normal_codebook(3, rng_for(3))
    assert len(cb.levels) == 7
    assert cb.levels[3] == 0.0
    assert np.all(np.diff(cb.levels) > 0)


# ---- assignment ----------------------------------------------------------


def test_assign_basic():
    cb = make_codebook([-1.0, 0.0, 1.0])
    idx, snapped = assign_nearest(np.array([0.4], dtype=np.float32), cb)
    assert idx[0] == 1 and snapped[0] == 0.0


def test_assign_fixed_point():
    cb = make_codebook([-1.0, 0.0, 1.0])
    idx, snapped = assign_nearest(np.array([-1.0, 0.0, 1.0], dtype=np.float32), cb)
    assert np.array_equal(idx, [0, 1, 2])
    assert np.array_equal(snapped, [-1.0, 0.0, 1.0])


def test_assign_tie_to_smaller():
    cb = make_codebook([-1.0, 0.0, 1.0])
    idx, snapped = assign_nearest(np.array([0.5, -0.5], dtype=np.float32), cb)
    assert np.array_equal(snapped, [0.0, -1.0])


def test_assign_dyadic_ties_match_reference():
    # Levels on a dyadic grid so midpoints are exactly representable.
    levels = np.array([-1.0, -0.25, 0.0, 0.5, 1.5], dtype=np.float32)
    mids = (levels[:-1] + levels[1:]) / 2
    idx, _ = assign_nearest(mids, levels)
    ridx, _ = assign_nearest_reference(mids, levels)
    assert np.array_equal(idx, ridx)
    assert np.array_equal(idx, np.arange(4))  # ties resolve to the smaller level


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([3, 7, 15]), st.sampled_from(["f4", "f8"]))
def test_assign_matches_bruteforce(seed, n_levels, dtype):
    rng = rng_for(seed)
    levels = np.sort(rng.uniform(-2, 2, n_levels)).astype(dtype)
    if np.any(np.diff(levels) <= 0):
        return
    w = rng.uniform(-3, 3, 64).astype(dtype)
    idx, snapped = assign_nearest(w, levels)
    ridx, rsnapped = assign_nearest_reference(w, levels)
    assert np.array_equal(idx, ridx)
    assert np.array_equal(snapped, rsnapped)


# ---- commitment loss -------------------------------------------------------


def test_commit_zero_at_fixed_point():
    w = Tensor(np.array([0.5, -0.5], dtype=np.float64), requires_grad=True)
    loss = commitment_loss(w, w.data.copy(), CommitConfig(beta=0.25))
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(w.grad == 0)


def test_commit_hand_example():
    w = Tensor(np.array([0.4], dtype=np.float64), requires_grad=True)
    loss = commitment_loss(w, np.array([0.0]), CommitConfig(beta=0.25))
    assert loss.item() == pytest.approx(0.04)
    loss.backward()
    assert np.allclose(w.grad, [0.2])


def test_commit_beta_zero():
    w = Tensor(np.array([3.0, -7.0]), requires_grad=True)
    loss = commitment_loss(w, np.zeros(2), CommitConfig(beta=0.0))
    assert loss.item() == 0.0


def test_commit_gradient_finite_difference():
    rng = rng_for(4)
    beta = 0.25
    w_hat = rng.uniform(-1, 1, 20)
    w0 = rng.uniform(-1, 1, 20)
    w = Tensor(w0.copy(), requires_grad=True, dtype=np.float64)
    loss = commitment_loss(w, w_hat, CommitConfig(beta=beta))
    loss.backward()

    def f(w_):
        return beta * float(np.mean((w_hat - w_) ** 2))

    (ng,) = numeric_grad(f, [w0.copy()])
    assert rel_err(w.grad, ng) < 1e-4


def test_commit_no_gradient_to_snapped_side():
    w = Tensor(np.array([0.4]), requires_grad=True)
    w_hat = Tensor(np.array([0.0]), requires_grad=True)
    loss = commitment_loss(w, w_hat, CommitConfig(beta=1.0))
    loss.backward()
    assert w_hat.grad is None


# ---- STE reconstruction ----------------------------------------------------


def test_ste_forward_value():
    w = Tensor(np.array([0.4], dtype=np.float32), requires_grad=True)
    out = ste_reconstruct(w, np.array([0.5]), np.array([2.0]))
    assert out.data[0] == np.float32(2.0) * np.float32(0.5)


def test_ste_transparent_at_fixed_point():
    rng = rng_for(5)
    w0 = rng.uniform(-1, 1, 6).astype(np.float32)
    s = np.float32(1.5)
    w = Tensor(w0.copy(), requires_grad=True)
    out = ste_reconstruct(w, w0, s)
    assert np.array_equal(out.data, s * w0)
    out.sum().backward()
    assert np.all(w.grad == s)


def test_ste_gradient_is_scale():
    rng = rng_for(6)
    w0 = rng.uniform(-1, 1, (4, 5)).astype(np.float32)
    s = rng.uniform(0.5, 3.0, (4, 1)).astype(np.float32)
    w = Tensor(w0.copy(), requires_grad=True)
    idx, w_hat = assign_nearest(w0, make_codebook([-1.0, 0.0, 1.0]))
    out = ste_reconstruct(w, w_hat, s)
    assert np.array_equal(out.data, s * w_hat)  # bit-exact forward
    out.sum().backward()
    assert np.array_equal(w.grad, np.broadcast_to(s, w0.shape))


# ---- EMA update -------------------------------------------------------------


def test_ema_hand_example():
    cb = Codebook(np.array([-1.0, 0.0, 0.5]), np.array([1.0, 1.0, 1.0]),
                  np.array([-1.0, 0.0, 0.5]), alpha=0.9, epsilon=1e-5, bit_width=2)
    w = np.array([0.4, 0.6], dtype=np.float32)
    idx = np.array([2, 2])
    ema_update(cb, w, idx, rng=rng_for(0))
    assert cb.ema_counts[2] == pytest.approx(1.1)
    assert cb.ema_sums[2] == pytest.approx(0.55)
    assert cb.levels[2] == pytest.approx(0.55 / (1.1 + 1e-5), rel=1e-6)


def test_ema_unassigned_entry_ratio_invariance():
    cb = Codebook(np.array([-1.0, 0.0, 0.5]), np.array([2.0, 1.0, 1.0]),
                  np.array([-2.0, 0.0, 0.5]), alpha=0.9, epsilon=1e-12, bit_width=2)
    ema_update(cb, np.array([0.5]), np.array([2]), rng=rng_for(0))
    assert cb.levels[0] == pytest.approx(-1.0, rel=1e-6)  # only ratio preserved


def test_ema_zero_level_pinned():
    rng = rng_for(7)
    w = rng.normal(size=500).astype(np.float32)
    cb = init_codebook_quantile(w, b=3)
    for _ in range(5):
        idx, _ = assign_nearest(w, cb)
        ema_update(cb, w, idx, rng=rng)
        assert np.count_nonzero(cb.levels == 0) == 1


def test_ema_counts_stay_nonnegative():
    rng = rng_for(8)
    w = rng.normal(size=200).astype(np.float32)
    cb = init_codebook_quantile(w, b=2)
    for _ in range(50):
        idx, _ = assign_nearest(w, cb)
        ema_update(cb, w, idx, rng=rng)
        assert np.all(cb.ema_counts >= 0)
        assert np.all(np.diff(cb.levels) > 0)


def test_ema_bad_index_raises():
    cb = make_codebook([-1.0, 0.0, 1.0])
    with pytest.raises(ValidationError):
        ema_update(cb, np.array([0.1]), np.array([3]))


def test_ema_dead_entry_reseeded():
    cb = Codebook(np.array([-1.0, 0.0, 1.0]), np.array([5e-4, 1.0, 1.0]),
                  np.array([-5e-4, 0.0, 1.0]), alpha=0.5, epsilon=1e-5, bit_width=2)
    w = np.array([0.6, 0.7, 0.8], dtype=np.float32)
    idx = np.array([2, 2, 2])
    ema_update(cb, w, idx, rng=rng_for(9))
    # the dead negative entry was reseeded to one of the current weights
    assert np.all(cb.ema_counts >= 5e-4)
    reseeded = set(np.round(cb.levels, 6)) & set(np.round(w, 6))
    assert reseeded


def lloyd_reference(points, init_levels, zero_index, tol=1e-10, max_iter=10 ** 4):
    """Plain Lloyd's K-means in 1-D with the zero level pinned."""
    levels = np.asarray(init_levels, dtype=np.float64).copy()
    for _ in range(max_iter):
        idx, _ = assign_nearest_reference(points, levels)
        new = levels.copy()
        for i in range(len(levels)):
            mask = idx == i
            if np.any(mask):
                new[i] = points[mask].mean()
        new[zero_index] = 0.0
        new = np.sort(new)
        if np.max(np.abs(new - levels)) < tol:
            return new
        levels = new
    return levels


def test_ema_converges_to_lloyd():
    rng = rng_for(10)
    points = rng.normal(size=2000).astype(np.float64)
    cb = init_codebook_quantile(points, b=2, alpha=0.9)
    ref = lloyd_reference(points, cb.levels, cb.zero_index)
    move = 1.0
    for _ in range(2000):
        idx, _ = assign_nearest(points.astype(np.float32), cb)
        move = ema_update(cb, points, idx, rng=rng)
        if move < 1e-7:
            break
    assert move < 1e-7
    assert np.max(np.abs(np.sort(cb.levels) - ref)) < 1e-3


def test_ema_fixed_distribution_contraction():
    # EMA with recomputed assignments performs ~1% of a Lloyd step per
    # iteration, and Lloyd's slowest mode is itself slow, so the transient
    # spans thousands of steps; run until the 20-step average movement falls
    # below the bar (2e4-sample batches keep the noise floor under it).
    rng = rng_for(11)
    cb = init_codebook_quantile(rng.normal(size=20000), b=3, alpha=0.99)
    moves = []
    for step in range(6000):
        w = rng.normal(size=20000).astype(np.float32)
        idx, _ = assign_nearest(w, cb)
        moves.append(ema_update(cb, w, idx, rng=rng))
        if len(moves) >= 20 and np.mean(moves[-20:]) < 1e-4:
            break
    assert np.mean(moves[-20:]) < 1e-4, "per-step movement never fell below 1e-4"


# ---- distribution-quality properties ----------------------------------------


def test_cdf_balance_positive_side():
    rng = rng_for(12)
    w = rng.standard_normal(10 ** 5)
    cb = init_codebook_quantile(w, b=3)
    pos_levels = cb.levels[cb.levels > 0]
    pos = w[w > 0]
    edges = np.concatenate([[0.0], pos_levels])
    fractions = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        fractions.append(np.mean((pos >= lo) & (pos < hi)))
    fractions = np.array(fractions)
    assert np.all(np.abs(fractions - fractions.mean()) < 0.02)


@pytest.mark.parametrize("b", [
    2,
    3,
    pytest.param(4, marks=pytest.mark.xfail(
        strict=True,
        reason="interior-point quantiles place the outermost level at the "
               "87.5th percentile, clipping 12.5% of Gaussian mass; at 4 bits "
               "the clipping loss exceeds the uniform grid's resolution loss "
               "(see notes ledger)")),
])
def test_mse_dominance_over_uniform(b):
    rng = rng_for(13)
    w = rng.standard_normal(10 ** 5)
    quantile_cb = init_codebook_quantile(w, b=b)
    uniform = uniform_minmax_levels(w, b)
    assert quantization_mse(w, quantile_cb.levels) < quantization_mse(w, uniform)


# ---- validation -------------------------------------------------------------


def test_codebook_rejects_unsorted():
    with pytest.raises(ValidationError):
        Codebook(np.array([1.0, 0.0, -1.0]), np.ones(3), np.zeros(3), bit_width=2)


def test_codebook_rejects_missing_zero():
    with pytest.raises(ValidationError):
        Codebook(np.array([-1.0, 0.5, 1.0]), np.ones(3), np.zeros(3), bit_width=2)


def test_codebook_rejects_wrong_length():
    with pytest.raises(ValidationError):
        Codebook(np.array([-1.0, 0.0, 1.0]), np.ones(3), np.zeros(3), bit_width=3)


def test_channel_scale_rejects_nonpositive():
    with pytest.raises(ValidationError):
        ChannelScale(np.array([1.0, 0.0]))


def test_commit_config_rejects_negative_beta():
    with pytest.raises(ValidationError):
        CommitConfig(beta=-0.1)


def test_codebook_dict_roundtrip():
    cb = init_codebook_quantile(rng_for(14).normal(size=100), b=3)
    cb2 = Codebook.from_dict(cb.to_dict())
    assert np.array_equal(cb.levels, cb2.levels)
    assert np.array_equal(cb.ema_counts, cb2.ema_counts)
    assert np.array_equal(cb.ema_sums, cb2.ema_sums)
    assert cb.alpha == cb2.alpha and cb.epsilon == cb2.epsilon
