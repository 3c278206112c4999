"""Kernel-perceptron training and certificate tests.

The certificate oracles are brute force on purpose: dense scans along the
ray (or around the sphere) checking the score bound directly, written
before the closed forms and kept independent of them.
"""

import math

import numpy as np
import pytest

from sbkmap.kernel import KernelParams
from sbkmap.mapping import TrainingBatch
from sbkmap.perceptron import (
    SupportVectorSet,
    skm_free_ball_radius,
    skm_line_free_horizon,
    skm_score,
    skm_score_upper_bound,
    skm_train_batch,
)


def make_svs(params, pos=(), posw=(), neg=(), negw=()):
    d = params.dim
    return SupportVectorSet(
        params,
        np.asarray(pos, dtype=float).reshape(-1, d), np.asarray(posw, dtype=float),
        np.asarray(neg, dtype=float).reshape(-1, d), np.asarray(negw, dtype=float))


def random_svs(rng, eta=1.0):
    # cutoff disabled: these tests compare against the exact field, and the
    # sparsity flush saturates far-away scores at exactly 0.0
    gamma = rng.uniform(0.3, 3.0)
    params = KernelParams.isotropic(gamma, eta=eta, cutoff=0.0)
    npos = rng.integers(1, 7)
    nneg = rng.integers(1, 7)
    pts = rng.uniform(-2, 2, size=(npos + nneg, 2))
    w = rng.uniform(0.1, 3.0, size=npos + nneg)
    return make_svs(params, pts[:npos], w[:npos], pts[npos:], w[npos:])


# ---------------------------------------------------------------- scoring

def test_score_empty_set_is_zero_and_occupied():
    svs = SupportVectorSet.empty(KernelParams.isotropic(1.0))
    assert skm_score(np.zeros(2), svs) == 0.0  # >= 0: occupied by convention


def test_score_single_positive_self():
    p = KernelParams.isotropic(1.0)
    x = np.array([0.3, -0.7])
    svs = make_svs(p, pos=[x], posw=[2.0])
    assert skm_score(x, svs) == 2.0


def test_score_mixed_pair():
    p = KernelParams.isotropic(3.0)
    x = np.zeros(2)
    svs = make_svs(p, pos=[[1.0, 0.0]], posw=[1.0], neg=[[0.0, 0.0]], negw=[1.0])
    assert skm_score(x, svs) == pytest.approx(-0.9502, abs=1e-4)


def test_svs_rejects_point_in_both_lists():
    p = KernelParams.isotropic(1.0)
    with pytest.raises(ValueError):
        make_svs(p, pos=[[0.0, 0.0]], posw=[1.0], neg=[[0.0, 0.0]], negw=[1.0])
    with pytest.raises(ValueError):
        make_svs(p, pos=[[0.0, 0.0]], posw=[0.0])


# --------------------------------------------------------------- training

def test_train_satisfied_batch_unchanged():
    p = KernelParams.isotropic(1.0)
    svs = make_svs(p, pos=[[0.0, 0.0]], posw=[1.0], neg=[[3.0, 0.0]], negw=[1.0])
    batch = TrainingBatch([[0.0, 0.0], [3.0, 0.0]], [1.0, -1.0])
    out = skm_train_batch(svs, batch)
    np.testing.assert_array_equal(out.pos_points, svs.pos_points)
    np.testing.assert_array_equal(out.pos_weights, svs.pos_weights)
    np.testing.assert_array_equal(out.neg_points, svs.neg_points)
    np.testing.assert_array_equal(out.neg_weights, svs.neg_weights)


def test_train_single_point_weight_is_margin_over_eta():
    x = [0.5, 0.25]
    for eta in (1.0, 2.5):
        svs = SupportVectorSet.empty(KernelParams.isotropic(2.0, eta=eta))
        out = skm_train_batch(svs, TrainingBatch([x], [1.0]), xi_pos=1.5)
        assert out.n_pos == 1 and out.n_neg == 0
        assert out.pos_weights[0] == pytest.approx(1.5 / eta, rel=1e-15)
        # repaired margin lands exactly on the target
        assert skm_score(np.array(x), out) == pytest.approx(1.5, rel=1e-15)


def test_train_single_point_margin_exact_at_unit_eta():
    svs = SupportVectorSet.empty(KernelParams.isotropic(3.0))
    out = skm_train_batch(svs, TrainingBatch([[1.0, 2.0]], [-1.0]), xi_neg=2.0)
    assert -1.0 * skm_score(np.array([1.0, 2.0]), out) == 2.0


def test_train_two_opposite_points():
    svs = SupportVectorSet.empty(KernelParams.isotropic(1.0))
    batch = TrainingBatch([[0.0, 0.0], [4.0, 0.0]], [1.0, -1.0])
    out = skm_train_batch(svs, batch)
    assert out.n_pos == 1 and out.n_neg == 1
    assert skm_score(np.zeros(2), out) > 0
    assert skm_score(np.array([4.0, 0.0]), out) < 0


def test_train_separable_batch_all_margins_positive():
    rng = np.random.default_rng(3)
    params = KernelParams.isotropic(2.0)
    left = rng.uniform(-1, 0, size=(8, 2)) + [-1.5, 0]
    right = rng.uniform(0, 1, size=(8, 2)) + [1.5, 0]
    pts = np.vstack([left, right])
    y = np.array([1.0] * 8 + [-1.0] * 8)
    out = skm_train_batch(SupportVectorSet.empty(params), TrainingBatch(pts, y))
    for x, label in zip(pts, y):
        assert label * skm_score(x, out) > 0


def test_train_updates_existing_sv_weight():
    p = KernelParams.isotropic(1.0)
    svs = make_svs(p, pos=[[0.0, 0.0]], posw=[0.1], neg=[[0.5, 0.0]], negw=[5.0])
    # the positive SV is now misclassified; training must repair it in place
    batch = TrainingBatch([[0.0, 0.0]], [1.0])
    out = skm_train_batch(svs, batch)
    assert skm_score(np.zeros(2), out) > 0
    # the untouched negative SV survives with its weight
    assert out.n_neg == 1
    assert out.neg_weights[0] == 5.0


def test_train_redundancy_removal_prunes():
    # two coincident-label points close together: one SV suffices
    params = KernelParams.isotropic(1.0)
    batch = TrainingBatch([[0.0, 0.0], [0.05, 0.0], [3.0, 0.0]],
                          [1.0, 1.0, -1.0])
    out = skm_train_batch(SupportVectorSet.empty(params), batch)
    assert out.n_pos < 2


# ------------------------------------------------------------ score bound

def test_upper_bound_tight_for_single_pair():
    p = KernelParams.isotropic(2.0)
    svs = make_svs(p, pos=[[1.0, 1.0]], posw=[0.7], neg=[[0.0, 0.0]], negw=[1.3])
    x = np.array([0.2, -0.1])
    assert skm_score_upper_bound(x, svs, 0) == pytest.approx(
        skm_score(x, svs), rel=1e-14)


def test_upper_bound_no_positives():
    p = KernelParams.isotropic(1.0)
    svs = make_svs(p, neg=[[0.0, 0.0]], negw=[2.0])
    assert skm_score_upper_bound(np.zeros(2), svs, 0) == -2.0


def test_upper_bound_dominates_score_randomized():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        svs = random_svs(rng, eta=float(rng.uniform(0.5, 2.0)))
        x = rng.uniform(-2.5, 2.5, size=2)
        j = int(rng.integers(svs.n_neg))
        assert skm_score_upper_bound(x, svs, j) - skm_score(x, svs) >= -1e-12


def test_soundness_chain_bound_negative_implies_score_negative():
    rng = np.random.default_rng(12)
    checked = 0
    for _ in range(10_000):
        svs = random_svs(rng)
        x = rng.uniform(-2.5, 2.5, size=2)
        j = int(rng.integers(svs.n_neg))
        if skm_score_upper_bound(x, svs, j) < 0:
            assert skm_score(x, svs) < 0
            checked += 1
    assert checked > 1000


# ------------------------------------------------------- line certificate

def certified_config(rng, eta=1.0):
    """Random model plus a p0 that is certified free by some negative."""
    while True:
        svs = random_svs(rng, eta=eta)
        j = int(rng.integers(svs.n_neg))
        p0 = svs.neg_points[j] + rng.normal(scale=0.05, size=2)
        ok = any(skm_score_upper_bound(p0, svs, jj) < 0 for jj in range(svs.n_neg))
        if ok:
            return svs, p0


def test_horizon_infinite_when_ray_points_away():
    p = KernelParams.isotropic(1.0)
    svs = make_svs(p, pos=[[2.0, 0.0], [2.5, 1.0]], posw=[1.0, 1.0],
                   neg=[[0.0, 0.0]], negw=[4.0])
    v = np.array([-1.0, 0.0])  # v . (x_i+ - x_j-) < 0 for both positives
    assert skm_line_free_horizon([0.0, 0.0], v, svs) == math.inf
    assert skm_line_free_horizon([0.0, 0.0], v, svs, mode="single_j") == math.inf


def test_horizon_refuses_uncertified_start():
    p = KernelParams.isotropic(1.0)
    svs = make_svs(p, pos=[[0.0, 0.0]], posw=[2.0], neg=[[2.0, 0.0]], negw=[1.0])
    with pytest.raises(ValueError):
        skm_line_free_horizon([0.0, 0.0], [1.0, 0.0], svs)


def test_horizon_max_mode_relaxes_single_mode():
    rng = np.random.default_rng(21)
    for _ in range(1000):
        svs, p0 = certified_config(rng)
        v = rng.normal(size=2)
        t1 = skm_line_free_horizon(p0, v, svs, mode="single_j")
        t2 = skm_line_free_horizon(p0, v, svs, mode="max_over_j")
        assert t2 >= t1 - 1e-12


def test_horizon_matches_dense_scan_oracle():
    # 1 positive / 1 negative: the bound equals the score, and the scan
    # finds the first sign change directly
    p = KernelParams.isotropic(1.5)
    svs = make_svs(p, pos=[[2.0, 0.5]], posw=[1.2], neg=[[0.0, 0.0]], negw=[0.9])
    p0 = np.array([-0.2, 0.1])
    v = np.array([1.0, 0.05])
    t_u = skm_line_free_horizon(p0, v, svs, mode="single_j")
    assert 0 < t_u < 10
    step = 1e-4
    t = 0.0
    while t < 10.0:
        if skm_score_upper_bound(p0 + t * v, svs, 0) >= 0:
            break
        t += step
    assert abs(t_u - t) <= step


def test_horizon_sound_on_random_rays():
    rng = np.random.default_rng(22)
    for _ in range(1000):
        svs, p0 = certified_config(rng)
        v = rng.normal(size=2)
        t_u = skm_line_free_horizon(p0, v, svs, mode="max_over_j")
        if t_u == 0.0:
            continue
        ts = np.linspace(0.0, min(t_u, 5.0), 257)[:-1]
        for t in ts:
            assert skm_score(p0 + t * v, svs) < 0


def test_horizon_rejects_anisotropic_kernel():
    params = KernelParams(eta=1.0, gamma=np.diag([1.0, 2.0]))
    svs = make_svs(params, pos=[[2.0, 0.0]], posw=[1.0],
                   neg=[[0.0, 0.0]], negw=[1.0])
    with pytest.raises(ValueError):
        skm_line_free_horizon([0.0, 0.0], [1.0, 0.0], svs)


# ------------------------------------------------------- ball certificate

def test_ball_infinite_without_positives():
    p = KernelParams.isotropic(1.0)
    svs = make_svs(p, neg=[[0.0, 0.0]], negw=[1.0])
    assert skm_free_ball_radius([0.1, 0.1], svs) == math.inf


def test_ball_single_le_max_mode():
    rng = np.random.default_rng(23)
    for _ in range(1000):
        svs, p0 = certified_config(rng)
        r1 = skm_free_ball_radius(p0, svs, mode="single_j")
        r2 = skm_free_ball_radius(p0, svs, mode="max_over_j")
        assert r1 <= r2 + 1e-12


def test_ball_interior_free_dense_angles():
    rng = np.random.default_rng(24)
    angles = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    for _ in range(200):
        svs, p0 = certified_config(rng)
        r = skm_free_ball_radius(p0, svs, mode="max_over_j")
        if r == 0.0 or not math.isfinite(r):
            continue
        for u in dirs:
            assert skm_score(p0 + 0.99 * r * u, svs) < 0


def test_ball_radius_le_line_horizon_same_direction():
    # the ball must survive the worst direction, so any fixed ray is easier
    rng = np.random.default_rng(25)
    for _ in range(300):
        svs, p0 = certified_config(rng)
        u = rng.normal(size=2)
        u /= np.linalg.norm(u)
        r = skm_free_ball_radius(p0, svs, mode="single_j")
        t = skm_line_free_horizon(p0, u, svs, mode="single_j")
        assert r <= t + 1e-12
