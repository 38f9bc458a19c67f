import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

from hbaforecast.analog import (
    DistanceCache,
    build_distance_cache,
    build_embedding,
    embedding_at,
    kernel_weights,
    neighbor_order,
    neighborhood,
    procrustes_distance,
    target_weights,
    weight_matrix,
)
from hbaforecast.dimred import ForcingCoefficients
from hbaforecast.errors import DegenerateKernelError, InsufficientHistoryError
from hbaforecast.fields import AlignmentSpec, CountField, ForcingField, Location


def textbook_procrustes(e, f):
    """Full q x q orthogonal Procrustes written out step by step."""
    et = e - e.mean(axis=0)
    ft = f - f.mean(axis=0)
    nf = np.sum(ft * ft)
    if nf == 0:
        return math.sqrt(np.sum(et * et)), 1.0
    u, s, vt = np.linalg.svd(ft.T @ et)
    r = u @ vt
    theta2 = s.sum() / nf
    return float(np.linalg.norm(et - theta2 * ft @ r)), float(theta2)


def test_hand_worked_two_by_two():
    e = np.array([[1.0, 0.0], [0.0, 0.0]])
    f = np.array([[0.0, 1.0], [0.0, 0.0]])
    # centred: E~ = [[.5, 0], [-.5, 0]], F~ = [[0, .5], [0, -.5]]
    # F~'E~ = [[0, 0], [.5, 0]] -> singular value .5; ||F~||^2 = .5 -> theta2 = 1
    # the column swap maps F~ onto E~ exactly -> d = 0
    d, theta2 = procrustes_distance(e, f)
    assert d == pytest.approx(0.0, abs=1e-15)
    assert theta2 == pytest.approx(1.0, abs=1e-15)
    g = np.array([[2.0, 0.0], [0.0, 1.0]])
    # G~ = [[1, -.5], [-1, .5]]; F~'G~ = [[0, 0], [1, -.5]] -> s = sqrt(1.25)
    # d^2 = ||G~||^2 - s^2 / ||F~||^2 = 2.5 - 1.25 / .5 = 0
    d, theta2 = procrustes_distance(g, f)
    assert theta2 == pytest.approx(math.sqrt(1.25) / 0.5)
    assert d == pytest.approx(0.0, abs=1e-12)
    h = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    # H~ = [[2, -1], [-1, 2], [-1, -1]] / 3, ||H~||^2 = 4/3
    # F3~ = [[0, 2], [0, -1], [0, -1]] / 3, ||F3~||^2 = 2/3
    # F3~'H~ = [[0, 0], [2/3, -1/3]] -> s = sqrt(5) / 3
    # d^2 = 4/3 - (5/9) / (2/3) = 1/2, theta2 = (sqrt(5) / 3) / (2/3)
    f3 = np.array([[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    d, theta2 = procrustes_distance(h, f3)
    assert d == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert theta2 == pytest.approx(math.sqrt(5.0) / 2.0, abs=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(1, 12))
def test_matches_textbook_form(seed, n_alpha, q):
    rng = np.random.default_rng(seed)
    e, f = rng.normal(size=(2, n_alpha, q))
    d, theta2 = procrustes_distance(e, f)
    d_ref, th_ref = textbook_procrustes(e, f)
    assert d == pytest.approx(d_ref, rel=1e-9, abs=1e-10)
    assert theta2 == pytest.approx(th_ref, rel=1e-9, abs=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(2, 12))
def test_similarity_invariance(seed, n_alpha, q):
    rng = np.random.default_rng(seed)
    e, f = rng.normal(size=(2, n_alpha, q))
    c = float(rng.uniform(0.1, 10))
    qm = ortho_group.rvs(q, random_state=rng)
    v = rng.normal(size=q)
    assert procrustes_distance(e, c * e @ qm + v)[0] < 1e-9
    assert procrustes_distance(e, c * f @ qm + v)[0] == pytest.approx(
        procrustes_distance(e, f)[0], rel=1e-9, abs=1e-9)
    assert procrustes_distance(e, e) == (pytest.approx(0.0, abs=1e-10), pytest.approx(1.0))


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 8))
def test_rotation_only_never_closer(seed, n_alpha, q):
    e, f = np.random.default_rng(seed).normal(size=(2, n_alpha, q))
    assert procrustes_distance(e, f, True)[0] >= procrustes_distance(e, f)[0] - 1e-12


def test_rotation_only_separates_reflection():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(6, 3))
    mirror = e * np.array([1.0, 1.0, -1.0])
    assert procrustes_distance(e, mirror)[0] < 1e-10
    assert procrustes_distance(e, mirror, rotation_only=True)[0] > 1e-3


def test_degenerate_comparison():
    e = np.arange(6.0).reshape(2, 3) ** 2
    f = np.ones((2, 3)) * 4.0  # rows identical: zero after centring
    d, theta2 = procrustes_distance(e, f)
    et = e - e.mean(axis=0)
    assert theta2 == 1.0 and d == pytest.approx(np.linalg.norm(et))


def test_embedding_indexing():
    alpha = np.arange(20.0)[None, :] * np.ones((3, 1))
    a = embedding_at(alpha, 10, 3)
    assert np.array_equal(a, np.tile([10.0, 9.0, 8.0], (3, 1)))
    assert np.array_equal(embedding_at(alpha, 4, 1), alpha[:, [4]])
    with pytest.raises(InsufficientHistoryError):
        embedding_at(alpha, 1, 3)


def test_build_embedding_uses_alignment():
    locs = (Location("a", 0.0, 0.0),)
    cf = CountField(np.ones((1, 2), int), locs, np.array(["2001-05", "2002-05"], "datetime64[M]"))
    times = np.datetime64("2000-01", "M") + np.arange(30).astype("timedelta64[M]")
    ff = ForcingField(np.arange(30.0)[None, :], locs, times)
    coeffs = ForcingCoefficients(ff.values, "EOF")
    emb = build_embedding(coeffs, 1, 3, AlignmentSpec(12), cf, ff)
    assert np.array_equal(emb.a, [[16.0, 15.0, 14.0]])  # May 2001 is index 16


def make_cache(rng, n=8, q_values=(1, 2, 3), n_alpha=3, rotation_only=False):
    alpha = rng.normal(size=(n_alpha, n + 10))
    anchors = np.arange(n) + 4
    return alpha, anchors, build_distance_cache(
        ForcingCoefficients(alpha, "EOF"), np.arange(n), anchors, q_values, rotation_only
    )


def test_cache_matches_fresh_calls_bitwise(rng):
    alpha, anchors, cache = make_cache(rng)
    for q in (1, 2, 3):
        mat = cache.matrix(q)
        assert np.all(np.diag(mat) == 0)
        for a in range(8):
            for b in range(8):
                if a == b:
                    continue
                d, th = procrustes_distance(embedding_at(alpha, anchors[a], q),
                                            embedding_at(alpha, anchors[b], q))
                assert mat[a, b] == d and cache.theta2[None][cache.q_pos(q), a, b] == th


def test_cache_round_trip_and_le_grid(tmp_path, rng):
    alpha = rng.normal(size=(2, 20))
    grid = {6: ForcingCoefficients(alpha, "LE", {"k_nn": 6}),
            9: ForcingCoefficients(alpha[::-1].copy(), "LE", {"k_nn": 9})}
    cache = build_distance_cache(grid, [0, 1, 2], [5, 6, 7], [2, 3])
    cache.save(tmp_path / "c.npz")
    back = DistanceCache.load(tmp_path / "c.npz")
    assert sorted(back.k_values) == [6, 9]
    assert np.array_equal(back.matrix(3, 9), cache.matrix(3, 9))
    assert back.distance(2, 0, 2, 6) == cache.distance(2, 0, 2, 6)


@given(st.integers(0, 2**31 - 1))
def test_weight_simplex_and_support(seed):
    rng = np.random.default_rng(seed)
    _, _, cache = make_cache(rng, n=10, q_values=(2,))
    m = int(rng.integers(1, 10))
    theta1 = float(np.exp(rng.uniform(-4, 3)))
    w = kernel_weights(0, range(10), cache, 2, m, theta1)
    assert (w.omega >= 0).all() and abs(w.omega.sum() - 1) < 1e-12
    assert np.count_nonzero(w.omega) == m
    outside = np.setdiff1d(w.candidates, w.neighborhood)
    assert all(w.as_dict()[int(c)] == 0.0 for c in outside)
    assert 0 not in w.as_dict()


def test_nested_neighborhoods(rng):
    d = rng.normal(size=12) ** 2
    d[3] = d[7]  # a tie, resolved by position
    for m in range(1, 12):
        assert set(neighborhood(d, m)) <= set(neighborhood(d, m + 1))
    assert list(neighborhood(d, 12)).index(3) < list(neighborhood(d, 12)).index(7)


def test_kernel_limits_and_ties():
    dist = np.array([[0.0, 1.0, 1.0, 3.0],
                     [1.0, 0.0, 2.0, 2.0],
                     [1.0, 2.0, 0.0, 1.0],
                     [3.0, 2.0, 1.0, 0.0]])
    cache = DistanceCache(np.arange(4), np.array([1]), {None: dist[None]}, {None: dist[None]})
    w = kernel_weights(0, range(4), cache, 1, 2, 0.3)
    assert np.allclose(w.omega, [0.5, 0.5, 0.0])
    w = kernel_weights(0, range(4), cache, 1, 3, 1e12)
    assert np.allclose(w.omega, 1 / 3, atol=1e-6)
    with pytest.raises(ValueError):
        kernel_weights(0, range(4), cache, 1, 4, 1.0)


def test_underflow_policy():
    dist = np.array([[0.0, 40.0, 41.0], [40.0, 0.0, 1.0], [41.0, 1.0, 0.0]])
    cache = DistanceCache(np.arange(3), np.array([1]), {None: dist[None]}, {None: dist[None]})
    with pytest.raises(DegenerateKernelError, match="theta1"):
        kernel_weights(0, range(3), cache, 1, 2, 1e-3, on_underflow="raise")
    w = kernel_weights(0, range(3), cache, 1, 2, 1e-3)
    assert w.omega[0] == 1.0 and w.omega[1] == 0.0


def test_weight_matrix_matches_kernel_weights(rng):
    _, _, cache = make_cache(rng, n=9, q_values=(2,))
    mat = cache.matrix(2)
    wm = weight_matrix(mat, neighbor_order(mat), 4, 0.7)
    for t in range(9):
        w = kernel_weights(t, range(9), cache, 2, 4, 0.7)
        assert np.allclose(np.delete(wm[t], t), w.omega, atol=1e-15)
        assert wm[t, t] == 0.0
    tw = target_weights(mat[0, 1:], 4, 0.7)
    assert np.allclose(tw, kernel_weights(0, range(9), cache, 2, 4, 0.7).omega)
