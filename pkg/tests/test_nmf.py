import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hbaforecast.nmf import Factorization, fit_offset_nmf, nnsvd_init, reconstruct


@given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.integers(2, 12), st.booleans())
def test_loss_monotone_and_factors_nonnegative(seed, n, t, offset):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, min(n, t) + 1))
    y = rng.poisson(rng.uniform(0.2, 15.0), (n, t)).astype(float)
    f = fit_offset_nmf(y, k, max_iter=150, offset=offset)
    assert np.all(np.diff(f.loss_trace) <= 0.0)
    assert (f.psi >= 0).all() and (f.b >= 0).all() and (f.offset >= 0).all()
    if not offset:
        assert (f.offset == 0).all()


def test_all_zero_counts():
    f = fit_offset_nmf(np.zeros((4, 5)), 2, max_iter=50)
    assert np.all(np.diff(f.loss_trace) <= 0)
    assert f.fitted().max() < 1e-3


def test_exact_rank_one_recovery():
    rng = np.random.default_rng(3)
    y = np.outer(rng.uniform(0.5, 2, 10), rng.uniform(0.5, 2, 7))
    f = fit_offset_nmf(y, 1, max_iter=5000, tol=0, offset=False)
    assert np.linalg.norm(y - f.fitted()) / np.linalg.norm(y) < 1e-10


def test_nnsvd_init_is_deterministic_and_positive(rng):
    y = rng.poisson(4.0, (8, 6)).astype(float)
    w1, h1 = nnsvd_init(y, 3)
    w2, h2 = nnsvd_init(y, 3)
    assert np.array_equal(w1, w2) and np.array_equal(h1, h2)
    assert (w1 > 0).all() and (h1 > 0).all()
    # rank-1 term reproduces the leading SVD component exactly
    u, s, vt = np.linalg.svd(y)
    assert np.allclose(np.outer(w1[:, 0], h1[0]), s[0] * np.outer(u[:, 0], vt[0]), atol=1e-3)


def test_rejects_bad_input(rng):
    with pytest.raises(ValueError, match="negative"):
        fit_offset_nmf(-np.ones((3, 3)), 1)
    with pytest.raises(ValueError, match="rank"):
        nnsvd_init(np.ones((3, 4)), 4)


def test_save_load_round_trip(tmp_path, rng):
    y = rng.poisson(6.0, (6, 5)).astype(float)
    f = fit_offset_nmf(y, 2, max_iter=40)
    f.save(tmp_path / "nmf")
    g = Factorization.load(tmp_path / "nmf")
    assert np.array_equal(f.psi, g.psi) and np.array_equal(f.b, g.b)
    assert np.array_equal(f.offset, g.offset) and np.array_equal(f.loss_trace, g.loss_trace)
    assert np.allclose(reconstruct(g, g.b[:, 0]), f.fitted()[:, 0])
