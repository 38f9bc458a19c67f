"""Small hand-built models shared by the sampler tests."""

import numpy as np

from hbaforecast.analog import DistanceCache
from hbaforecast.nmf import Factorization
from hbaforecast.sampler import AnalogModel


def toy_model(hyper, n_y=3, n_beta=2, n=4, n_q=1, seed=0, scale=1.0):
    """Random symmetric distances over ``n`` periods for q = 1..n_q, random positive factors."""
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.5, 2.0, (n_q, n, n))
    d = (d + d.transpose(0, 2, 1)) / 2
    for k in range(n_q):
        np.fill_diagonal(d[k], 0.0)
    q_values = np.arange(1, n_q + 1)
    cache = DistanceCache(np.arange(n), q_values, {None: d}, {None: d})
    fac = Factorization(rng.uniform(0.5, 1.5, (n_y, n_beta)) * scale,
                        rng.uniform(0.5, 1.5, (n_beta, n)), np.full(n_y, 0.1))
    y = rng.poisson(fac.fitted()).astype(float)
    return AnalogModel.build(y, fac, cache, np.arange(n), hyper), fac


def batch_means_se(x, n_batches=40):
    """Standard error of the mean of an autocorrelated series via batch means."""
    x = np.asarray(x, dtype=float)
    size = x.size // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(n_batches)
