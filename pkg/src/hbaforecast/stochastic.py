"""Truncated-normal moments and sampling, the bias correction, Poisson and prior densities."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import gammaln

from . import _kernels as K

LAMBDA_FLOOR = 1e-12
K_NN_GRID = tuple(6 + 3 * d for d in range(11))


@dataclass(frozen=True)
class ModelParams:
    m: int
    q: int
    theta1: float
    sigma2_eta: float
    k_nn: int | None = None


@dataclass(frozen=True)
class Hyperparams:
    eps: float = 1e-6
    q_min: int = 30
    q_max: int = 60
    m_min: int = 1
    m_max: int = 15
    a1: float = 2.02
    b1: float = 0.102
    a2: float = 0.001
    b2: float = 0.001
    k_nn_grid: tuple = field(default=K_NN_GRID)

    def __post_init__(self):
        if self.q_min > self.q_max or self.m_min > self.m_max:
            raise ValueError("hyperparameter bounds are inverted")
        if min(self.a1, self.b1, self.a2, self.b2, self.eps) <= 0:
            raise ValueError("eps and inverse-gamma parameters must be positive")

    @property
    def q_grid(self) -> np.ndarray:
        return np.arange(self.q_min, self.q_max + 1)

    @property
    def m_grid(self) -> np.ndarray:
        return np.arange(self.m_min, self.m_max + 1)


@njit(cache=True)
def _tn_mean_loop(mu, s2, out):
    for i in range(mu.size):
        out[i] = K.tn_mean_scalar(mu[i], s2[i])


@njit(cache=True)
def _h_loop(a, s2, out):
    for i in range(a.size):
        out[i] = K.h_scalar(a[i], s2[i])


@njit(cache=True)
def _tn_logpdf_loop(x, loc, s2, out):
    for i in range(x.size):
        out[i] = K.tn_logpdf_scalar(x[i], loc[i], s2[i])


def _apply(loop, *args):
    arrs = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])
    shape = arrs[0].shape
    flat = [np.ascontiguousarray(a).ravel() for a in arrs]
    out = np.empty(flat[0].size)
    loop(*flat, out)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def tn_mean(mu, sigma2):
    """Mean of normal(mu, sigma2) truncated to [0, inf)."""
    if np.any(np.asarray(sigma2) <= 0):
        raise ValueError("sigma2 must be positive")
    return _apply(_tn_mean_loop, mu, sigma2)


def bias_correct_h(target, sigma2, eps=None):
    """Location ``mu`` with ``tn_mean(mu, sigma2) == target``.

    Returns ``-inf`` for nonpositive targets. With ``eps`` given, returns
    ``max(h, eps)`` (the clamped location used by the process model).
    """
    if np.any(np.asarray(sigma2) <= 0):
        raise ValueError("sigma2 must be positive")
    out = _apply(_h_loop, target, sigma2)
    if eps is not None:
        out = np.maximum(out, eps)
        out = float(out) if np.ndim(out) == 0 else out
    return out


def tn_logpdf(x, loc, sigma2):
    """Log density of normal(loc, sigma2) truncated to [0, inf); ``-inf`` for x < 0."""
    if np.any(np.asarray(sigma2) <= 0):
        raise ValueError("sigma2 must be positive")
    return _apply(_tn_logpdf_loop, x, loc, sigma2)


def tn_sample(rng: np.random.Generator, loc, sigma2, size=None):
    """Exact draws from normal(loc, sigma2) truncated to [0, inf).

    Plain normal rejection when ``loc >= 0`` (acceptance >= 1/2); otherwise
    Robert's exponential rejection sampler on the standardised tail.
    """
    loc, sigma2 = np.broadcast_arrays(np.asarray(loc, float), np.asarray(sigma2, float))
    if size is not None:
        loc = np.broadcast_to(loc, size)
        sigma2 = np.broadcast_to(sigma2, size)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    s = np.sqrt(sigma2)
    a = np.ravel(-loc / s)  # standardised lower bound
    z = np.empty(a.size)
    todo = np.arange(a.size)
    while todo.size:
        at = a[todo]
        out = np.empty(todo.size)
        ok = np.zeros(todo.size, dtype=bool)
        easy = at <= 0
        if easy.any():
            draw = rng.standard_normal(easy.sum())
            out[easy] = draw
            ok[easy] = draw >= at[easy]
        hard = ~easy
        if hard.any():
            ah = at[hard]
            lam = 0.5 * (ah + np.sqrt(ah * ah + 4.0))
            cand = ah + rng.exponential(1.0 / lam)
            u = rng.random(ah.size)
            out[hard] = cand
            ok[hard] = u <= np.exp(-0.5 * (cand - lam) ** 2)
        z[todo[ok]] = out[ok]
        todo = todo[~ok]
    draws = np.ravel(loc) + np.ravel(s) * z
    draws = np.maximum(draws, 0.0).reshape(np.shape(loc))
    return float(draws) if draws.ndim == 0 else draws


def poisson_loglik(y, lam) -> float:
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if y.shape != lam.shape:
        raise ValueError("y and lambda shapes differ")
    if (y < 0).any():
        raise ValueError("negative count")
    zero = lam <= 0
    if zero.any():
        if (y[zero] > 0).any():
            return -math.inf
        warnings.warn("zero intensities floored at 1e-12", RuntimeWarning, stacklevel=2)
        lam = np.where(zero, LAMBDA_FLOOR, lam)
    return float(np.sum(y * np.log(lam) - lam - gammaln(y + 1.0)))


def invgamma_logpdf(x, a, b) -> float:
    if x <= 0:
        return -math.inf
    return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(x) - b / x


def prior_logpdf(params: ModelParams, hyper: Hyperparams) -> float:
    if not hyper.m_min <= params.m <= hyper.m_max:
        return -math.inf
    if not hyper.q_min <= params.q <= hyper.q_max:
        return -math.inf
    lp = -math.log(hyper.m_max - hyper.m_min + 1) - math.log(hyper.q_max - hyper.q_min + 1)
    if params.k_nn is not None:
        if params.k_nn not in hyper.k_nn_grid:
            return -math.inf
        lp -= math.log(len(hyper.k_nn_grid))
    lp += invgamma_logpdf(params.theta1, hyper.a1, hyper.b1)
    lp += invgamma_logpdf(params.sigma2_eta, hyper.a2, hyper.b2)
    return lp
