"""Compiled scalar kernels for the truncated normal and the beta sweep.

Notation: for a normal(mu, s^2) left-truncated at 0 put z = mu / s. Its mean
is ``s * g(z)`` with ``g(z) = z + phi(z) / Phi(z)``. Below ``z = -CF_SWITCH``
``g`` is evaluated through the continued fraction of the Mills ratio, which
avoids the cancellation in ``z + phi/Phi``.
"""

import math

import numpy as np
from numba import njit

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
INV_SQRT2 = 1.0 / math.sqrt(2.0)
CF_SWITCH = 5.0
CF_TERMS = 120


@njit(cache=True)
def _cf(x):
    # t_k = x + (k + 1) / t_{k+1}; returns t_1, t_2, t_3
    t = x
    t3 = x
    t2 = x
    for k in range(CF_TERMS, 0, -1):
        t3 = t2
        t2 = t
        t = x + (k + 1) / t
    return t, t2, t3


@njit(cache=True)
def g_and_slope(z):
    """Return g(z), g'(z) and the inverse Mills ratio phi(z)/Phi(z)."""
    if z >= -CF_SWITCH:
        cdf = 0.5 * math.erfc(-z * INV_SQRT2)
        pdf = INV_SQRT_2PI * math.exp(-0.5 * z * z)
        r = pdf / cdf
        g = z + r
        return g, 1.0 - r * g, r
    x = -z
    t1, t2, t3 = _cf(x)
    g = 1.0 / t1
    slope = (1.0 - 6.0 / (t2 * t3) + 4.0 / (t2 * t2)) / (t1 * t1)
    return g, slope, x + g


@njit(cache=True)
def tn_mean_scalar(mu, sigma2):
    s = math.sqrt(sigma2)
    g, _, _ = g_and_slope(mu / s)
    return s * g


@njit(cache=True)
def inv_g(r):
    """Solve g(z) = r for z; r > 0. Returns -inf for r <= 0."""
    if r <= 0.0:
        return -np.inf
    lo = -1.0 / r
    if not math.isfinite(lo):
        return -np.inf
    hi = r
    if r < 0.5:
        z = -1.0 / r + 2.0 * r
    elif r > 4.0:
        z = r
    else:
        z = 0.5 * (lo + hi)
    if z <= lo or z >= hi:
        z = 0.5 * (lo + hi)
    logr = math.log(r)
    for _ in range(200):
        g, slope, _ = g_and_slope(z)
        f = math.log(g) - logr
        if f == 0.0:
            return z
        if f > 0.0:
            hi = z
        else:
            lo = z
        if slope > 0.0:
            z_new = z - f * g / slope
        else:
            z_new = 0.5 * (lo + hi)
        if not (lo < z_new < hi):
            z_new = 0.5 * (lo + hi)
        if abs(z_new - z) <= 4e-16 * max(1.0, abs(z)):
            return z_new
        if hi - lo <= 4e-16 * max(1.0, abs(lo), abs(hi)):
            return z_new
        z = z_new
    return z


@njit(cache=True)
def h_scalar(target, sigma2):
    """Location whose zero-truncated normal has mean ``target``."""
    s = math.sqrt(sigma2)
    z = inv_g(target / s)
    return s * z


@njit(cache=True)
def log_ndtr(z):
    if z >= -CF_SWITCH:
        if z > 0.0:
            return math.log1p(-0.5 * math.erfc(z * INV_SQRT2))
        return math.log(0.5 * math.erfc(-z * INV_SQRT2))
    x = -z
    t1, _, _ = _cf(x)
    return -0.5 * z * z - LOG_SQRT_2PI - math.log(x + 1.0 / t1)


@njit(cache=True)
def tn_logpdf_scalar(x, loc, sigma2):
    if x < 0.0:
        return -np.inf
    s = math.sqrt(sigma2)
    d = (x - loc) / s
    return -LOG_SQRT_2PI - math.log(s) - 0.5 * d * d - log_ndtr(loc / s)


@njit(cache=True)
def process_loc(mean, sigma2, eps, clamp_mean):
    """max{h(mean, sigma2), eps}; ``clamp_mean`` is tn_mean(eps, sigma2)."""
    if mean <= clamp_mean:
        return eps
    loc = h_scalar(mean, sigma2)
    return loc if loc > eps else eps


# ---------------------------------------------------------------------------
# process model over a coefficient matrix


@njit(cache=True)
def process_means(B, W):
    """M[j, t] = sum_l W[t, l] * B[j, l]."""
    nb, T = B.shape
    M = np.zeros((nb, T))
    for t in range(T):
        for l in range(T):
            w = W[t, l]
            if w != 0.0:
                for j in range(nb):
                    M[j, t] += w * B[j, l]
    return M


@njit(cache=True)
def process_logdens(B, W, sigma2, eps):
    """Per-entry log density of B under the truncated-normal process model."""
    nb, T = B.shape
    M = process_means(B, W)
    clamp = tn_mean_scalar(eps, sigma2)
    out = np.empty((nb, T))
    for j in range(nb):
        for t in range(T):
            loc = process_loc(M[j, t], sigma2, eps, clamp)
            out[j, t] = tn_logpdf_scalar(B[j, t], loc, sigma2)
    return out


@njit(cache=True)
def process_total(B, W, sigma2, eps):
    return process_logdens(B, W, sigma2, eps).sum()


@njit(cache=True)
def _poisson_delta(Y, Lam, Psi, t, j, delta):
    total = 0.0
    for i in range(Y.shape[0]):
        l0 = Lam[i, t]
        l1 = l0 + Psi[i, j] * delta
        y = Y[i, t]
        if y > 0.0:
            if l1 <= 0.0:
                return -np.inf
            total += y * (math.log(l1) - math.log(l0)) - (l1 - l0)
        else:
            total -= l1 - l0
    return total


@njit(cache=True)
def beta_sweep(
    Y, Psi, offset, B, W, sigma2, eps, zeta, normals, uniforms,
    order_j, order_t, jacobian, process_on, ref_loc, ref_sigma2, accepted,
):
    """One componentwise Metropolis-Hastings sweep over B (updated in place).

    Proposals are log-normal random walks with variances ``zeta``; ``normals``
    and ``uniforms`` hold the pre-drawn innovations. When ``process_on`` is
    False each entry instead carries an independent truncated-normal
    reference prior (used for diagnostics). Returns the index of the first
    non-finite ratio (flattened j * T + t) or -1.
    """
    nb, T = B.shape
    Lam = Psi @ B
    for i in range(Lam.shape[0]):
        for t in range(T):
            Lam[i, t] += offset[i]
    M = process_means(B, W)
    clamp = tn_mean_scalar(eps, sigma2)
    for k in range(order_j.shape[0]):
        j = order_j[k]
        t = order_t[k]
        b0 = B[j, t]
        b1 = b0 * math.exp(math.sqrt(zeta[j, t]) * normals[j, t])
        delta = b1 - b0
        if delta == 0.0:
            accepted[j, t] += 1
            continue
        log_r = _poisson_delta(Y, Lam, Psi, t, j, delta)
        if process_on:
            loc = process_loc(M[j, t], sigma2, eps, clamp)
            log_r += tn_logpdf_scalar(b1, loc, sigma2) - tn_logpdf_scalar(b0, loc, sigma2)
            for s in range(T):
                w = W[s, t]
                if w == 0.0:
                    continue
                loc0 = process_loc(M[j, s], sigma2, eps, clamp)
                loc1 = process_loc(M[j, s] + w * delta, sigma2, eps, clamp)
                if loc0 != loc1:
                    log_r += tn_logpdf_scalar(B[j, s], loc1, sigma2) - tn_logpdf_scalar(
                        B[j, s], loc0, sigma2
                    )
        else:
            log_r += tn_logpdf_scalar(b1, ref_loc, ref_sigma2) - tn_logpdf_scalar(
                b0, ref_loc, ref_sigma2
            )
        if jacobian:
            log_r += math.log(b1) - math.log(b0)
        if math.isnan(log_r) or log_r == np.inf:
            return j * T + t
        if math.log(uniforms[j, t]) < log_r:
            B[j, t] = b1
            accepted[j, t] += 1
            for i in range(Lam.shape[0]):
                Lam[i, t] += Psi[i, j] * delta
            for s in range(T):
                w = W[s, t]
                if w != 0.0:
                    M[j, s] += w * delta
    return -1
