"""Nonnegative matrix factorization of the count matrix.

NNDSVD starting values followed by multiplicative updates for the offset
model ``Y ~ Psi @ B + u 1'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError

ZERO_FILL_SCALE = 1e-4
FLOOR_SCALE = 1e-12


@dataclass(frozen=True, eq=False)
class Factorization:
    psi: np.ndarray  # n_y x n_beta
    b: np.ndarray  # n_beta x T
    offset: np.ndarray  # n_y
    loss_trace: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def rank(self) -> int:
        return self.psi.shape[1]

    def fitted(self) -> np.ndarray:
        return self.psi @ self.b + self.offset[:, None]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "psi.txt", self.psi, fmt="%.17g")
        np.savetxt(d / "b.txt", self.b, fmt="%.17g")
        np.savetxt(d / "offset.txt", self.offset, fmt="%.17g")
        np.savetxt(d / "loss_trace.txt", self.loss_trace, fmt="%.17g")

    @classmethod
    def load(cls, directory) -> "Factorization":
        d = Path(directory)
        psi = np.atleast_2d(np.loadtxt(d / "psi.txt", ndmin=2))
        b = np.loadtxt(d / "b.txt", ndmin=2)
        offset = np.loadtxt(d / "offset.txt", ndmin=1)
        trace = np.loadtxt(d / "loss_trace.txt", ndmin=1)
        return cls(psi, b, offset, trace)


def _check_nonneg(y, name="y"):
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    if (y < 0).any():
        r, c = np.argwhere(y < 0)[0]
        raise ValueError(f"{name} has a negative entry at ({r}, {c})")
    return y


def nnsvd_init(y, k: int):
    """NNDSVD initialisation (Boutsidis & Gallopoulos) with small-value zero fill.

    Exact zeros in the returned factors are replaced by ``mean(y) * 1e-4`` so
    that multiplicative updates can move them.
    """
    y = _check_nonneg(y)
    n, T = y.shape
    if not 1 <= k <= min(n, T):
        raise ValueError(f"rank k={k} outside [1, {min(n, T)}]")
    u, s, vt = np.linalg.svd(y, full_matrices=False)
    w = np.zeros((n, k))
    h = np.zeros((k, T))
    w[:, 0] = np.sqrt(s[0]) * np.abs(u[:, 0])
    h[0, :] = np.sqrt(s[0]) * np.abs(vt[0, :])
    for i in range(1, k):
        x, v = u[:, i], vt[i, :]
        xp, xn = np.maximum(x, 0), np.maximum(-x, 0)
        vp, vn = np.maximum(v, 0), np.maximum(-v, 0)
        xpn, xnn = np.linalg.norm(xp), np.linalg.norm(xn)
        vpn, vnn = np.linalg.norm(vp), np.linalg.norm(vn)
        mp, mn = xpn * vpn, xnn * vnn
        if mp > mn:
            a, bb, m = xp / xpn, vp / vpn, mp
        elif mn > 0:
            a, bb, m = xn / xnn, vn / vnn, mn
        else:
            continue
        scale = np.sqrt(s[i] * m)
        w[:, i] = scale * a
        h[i, :] = scale * bb
    fill = y.mean() * ZERO_FILL_SCALE
    if fill <= 0:
        fill = ZERO_FILL_SCALE
    w[w == 0] = fill
    h[h == 0] = fill
    return w, h


def offset_nmf_loss(y, psi, b, offset) -> float:
    r = y - psi @ b - offset[:, None]
    return float(np.sum(r * r))


def fit_offset_nmf(
    y,
    k: int,
    init=None,
    max_iter: int = 2000,
    tol: float = 1e-8,
    offset: bool = True,
    ridge: float = 0.0,
    inner: int = 10,
) -> Factorization:
    """Minimise ``||Y - Psi B - u 1'||_F^2`` over nonnegative ``Psi``, ``B``, ``u``.

    Each outer iteration applies ``inner`` multiplicative updates to ``Psi``
    (with ``B`` fixed), then ``inner`` to ``B``, then one to ``u``; every
    update is monotone in exact arithmetic; a sweep whose loss rises through
    rounding is discarded and ends the fit, so the recorded loss never increases.
    ``init`` defaults to :func:`nnsvd_init`. ``ridge`` adds
    ``ridge * (||Psi||^2 + ||B||^2)`` to the objective. Iteration stops after
    ``max_iter`` outer sweeps, when the relative loss change drops below
    ``tol``, or when the fit is exact to rounding.
    """
    y = _check_nonneg(y)
    n, T = y.shape
    psi, b = init if init is not None else nnsvd_init(y, k)
    psi = _check_nonneg(psi, "psi").copy()
    b = _check_nonneg(b, "b").copy()
    if psi.shape != (n, k) or b.shape != (k, T):
        raise ValueError("init shapes do not match y and k")
    if offset:
        u = np.full(n, max(y.mean() * ZERO_FILL_SCALE, ZERO_FILL_SCALE))
    else:
        u = np.zeros(n)
    tiny = np.finfo(float).tiny
    # entries pinned at 0 are absorbing; a floor keeps every component able to regrow
    floor = FLOOR_SCALE * max(float(y.mean()), tiny)
    exact = 1e-28 * float(np.sum(y * y))
    row_sums = y.sum(axis=1)

    def loss():
        val = offset_nmf_loss(y, psi, b, u)
        if ridge:
            val += ridge * (np.sum(psi * psi) + np.sum(b * b))
        return val

    trace = [loss()]
    for it in range(max_iter):
        prev_factors = (psi.copy(), b.copy(), u.copy())
        ybt, bbt = y @ b.T, b @ b.T
        ubt = np.outer(u, b.sum(axis=1))
        for _ in range(inner):
            psi *= ybt / np.maximum(psi @ bbt + ubt + ridge * psi, tiny)
            np.maximum(psi, floor, out=psi)
        pty, ptp = psi.T @ y, psi.T @ psi
        ptu = (psi.T @ u)[:, None]
        for _ in range(inner):
            b *= pty / np.maximum(ptp @ b + ptu + ridge * b, tiny)
            np.maximum(b, floor, out=b)
        if offset:
            u *= row_sums / np.maximum((psi @ b).sum(axis=1) + T * u, tiny)
        if not (np.isfinite(psi).all() and np.isfinite(b).all() and np.isfinite(u).all()):
            raise NumericalError(f"offset NMF diverged at iteration {it}")
        cur, prev = loss(), trace[-1]
        if cur > prev:
            # an increase can only come from rounding at convergence: keep the better iterate
            psi, b, u = prev_factors
            break
        trace.append(cur)
        if cur <= exact or prev - cur <= tol * prev:
            break
    return Factorization(psi, b, u, np.asarray(trace))


def reconstruct(f: Factorization, beta_t) -> np.ndarray:
    beta_t = np.asarray(beta_t, dtype=float)
    if beta_t.shape[0] != f.rank:
        raise ValueError(f"beta_t has length {beta_t.shape[0]}, expected {f.rank}")
    return f.psi @ beta_t + (f.offset if beta_t.ndim == 1 else f.offset[:, None])
