"""Embedding matrices, Procrustes distances, neighbourhoods and kernel weights."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dimred import ForcingCoefficients
from .errors import DegenerateKernelError, InsufficientHistoryError
from .fields import AlignmentSpec, CountField, ForcingField, align


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    a: np.ndarray  # n_alpha x q, column j = alpha at anchor - j
    response_index: int
    q: int


def embedding_at(alpha: np.ndarray, anchor: int, q: int) -> np.ndarray:
    if anchor - (q - 1) < 0 or anchor >= alpha.shape[1]:
        raise InsufficientHistoryError(
            f"embedding with q={q} at forcing index {anchor} needs indices "
            f"{anchor - q + 1}..{anchor}; available 0..{alpha.shape[1] - 1}"
        )
    return alpha[:, anchor - q + 1 : anchor + 1][:, ::-1]


def build_embedding(
    coeffs: ForcingCoefficients,
    t: int,
    q: int,
    spec: AlignmentSpec,
    counts: CountField,
    forcing: ForcingField,
) -> EmbeddingMatrix:
    anchor = align(t, spec, forcing, counts, q)
    return EmbeddingMatrix(embedding_at(coeffs.alpha, anchor, q).copy(), t, q)


# ---------------------------------------------------------------------------
# Procrustes distance
#
# For column-centred E, F (n_alpha x q) the optimal q x q rotation only acts
# on the row spaces, so every matrix is first reduced to an r x n_alpha factor
# (r = min(q, n_alpha)) with E' = Q R and orthonormal Q. The distance and
# scaling are then computed on these small factors.


def _reduce(stack: np.ndarray) -> np.ndarray:
    centred = stack - stack.mean(axis=1, keepdims=True)
    n_alpha, q = stack.shape[1:]
    if q <= n_alpha:
        return np.ascontiguousarray(np.swapaxes(centred, 1, 2))
    return np.linalg.qr(np.swapaxes(centred, 1, 2), mode="r")


def _pair(re: np.ndarray, rf: np.ndarray, rotation_only: bool = False):
    """Distances and scalings for stacks of reduced targets ``re`` and comparisons ``rf``."""
    m = rf @ np.swapaxes(re, 1, 2)
    u, s, vt = np.linalg.svd(m)
    if rotation_only:
        det = np.linalg.det(u) * np.linalg.det(vt)
        flip = det < 0
        if flip.any():
            u[flip, :, -1] *= -1
            s[flip, -1] *= -1
    norm_f2 = np.sum(rf * rf, axis=(1, 2))
    degenerate = norm_f2 == 0
    theta2 = np.where(degenerate, 1.0, s.sum(axis=1) / np.where(degenerate, 1.0, norm_f2))
    rot = u @ vt
    resid = np.swapaxes(re, 1, 2) - theta2[:, None, None] * (np.swapaxes(rf, 1, 2) @ rot)
    d = np.sqrt(np.sum(resid * resid, axis=(1, 2)))
    return d, theta2, degenerate


def procrustes_distance(e, f, rotation_only: bool = False):
    """Procrustes distance of comparison ``f`` onto target ``e``.

    Both matrices are centred by their column means; the comparison is then
    rotated (orthogonal q x q, or proper rotations with ``rotation_only``) and
    scaled by ``theta2 = tr(D) / ||F~||_F^2``. Returns ``(d, theta2)``. A
    comparison whose centred norm is 0 is degenerate: ``theta2 = 1`` and
    ``d = ||E~||_F``.
    """
    e = np.asarray(getattr(e, "a", e), dtype=float)
    f = np.asarray(getattr(f, "a", f), dtype=float)
    if e.shape != f.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {f.shape}")
    d, theta2, _ = _pair(_reduce(e[None]), _reduce(f[None]), rotation_only)
    return float(d[0]), float(theta2[0])


# ---------------------------------------------------------------------------
# distance cache


@dataclass(eq=False)
class DistanceCache:
    """Pairwise distances ``dist[k][iq, a, b] = d(A_{indices[a]}, A_{indices[b]})``.

    ``k`` is the LE neighbour count, or ``None`` for EOF coefficients. ``a`` is
    the target, ``b`` the comparison.
    """

    indices: np.ndarray
    q_values: np.ndarray
    dist: dict
    theta2: dict
    meta: dict = field(default_factory=dict)

    def pos(self, t: int) -> int:
        hit = np.flatnonzero(self.indices == t)
        if hit.size == 0:
            raise KeyError(f"response index {t} not in cache")
        return int(hit[0])

    def q_pos(self, q: int) -> int:
        hit = np.flatnonzero(self.q_values == q)
        if hit.size == 0:
            raise KeyError(f"q={q} not in cache")
        return int(hit[0])

    @property
    def k_values(self) -> list:
        return list(self.dist)

    def matrix(self, q: int, k_nn=None) -> np.ndarray:
        return self.dist[k_nn][self.q_pos(q)]

    def distance(self, q: int, t: int, ell: int, k_nn=None) -> float:
        return float(self.matrix(q, k_nn)[self.pos(t), self.pos(ell)])

    def save(self, path) -> None:
        arrays = {"indices": self.indices, "q_values": self.q_values}
        for k in self.dist:
            tag = "eof" if k is None else f"k{k}"
            arrays[f"dist_{tag}"] = self.dist[k]
            arrays[f"theta2_{tag}"] = self.theta2[k]
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "DistanceCache":
        dist, theta2 = {}, {}
        with np.load(path) as z:
            for name in z.files:
                if name.startswith("dist_"):
                    tag = name[5:]
                    k = None if tag == "eof" else int(tag[1:])
                    dist[k] = z[name]
                    theta2[k] = z[f"theta2_{tag}"]
            return cls(z["indices"], z["q_values"], dist, theta2)


def _distances_for_q(alpha, anchors, q, rotation_only):
    stack = np.stack([embedding_at(alpha, int(a), q) for a in anchors])
    red = _reduce(stack)
    n = len(anchors)
    ia, ib = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    d, theta2, _ = _pair(red[ia.ravel()], red[ib.ravel()], rotation_only)
    d = d.reshape(n, n)
    np.fill_diagonal(d, 0.0)
    return d, theta2.reshape(n, n)


def build_distance_cache(
    coeffs,
    indices,
    anchors,
    q_values,
    rotation_only: bool = False,
    max_workers: int | None = None,
) -> DistanceCache:
    """Exhaustive Procrustes distances over ``q_values`` for the given response indices.

    ``coeffs`` is one :class:`ForcingCoefficients` (EOF) or a dict
    ``k_nn -> ForcingCoefficients`` (LE grid). ``anchors[i]`` is the aligned
    forcing index of ``indices[i]``.
    """
    indices = np.asarray(indices, dtype=int)
    anchors = np.asarray(anchors, dtype=int)
    q_values = np.asarray(q_values, dtype=int)
    if isinstance(coeffs, ForcingCoefficients):
        coeff_map = {None: coeffs}
    else:
        coeff_map = dict(coeffs)
    for alpha_owner in coeff_map.values():
        for a in anchors:
            embedding_at(alpha_owner.alpha, int(a), int(q_values.max()))
    dist, theta2 = {}, {}
    jobs = [(k, q) for k in coeff_map for q in q_values]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(
            pool.map(
                lambda kq: _distances_for_q(coeff_map[kq[0]].alpha, anchors, int(kq[1]), rotation_only),
                jobs,
            )
        )
    for k in coeff_map:
        dist[k] = np.empty((q_values.size, indices.size, indices.size))
        theta2[k] = np.empty_like(dist[k])
    for (k, q), (d, th) in zip(jobs, results):
        iq = int(np.flatnonzero(q_values == q)[0])
        dist[k][iq] = d
        theta2[k][iq] = th
    return DistanceCache(indices, q_values, dist, theta2)


# ---------------------------------------------------------------------------
# neighbourhoods and weights


@dataclass(frozen=True, eq=False)
class WeightVector:
    omega: np.ndarray  # aligned with ``candidates``
    candidates: np.ndarray
    neighborhood: np.ndarray

    def as_dict(self) -> dict:
        return {int(c): float(w) for c, w in zip(self.candidates, self.omega)}


def neighborhood(distances: np.ndarray, m: int) -> np.ndarray:
    """Positions of the ``m`` smallest distances; ties go to the earlier position."""
    return np.argsort(distances, kind="stable")[:m]


def normalized_kernel(d_in: np.ndarray, theta1: float) -> np.ndarray:
    logw = -(d_in**2) / (2.0 * theta1)
    if not np.isfinite(logw).any():
        raise DegenerateKernelError(
            f"all neighbourhood weights vanish (theta1={theta1}, min d={np.min(d_in)})"
        )
    return np.exp(logw - logsumexp(logw))


def kernel_weights(
    t: int,
    candidates,
    cache: DistanceCache,
    q: int,
    m: int,
    theta1: float,
    k_nn=None,
    on_underflow: str = "renormalize",
) -> WeightVector:
    """Normalised Gaussian-kernel weights of candidate analogs for target ``t``.

    Weights outside the ``m`` nearest candidates are exactly 0. Normalisation
    runs over all candidates (outsiders contribute 0). When every unnormalised
    in-neighbourhood weight underflows, ``on_underflow="raise"`` raises
    :class:`DegenerateKernelError`; the default renormalises in log space,
    which equals the limit of the normalised weights.
    """
    if theta1 <= 0:
        raise ValueError("theta1 must be positive")
    candidates = np.asarray([c for c in candidates if c != t], dtype=int)
    if not 1 <= m <= candidates.size:
        raise ValueError(f"m={m} outside [1, {candidates.size}]")
    mat = cache.matrix(q, k_nn)
    row = cache.pos(t)
    d = np.array([mat[row, cache.pos(c)] for c in candidates])
    nb = neighborhood(d, m)
    raw = np.exp(-(d[nb] ** 2) / (2.0 * theta1))
    if raw.sum() == 0 and on_underflow == "raise":
        raise DegenerateKernelError(
            f"all neighbourhood weights underflow (theta1={theta1}, min d={d[nb].min()})"
        )
    omega = np.zeros(candidates.size)
    omega[nb] = normalized_kernel(d[nb], theta1)
    return WeightVector(omega, candidates, candidates[nb])


def neighbor_order(dist: np.ndarray) -> np.ndarray:
    """Per row, the other columns sorted by distance (ties to the smaller index)."""
    n = dist.shape[0]
    d = dist.astype(float, copy=True)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, : n - 1]


def weight_matrix(dist: np.ndarray, order: np.ndarray, m: int, theta1: float) -> np.ndarray:
    """Row-stochastic matrix ``W[t, l] = omega_t[l]`` for a square distance block."""
    n = dist.shape[0]
    rows = np.repeat(np.arange(n), m)
    cols = order[:, :m].ravel()
    logw = (-(dist[rows, cols] ** 2) / (2.0 * theta1)).reshape(n, m)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((n, n))
    out[rows, cols] = w.ravel()
    return out


def target_weights(d_row: np.ndarray, m: int, theta1: float) -> np.ndarray:
    """Weights of every training analog for a target outside the training set."""
    nb = neighborhood(d_row, m)
    w = np.zeros(d_row.size)
    w[nb] = normalized_kernel(d_row[nb], theta1)
    return w
