"""Forcing-field dimension reduction: EOFs and Laplacian eigenmaps over time points."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .errors import DisconnectedGraphError

EOF = "EOF"
LE = "LaplacianEigenmap"


@dataclass(frozen=True, eq=False)
class ForcingCoefficients:
    alpha: np.ndarray  # n_alpha x T'
    method: str
    method_params: dict = field(default_factory=dict)

    @property
    def n_alpha(self) -> int:
        return self.alpha.shape[0]

    def save(self, path) -> None:
        np.savez(path, alpha=self.alpha, method=self.method,
                 k_nn=self.method_params.get("k_nn", -1))

    @classmethod
    def load(cls, path) -> "ForcingCoefficients":
        with np.load(path) as z:
            k_nn = int(z["k_nn"])
            params = {} if k_nn < 0 else {"k_nn": k_nn}
            return cls(z["alpha"], str(z["method"]), params)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so that its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def compute_eofs(x, n_alpha: int):
    """Leading left singular vectors of ``x`` and the projection coefficients.

    Returns ``(phi, coeffs, var_explained)`` with ``phi`` of shape
    ``(n_x, n_alpha)`` and ``var_explained`` the fraction of total squared
    singular values carried by each retained EOF.
    """
    x = np.asarray(x, dtype=float)
    if not 1 <= n_alpha <= min(x.shape):
        raise ValueError(f"n_alpha={n_alpha} outside [1, {min(x.shape)}]")
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    phi = _fix_signs(u[:, :n_alpha])
    alpha = phi.T @ x
    total = np.sum(s**2)
    var = s[:n_alpha] ** 2 / total if total > 0 else np.zeros(n_alpha)
    return phi, ForcingCoefficients(alpha, EOF), var


def knn_adjacency(points: np.ndarray, k_nn: int) -> np.ndarray:
    """Binary k-nearest-neighbour adjacency, symmetrised by union.

    ``points`` holds one point per row. Distance ties go to the smaller index.
    """
    n = points.shape[0]
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k_nn]
    w = np.zeros((n, n))
    w[np.repeat(np.arange(n), k_nn), nbrs.ravel()] = 1.0
    return np.maximum(w, w.T)


def laplacian_eigenmaps(x, n_alpha: int, k_nn: int) -> ForcingCoefficients:
    """Embed each forcing period (column of ``x``) into ``n_alpha`` coordinates.

    Solves ``L v = lambda D v`` for the unnormalised Laplacian of the kNN graph
    and keeps the eigenvectors of the ``n_alpha`` smallest nonzero eigenvalues.
    """
    x = np.asarray(x, dtype=float)
    T = x.shape[1]
    if not 1 <= k_nn < T:
        raise ValueError(f"k_nn={k_nn} must lie in [1, {T - 1}]")
    if not 1 <= n_alpha < T:
        raise ValueError(f"n_alpha={n_alpha} must lie in [1, {T - 1}]")
    w = knn_adjacency(x.T, k_nn)
    n_comp, _ = connected_components(w, directed=False)
    if n_comp > 1:
        raise DisconnectedGraphError(n_comp, k_nn)
    deg = w.sum(axis=1)
    lap = np.diag(deg) - w
    _, vecs = scipy.linalg.eigh(lap, np.diag(deg), subset_by_index=[1, n_alpha])
    vecs = _fix_signs(vecs)
    return ForcingCoefficients(vecs.T.copy(), LE, {"k_nn": int(k_nn)})


def precompute_le_grid(x, n_alpha: int, grid, max_workers: int | None = None):
    """Embeddings for every ``k_nn`` in ``grid``.

    Returns a dict ``k_nn -> ForcingCoefficients | Exception``; failures are
    kept per entry so a disconnected graph at one value does not discard the
    rest.
    """
    def one(k):
        try:
            return laplacian_eigenmaps(x, n_alpha, k)
        except (DisconnectedGraphError, ValueError) as exc:
            return exc

    grid = [int(k) for k in grid]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(one, grid))
    return dict(zip(grid, results))


def save_le_grid(results: dict, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, res in results.items():
        if isinstance(res, ForcingCoefficients):
            res.save(d / f"le_k{k}.npz")
