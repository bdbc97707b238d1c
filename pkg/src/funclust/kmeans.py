"""Lloyd's k-means with k-means++ seeding and restarts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidSpecError, NumericalError


@dataclass
class KMeansResult:
    centers: NDArray
    labels: NDArray
    inertia: float
    n_iter: int


def _sq_dists(X: NDArray, centers: NDArray) -> NDArray:
    d = np.sum(X * X, axis=1)[:, None] - 2.0 * X @ centers.T + np.sum(centers * centers, axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: NDArray, k: int, rng: np.random.Generator) -> NDArray:
    """Pick ``k`` initial centers by D^2 sampling."""
    N = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(N)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, N - 1)
        centers[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(X, centers, max_iter, tol, max_reseeds=10):
    k = len(centers)
    labels = np.zeros(len(X), dtype=int)
    reseeds = 0
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, centers)
        labels = np.argmin(D, axis=1)
        counts = np.bincount(labels, minlength=k)
        empty = np.nonzero(counts == 0)[0]
        if len(empty):
            if reseeds >= max_reseeds:
                raise NumericalError("k-means kept producing empty clusters")
            reseeds += 1
            # move each empty centroid onto the point farthest from its own center
            mind = D[np.arange(len(X)), labels].copy()
            for j in empty:
                far = int(np.argmax(mind))
                centers[j] = X[far]
                mind[far] = -1.0
            continue
        new = np.zeros_like(centers)
        np.add.at(new, labels, X)
        new /= counts[:, None]
        shift = np.sum((new - centers) ** 2)
        centers = new
        if shift <= tol:
            break
    D = _sq_dists(X, centers)
    labels = np.argmin(D, axis=1)
    inertia = float(np.sum((X - centers[labels]) ** 2))
    return centers, labels, inertia, it


def kmeans(
    X: ArrayLike,
    k: int,
    restarts: int = 20,
    rng: np.random.Generator | int | None = None,
    max_iter: int = 300,
    tol: float = 1e-12,
) -> KMeansResult:
    """Best of ``restarts`` Lloyd runs by total within-cluster sum of squares."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N = len(X)
    if k < 1 or k > N:
        raise InvalidSpecError(f"cannot form {k} clusters from {N} points")
    rng = np.random.default_rng(rng)
    best = None
    for _ in range(max(int(restarts), 1)):
        centers = kmeans_plusplus(X, k, rng)
        centers, labels, inertia, it = _lloyd(X, centers, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(centers, labels, inertia, it)
    return best
