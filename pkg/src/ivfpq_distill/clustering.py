"""Lloyd's k-means with k-means++ seeding.

Used to initialise IVF centroids over document embeddings and PQ codebooks
over per-subspace residuals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import EmbeddingSet, l2_distance_sq
from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 25
    seed: int = 0
    rel_tolerance: float = 1e-4

    def validate(self) -> None:
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ContractError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.rel_tolerance < 0:
            raise ContractError("rel_tolerance must be non-negative")


def assign_nearest(v, centroids) -> int:
    """Index of the centroid closest to ``v`` in l2; ties go to the lowest index."""
    centroids = np.asarray(centroids)
    if centroids.ndim != 2 or centroids.shape[0] == 0:
        raise ContractError("empty centroid set")
    best, best_d = 0, np.inf
    for i in range(centroids.shape[0]):
        d = l2_distance_sq(v, centroids[i])
        if d < best_d:
            best, best_d = i, d
    return best


def _nearest(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # argmin of ||x||^2 - 2xc + ||c||^2; the ||x||^2 term is constant per row
    s = x @ c.T
    s *= -2.0
    s += np.einsum("ij,ij->i", c, c)[None, :]
    return np.argmin(s, axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # fewer distinct points than k: duplicate an existing point; the
            # empty-cluster rule takes over during Lloyd iterations
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        np.minimum(closest, ((x - centers[i]) ** 2).sum(axis=1), out=closest)
    return centers


def _update(x: np.ndarray, labels: np.ndarray, d_own: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    centers = sums / np.maximum(counts, 1)[:, None]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        # reseed each empty cluster on the point currently farthest from its
        # own centroid; that point's cost drops to zero so the objective
        # cannot increase
        order = np.lexsort((np.arange(x.shape[0]), -d_own))
        taken = 0
        for e in empty:
            while taken < order.size and counts[labels[order[taken]]] <= 1:
                taken += 1
            if taken >= order.size:
                centers[e] = x[order[0]]
                continue
            p = order[taken]
            counts[labels[p]] -= 1
            centers[e] = x[p]
            taken += 1
    return centers


def kmeans(data: EmbeddingSet | np.ndarray, cfg: KMeansConfig,
           return_history: bool = False):
    """Cluster rows of ``data`` into ``cfg.k`` centroids.

    Returns a float32 ``(k, dim)`` array, plus the per-iteration objective
    history when ``return_history`` is set. Deterministic for a given seed.
    """
    cfg.validate()
    x = data.values if isinstance(data, EmbeddingSet) else np.asarray(data)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("k-means needs at least one data point")
    x = x.astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    centers = _kmeans_pp(x, cfg.k, rng)

    history: list[float] = []
    for it in range(cfg.max_iters):
        labels = _nearest(x, centers)
        d_own = ((x - centers[labels]) ** 2).sum(axis=1)
        obj = float(d_own.sum())
        history.append(obj)
        if it > 0:
            prev = history[-2]
            if prev <= 0.0 or (prev - obj) / prev < cfg.rel_tolerance:
                break
        centers = _update(x, labels, d_own, cfg.k)
    log.debug("kmeans k=%d finished after %d iterations, objective %.6g", cfg.k, len(history), history[-1])
    out = centers.astype(np.float32)
    if return_history:
        return out, history
    return out
