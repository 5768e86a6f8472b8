"""Synthetic clustered corpora standing in for real embedding dumps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingSet, RelevanceJudgments


@dataclass(frozen=True)
class SynthConfig:
    n_docs: int = 20_000
    n_queries: int = 2_000
    n_eval_queries: int = 500
    dim: int = 64
    clusters: int = 50
    cluster_std: float = 1.0
    std_spread: float = 4.0
    query_noise: float = 1.5
    scale: float = 4.0
    seed: int = 0


@dataclass
class SynthData:
    docs: EmbeddingSet
    queries: EmbeddingSet
    eval_queries: EmbeddingSet
    judgments: RelevanceJudgments
    eval_judgments: RelevanceJudgments


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def _queries(docs: np.ndarray, n: int, noise: float, rng: np.random.Generator):
    src = rng.integers(docs.shape[0], size=n)
    q = docs[src].astype(np.float64)
    if noise > 0:
        q = q + rng.normal(scale=noise / np.sqrt(docs.shape[1]), size=q.shape)
    return _unit(q), src


def make_synthetic(cfg: SynthConfig) -> SynthData:
    """Unit-norm documents around Gaussian cluster centres; each query is a
    perturbed copy of a random document, which becomes its ground truth.

    ``cluster_std`` and ``query_noise`` are total (not per-coordinate)
    standard deviations relative to the unit-norm centres; with
    ``std_spread > 1`` each cluster draws its own spread log-uniformly from
    ``[cluster_std / std_spread, cluster_std * std_spread]``. Every vector is
    finally multiplied by ``scale``, so teacher scores span about
    ``[-scale**2, scale**2]``.
    """
    rng = np.random.default_rng(cfg.seed)
    h = cfg.dim
    centres = _unit(rng.normal(size=(cfg.clusters, h)))
    member = rng.integers(cfg.clusters, size=cfg.n_docs)
    # per-cluster spread, log-uniform in [std / spread, std * spread]
    stds = cfg.cluster_std * cfg.std_spread ** rng.uniform(-1.0, 1.0, size=cfg.clusters)
    noise = rng.normal(size=(cfg.n_docs, h)) * (stds[member] / np.sqrt(h))[:, None]
    docs = centres[member] + noise
    docs = _unit(docs)
    q, src = _queries(docs, cfg.n_queries, cfg.query_noise, rng)
    eq, esrc = _queries(docs, cfg.n_eval_queries, cfg.query_noise, rng)
    docs = (docs * cfg.scale).astype(np.float32)
    q = (q * cfg.scale).astype(np.float32)
    eq = (eq * cfg.scale).astype(np.float32)
    return SynthData(
        docs=EmbeddingSet(docs),
        queries=EmbeddingSet(q),
        eval_queries=EmbeddingSet(eq),
        judgments=RelevanceJudgments([np.array([d]) for d in src]),
        eval_judgments=RelevanceJudgments([np.array([d]) for d in esrc]),
    )
