"""Candidate document sampling and teacher scoring for distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import EmbeddingSet, RelevanceJudgments, top_k_desc
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)


class Origin(str, Enum):
    GROUND_TRUTH = "ground_truth"
    TOPK = "topk"
    IN_BATCH = "in_batch"


@dataclass
class CandidateSet:
    query_row: int
    doc_ids: np.ndarray
    teacher_scores: np.ndarray
    origins: list[Origin]

    def __post_init__(self):
        n = len(self.doc_ids)
        if len(self.teacher_scores) != n or len(self.origins) != n:
            raise ContractError("candidate lists must have equal length")
        if np.unique(self.doc_ids).size != n:
            raise ContractError(f"query {self.query_row}: duplicate candidate documents")
        if not np.isfinite(self.teacher_scores).all():
            raise ContractError(f"query {self.query_row}: non-finite teacher score")

    def __len__(self) -> int:
        return len(self.doc_ids)


@dataclass(frozen=True)
class SamplingStrategy:
    """Which sources feed each query's candidate list.

    ``topk_take`` is ``"all"`` or an integer n: draw n documents uniformly
    (without replacement) from the query's mined Top-K pool.
    """

    use_ground_truth: bool = False
    topk_pool: int = 200
    topk_take: str | int = "all"
    use_in_batch: bool = True
    seed: int = 0

    def validate(self, batch_size: int | None = None) -> None:
        if self.topk_pool < 0:
            raise ConfigError("topk_pool must be >= 0")
        if self.topk_take != "all":
            if not isinstance(self.topk_take, int) or self.topk_take < 1:
                raise ConfigError(f"topk_take must be 'all' or a positive integer, got {self.topk_take!r}")
        sources = self.use_ground_truth or self.topk_pool > 0
        if not sources:
            if not self.use_in_batch:
                raise ConfigError("sampling strategy has every candidate source disabled")
            # in-batch alone only borrows from the other queries' own
            # selections, and there are none
            raise ConfigError("in-batch sampling needs ground-truth or Top-K selections to borrow from")
        if batch_size is not None and batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def mine_topk(queries: EmbeddingSet, docs: EmbeddingSet, K: int, chunk: int = 256) -> np.ndarray:
    """Exact Top-K documents per query by teacher inner product.

    Returns an ``(n_queries, K)`` id matrix, rows sorted by descending score
    with ties broken by lower doc id. ``K`` above the corpus size is clamped.
    """
    if queries.dim != docs.dim:
        raise ContractError(f"query dim {queries.dim} != doc dim {docs.dim}")
    if K > docs.count:
        log.warning("Top-K size %d exceeds corpus size %d; clamping", K, docs.count)
        K = docs.count
    out = np.empty((queries.count, K), dtype=np.int64)
    d64 = docs.values.astype(np.float64)
    for s in range(0, queries.count, chunk):
        scores = queries.values[s:s + chunk].astype(np.float64) @ d64.T
        for r, row in enumerate(scores):
            out[s + r] = top_k_desc(row, K)[0]
    return out


def teacher_scores(q_row: int, doc_ids, queries: EmbeddingSet, docs: EmbeddingSet) -> np.ndarray:
    """Inner products of the fixed query and document embeddings."""
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    if not 0 <= q_row < queries.count:
        raise ContractError(f"query row {q_row} out of range")
    if doc_ids.size and (doc_ids.min() < 0 or doc_ids.max() >= docs.count):
        raise ContractError("document id out of range")
    return docs.values[doc_ids].astype(np.float64) @ queries.values[q_row].astype(np.float64)


def _own_selection(q: int, strategy: SamplingStrategy, judgments, topk_cache, rng):
    ids: list[np.ndarray] = []
    tags: list[Origin] = []
    if strategy.use_ground_truth:
        gt = judgments[q] if q < len(judgments) else np.zeros(0, dtype=np.int64)
        ids.append(np.asarray(gt, dtype=np.int64))
        tags.extend([Origin.GROUND_TRUTH] * len(gt))
    if strategy.topk_pool > 0:
        pool = np.asarray(topk_cache[q][: strategy.topk_pool], dtype=np.int64)
        if strategy.topk_take != "all" and strategy.topk_take < pool.size:
            pick = np.sort(rng.choice(pool.size, size=strategy.topk_take, replace=False))
            pool = pool[pick]
        ids.append(pool)
        tags.extend([Origin.TOPK] * pool.size)
    flat = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    return flat, tags


def _dedup(ids: np.ndarray, tags: list[Origin]):
    # first occurrence wins, so ground truth beats Top-K beats in-batch
    _, first = np.unique(ids, return_index=True)
    first.sort()
    return ids[first], [tags[i] for i in first]


def sample_candidates(batch, strategy: SamplingStrategy, queries: EmbeddingSet, docs: EmbeddingSet,
                      judgments: RelevanceJudgments | None = None, topk_cache=None,
                      rng: np.random.Generator | None = None) -> list[CandidateSet]:
    """Build the candidate list of every query in ``batch``.

    Each query gets its own ground-truth and Top-K selections; with in-batch
    sampling it also receives the selections of the other queries in the
    batch. Duplicates are removed, keeping the first source's tag.
    """
    strategy.validate()
    batch = [int(q) for q in batch]
    if strategy.use_ground_truth and judgments is None:
        raise ConfigError("ground-truth sampling requires relevance judgments")
    if strategy.topk_pool > 0 and topk_cache is None:
        raise ConfigError("Top-K sampling requires a mined Top-K cache")
    if rng is None:
        rng = np.random.default_rng(strategy.seed)

    own = [_own_selection(q, strategy, judgments, topk_cache, rng) for q in batch]
    out = []
    for i, q in enumerate(batch):
        ids, tags = own[i]
        if strategy.use_in_batch:
            others = [own[j][0] for j in range(len(batch)) if j != i]
            extra = np.concatenate(others) if others else np.zeros(0, dtype=np.int64)
            ids = np.concatenate([ids, extra])
            tags = tags + [Origin.IN_BATCH] * extra.size
        ids, tags = _dedup(ids, tags)
        out.append(CandidateSet(q, ids, teacher_scores(q, ids, queries, docs), tags))
    return out
