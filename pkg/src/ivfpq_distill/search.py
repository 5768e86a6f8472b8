"""IVF-probed ADC search, exact brute-force search and retrieval metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import EmbeddingSet, RelevanceJudgments, top_k_desc
from .errors import ContractError
from .index import IndexArtifact

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchParams:
    nprobe: int = 100
    top_k: int = 100

    def validate(self) -> None:
        if self.nprobe < 1 or self.top_k < 1:
            raise ContractError("nprobe and top_k must be >= 1")


@dataclass
class AdcTable:
    list_bias: float
    partials: np.ndarray  # (M, P)

    def score(self, pq_ids: np.ndarray) -> np.ndarray:
        M = self.partials.shape[0]
        return self.list_bias + self.partials[np.arange(M), pq_ids].sum(axis=-1)


@dataclass
class RankedResult:
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _query_side(query_vec, transform, h: int) -> np.ndarray:
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (h,):
        raise ContractError(f"query shape {q.shape} does not match index dim {h}")
    return transform.apply(q) if transform is not None else q


def search(query_vec, index: IndexArtifact, params: SearchParams, transform=None) -> RankedResult:
    """Probe the ``nprobe`` lists with the highest query-centroid inner product
    and rank their members by ADC score."""
    params.validate()
    nprobe = params.nprobe
    if nprobe > index.L:
        log.warning("nprobe %d exceeds list count %d; clamping", nprobe, index.L)
        nprobe = index.L
    q = _query_side(query_vec, transform, index.h)
    list_scores = index.centroids.astype(np.float64) @ q
    probe, _ = top_k_desc(list_scores, nprobe)

    sub = index.sub_dim
    partials = np.einsum("mps,ms->mp", index.codebooks.astype(np.float64), q.reshape(index.M, sub))
    ids, scores = [], []
    for lid in probe:
        members = index.posting_lists[lid]
        if members.size == 0:
            continue
        table = AdcTable(float(list_scores[lid]), partials)
        ids.append(members)
        scores.append(table.score(index.pq_ids[members]))
    if not ids:
        return RankedResult(np.zeros(0, dtype=np.int64), np.zeros(0))
    ids_all = np.concatenate(ids)
    top_ids, top_scores = top_k_desc(np.concatenate(scores), params.top_k, ids_all)
    return RankedResult(top_ids, top_scores)


def search_many(queries, index: IndexArtifact, params: SearchParams, transform=None) -> list[RankedResult]:
    values = queries.values if isinstance(queries, EmbeddingSet) else np.asarray(queries)
    return [search(v, index, params, transform) for v in values]


def brute_force_search(query_vec, docs: EmbeddingSet, k: int) -> RankedResult:
    """Exact top-k by inner product over the original dense embeddings."""
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (docs.dim,):
        raise ContractError(f"query shape {q.shape} does not match doc dim {docs.dim}")
    ids, scores = top_k_desc(docs.values.astype(np.float64) @ q, k)
    return RankedResult(ids, scores)


def brute_force_many(queries: EmbeddingSet, docs: EmbeddingSet, k: int, chunk: int = 256) -> list[RankedResult]:
    out = []
    d64 = docs.values.astype(np.float64)
    for s in range(0, queries.count, chunk):
        scores = queries.values[s:s + chunk].astype(np.float64) @ d64.T
        for row in scores:
            ids, sc = top_k_desc(row, k)
            out.append(RankedResult(ids, sc))
    return out


def exhaustive_reconstructed(query_vec, index: IndexArtifact, k: int, transform=None) -> RankedResult:
    """Score every document against its full reconstruction (no probing, no ADC)."""
    q = _query_side(query_vec, transform, index.h)
    ids = np.arange(index.doc_count)
    # sum centroid and residual in float64 so near-zero scores are not swamped by float32 rounding
    recon = (index.reconstruct_ivf_many(ids).astype(np.float64)
             + index.reconstruct_residual_many(ids).astype(np.float64))
    ids, scores = top_k_desc(recon @ q, k)
    return RankedResult(ids, scores)


# --------------------------------------------------------------------------
# metrics


def _result_ids(r) -> np.ndarray:
    return np.asarray(r.ids if isinstance(r, RankedResult) else r)


def _judged(results: Sequence, judgments: RelevanceJudgments):
    if len(results) > len(judgments):
        raise ContractError(f"{len(results)} result lists but only {len(judgments)} judged queries")
    pairs = [(_result_ids(r), judgments[q]) for q, r in enumerate(results) if len(judgments[q])]
    if not pairs:
        raise ContractError("no queries with ground-truth documents")
    return pairs


def recall_at_k(results: Sequence, judgments: RelevanceJudgments, k: int) -> float:
    """Fraction of judged queries with at least one ground-truth doc in the top ``k``."""
    pairs = _judged(results, judgments)
    hits = [np.isin(ids[:k], gt).any() for ids, gt in pairs]
    return float(np.mean(hits))


def mrr_at_k(results: Sequence, judgments: RelevanceJudgments, k: int = 10) -> float:
    """Mean reciprocal rank of the first ground-truth doc within the top ``k`` (0 if absent)."""
    pairs = _judged(results, judgments)
    rr = []
    for ids, gt in pairs:
        hit = np.flatnonzero(np.isin(ids[:k], gt))
        rr.append(1.0 / (hit[0] + 1) if hit.size else 0.0)
    return float(np.mean(rr))


def dense_top1_judgments(queries: EmbeddingSet, docs: EmbeddingSet) -> RelevanceJudgments:
    """Each query's exact inner-product nearest document as its single ground truth."""
    return RelevanceJudgments([r.ids[:1] for r in brute_force_many(queries, docs, 1)])


def evaluate(queries: EmbeddingSet, judgments: RelevanceJudgments, index: IndexArtifact,
             nprobe: int, ks: Sequence[int] = (10, 50, 100), mrr_k: int = 10,
             transform=None) -> dict[str, float]:
    top = max(max(ks), mrr_k)
    results = search_many(queries, index, SearchParams(nprobe, top), transform)
    out = {f"recall@{k}": recall_at_k(results, judgments, k) for k in ks}
    out[f"mrr@{mrr_k}"] = mrr_at_k(results, judgments, mrr_k)
    return out
