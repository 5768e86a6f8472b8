"""Embedding containers, similarity primitives and fvecs/ivecs/TSV I/O.

Vector files use the texmex layout: every record is a little-endian int32
dimension followed by that many float32 (fvecs) or int32 (ivecs) values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataFormatError

_I32 = np.dtype("<i4")
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable row-major float32 matrix of query or document embeddings.

    Row indices are the ids used everywhere else in the package.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ContractError(f"embeddings must be a (count, dim>=1) matrix, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            row = int(np.argwhere(~np.isfinite(arr))[0, 0])
            raise ContractError(f"non-finite value in embedding row {row}")
        if arr is self.values:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingSet":
        return cls(np.zeros((0, dim), dtype=np.float32))

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, idx):
        return self.values[idx]


@dataclass
class RelevanceJudgments:
    """Ground-truth document ids per query row (lists may be empty)."""

    per_query: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_lists(cls, lists: Iterable[Sequence[int]], n_docs: int | None = None) -> "RelevanceJudgments":
        out = cls([np.asarray(list(ids), dtype=np.int64) for ids in lists])
        out.validate(n_docs)
        return out

    def validate(self, n_docs: int | None = None) -> None:
        for q, ids in enumerate(self.per_query):
            if ids.size and ids.min() < 0:
                raise ContractError(f"query {q}: negative document id")
            if n_docs is not None and ids.size and ids.max() >= n_docs:
                raise ContractError(f"query {q}: document id {int(ids.max())} >= doc count {n_docs}")
            if np.unique(ids).size != ids.size:
                raise ContractError(f"query {q}: duplicate document ids")

    def __len__(self) -> int:
        return len(self.per_query)

    def __getitem__(self, q: int) -> np.ndarray:
        return self.per_query[q]


# --------------------------------------------------------------------------
# similarity primitives


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def inner_product(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.dot(a, b))


def l2_distance_sq(a, b) -> float:
    a, b = _check_pair(a, b)
    d = a - b
    return float(np.dot(d, d))


def pairwise_l2_sq(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Squared l2 distances between rows of ``x`` and rows of ``c``.

    Differences are formed explicitly (no ||x||^2 - 2xc + ||c||^2 expansion)
    so argmins agree exactly with a per-pair scan.
    """
    x = np.asarray(x)
    c = np.asarray(c, dtype=np.float64)
    out = np.empty((x.shape[0], c.shape[0]), dtype=np.float64)
    rows = max(1, chunk * 64 // max(1, c.shape[0] * c.shape[1]))
    for s in range(0, x.shape[0], rows):
        diff = x[s:s + rows, None, :].astype(np.float64) - c[None, :, :]
        np.einsum("ijk,ijk->ij", diff, diff, out=out[s:s + rows])
    return out


def argmin_l2(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Nearest row of ``c`` for every row of ``x``; ties go to the lowest index."""
    if c.shape[0] == 0:
        raise ContractError("empty centroid set")
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(pairwise_l2_sq(x, c), axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# file I/O


def write_embeddings(emb: EmbeddingSet | np.ndarray, path: str | os.PathLike) -> None:
    values = emb.values if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float32)
    _write_records(values.astype(_F32, copy=False), path)


def read_embeddings(path: str | os.PathLike, dim: int | None = None) -> EmbeddingSet:
    """Load an fvecs file. ``dim`` is required only to type an empty file."""
    raw = _read_records(path, _F32)
    if raw is None:
        if dim is None:
            raise DataFormatError(f"{path}: empty file; dimension must be supplied")
        return EmbeddingSet.empty(dim)
    values, rec_bytes = raw
    if dim is not None and values.shape[1] != dim:
        raise DataFormatError(f"{path}: record dim {values.shape[1]} != expected {dim} at byte offset 0")
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = (int(v) for v in np.argwhere(bad)[0])
        off = r * rec_bytes + 4 + 4 * c
        raise DataFormatError(f"{path}: non-finite value in record {r} at byte offset {off}")
    return EmbeddingSet(values)


def write_ivecs(rows: Sequence[Sequence[int]] | np.ndarray, path: str | os.PathLike) -> None:
    """Write variable-length integer records ([int32 n][n x int32])."""
    with open(path, "wb") as fh:
        for row in rows:
            arr = np.asarray(row, dtype=_I32)
            fh.write(np.int32(arr.size).astype(_I32).tobytes())
            fh.write(arr.tobytes())


def read_ivecs(path: str | os.PathLike) -> list[np.ndarray]:
    data = np.fromfile(path, dtype=_I32)
    out, pos = [], 0
    while pos < data.size:
        n = int(data[pos])
        if n < 0 or pos + 1 + n > data.size:
            raise DataFormatError(f"{path}: truncated or corrupt record {len(out)} at byte offset {4 * pos}")
        out.append(data[pos + 1:pos + 1 + n].astype(np.int64))
        pos += 1 + n
    return out


def _write_records(values: np.ndarray, path) -> None:
    n, d = values.shape
    buf = np.empty((n, d + 1), dtype=_F32)
    buf[:, 0] = np.full(n, d, dtype=_I32).view(_F32)
    buf[:, 1:] = values
    with open(path, "wb") as fh:
        fh.write(buf.tobytes())


def _read_records(path, dtype):
    data = np.fromfile(path, dtype=np.uint8)
    if data.size == 0:
        return None
    if data.size < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset 0")
    d = int(data[:4].view(_I32)[0])
    if d <= 0:
        raise DataFormatError(f"{path}: invalid dimension {d} at byte offset 0")
    rec = 4 * (d + 1)
    n_full = data.size // rec
    # validate every per-record header before trusting the reshape
    usable = data[: n_full * rec].view(_I32).reshape(n_full, d + 1)
    hdr_bad = np.flatnonzero(usable[:, 0] != d)
    if hdr_bad.size:
        r = int(hdr_bad[0])
        raise DataFormatError(
            f"{path}: record {r} has dim {int(usable[r, 0])} != {d} at byte offset {r * rec}")
    if data.size % rec:
        raise DataFormatError(f"{path}: truncated record {n_full} at byte offset {n_full * rec}")
    return usable[:, 1:].copy().view(dtype), rec


def read_judgments(path: str | os.PathLike, n_queries: int | None = None,
                   n_docs: int | None = None) -> RelevanceJudgments:
    """Read judgments from an ivecs file or a ``query<TAB>doc`` TSV (by extension)."""
    path = os.fspath(path)
    if path.endswith((".tsv", ".txt")):
        lists: dict[int, list[int]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataFormatError(f"{path}:{lineno}: expected 'query<TAB>doc'")
                try:
                    q, d = int(parts[0]), int(parts[1])
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: non-integer id") from None
                lst = lists.setdefault(q, [])
                if d not in lst:
                    lst.append(d)
        size = max(lists, default=-1) + 1
        if n_queries is not None:
            if size > n_queries:
                raise DataFormatError(f"{path}: query id {size - 1} >= query count {n_queries}")
            size = n_queries
        rows = [lists.get(q, []) for q in range(size)]
    else:
        rows = read_ivecs(path)
        if n_queries is not None:
            if len(rows) > n_queries:
                raise DataFormatError(f"{path}: {len(rows)} records for {n_queries} queries")
            rows = rows + [np.zeros(0, dtype=np.int64)] * (n_queries - len(rows))
    try:
        return RelevanceJudgments.from_lists(rows, n_docs)
    except ContractError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_judgments(judgments: RelevanceJudgments, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    if path.endswith((".tsv", ".txt")):
        with open(path, "w", encoding="utf-8") as fh:
            for q, ids in enumerate(judgments.per_query):
                for d in ids:
                    fh.write(f"{q}\t{int(d)}\n")
    else:
        write_ivecs(judgments.per_query, path)


def top_k_desc(scores, k: int, ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Top ``k`` entries by descending score, ties broken by ascending id.

    ``ids`` defaults to positions. Returns ``(ids, scores)`` in rank order.
    """
    scores = np.asarray(scores)
    ids = np.arange(scores.size) if ids is None else np.asarray(ids)
    n = scores.size
    k = min(int(k), n)
    if k <= 0:
        return ids[:0].astype(np.int64), scores[:0]
    if k < n:
        # everything strictly above the k-th largest value, plus all ties at it
        thr = np.partition(scores, n - k)[n - k]
        keep = np.flatnonzero(scores >= thr)
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:k]
    return ids[order].astype(np.int64), scores[order]
