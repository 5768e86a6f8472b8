"""IVF + residual PQ index: parameters, document codes and the on-disk format.

Layout of an index file (all little-endian)::

    magic  b"IVPQ"      4 bytes
    version            uint32
    L, M, P, h         uint32 x 4
    doc_count          uint64
    centroids          L*h float32
    codebooks          M*P*(h/M) float32
    ivf_ids            doc_count uint32
    pq_ids             doc_count*M uint8 (P <= 256) or uint16
    list_sizes         L uint32
    list_members       doc_count uint32, lists concatenated in IVF-id order
    crc32              uint32 over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .clustering import KMeansConfig, kmeans
from .core import EmbeddingSet, argmin_l2
from .errors import ChecksumError, ContractError, DataFormatError, VersionError

MAGIC = b"IVPQ"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")

# full-scale defaults; desk-scale runs override them
DEFAULT_NLIST = 10_000
DEFAULT_M = 64
DEFAULT_P = 256


class DocumentCode(NamedTuple):
    ivf_id: int
    pq_ids: tuple[int, ...]


@dataclass
class IvfCentroids:
    centroids: np.ndarray  # (L, h)

    @property
    def L(self) -> int:
        return self.centroids.shape[0]

    @property
    def h(self) -> int:
        return self.centroids.shape[1]


@dataclass
class PqCodebooks:
    codebooks: np.ndarray  # (M, P, h/M)

    @property
    def M(self) -> int:
        return self.codebooks.shape[0]

    @property
    def P(self) -> int:
        return self.codebooks.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.codebooks.shape[2]


def _param_array(a) -> np.ndarray:
    # float32 storage; float64 is kept as-is for gradient checking
    a = np.asarray(a)
    dtype = np.float64 if a.dtype == np.float64 else np.float32
    return np.ascontiguousarray(a, dtype=dtype)


def _as_centroids(o) -> np.ndarray:
    return o.centroids if isinstance(o, IvfCentroids) else np.asarray(o)


def _as_codebooks(c) -> np.ndarray:
    return c.codebooks if isinstance(c, PqCodebooks) else np.asarray(c)


class IndexArtifact:
    """Learnable quantizer parameters plus the per-document codes.

    ``centroids`` and ``codebooks`` are mutated in place by training; the
    reconstruction helpers always read the live arrays.
    """

    def __init__(self, centroids: np.ndarray, codebooks: np.ndarray,
                 ivf_ids: np.ndarray, pq_ids: np.ndarray):
        self.centroids = _param_array(centroids)
        self.codebooks = _param_array(codebooks)
        self.ivf_ids = np.asarray(ivf_ids, dtype=np.int64)
        self.pq_ids = np.asarray(pq_ids, dtype=np.int64).reshape(-1, self.codebooks.shape[0])
        self._validate_shapes()
        self.rebuild_posting_lists()

    # -- shape helpers ------------------------------------------------------
    @property
    def L(self) -> int:
        return self.centroids.shape[0]

    @property
    def h(self) -> int:
        return self.centroids.shape[1]

    @property
    def M(self) -> int:
        return self.codebooks.shape[0]

    @property
    def P(self) -> int:
        return self.codebooks.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.codebooks.shape[2]

    @property
    def doc_count(self) -> int:
        return self.ivf_ids.shape[0]

    @property
    def ivf(self) -> IvfCentroids:
        return IvfCentroids(self.centroids)

    @property
    def pq(self) -> PqCodebooks:
        return PqCodebooks(self.codebooks)

    def _validate_shapes(self) -> None:
        L, h = self.centroids.shape
        M, P, sub = self.codebooks.shape
        if L < 1 or P < 2 or M < 1:
            raise ContractError(f"invalid index sizes L={L} M={M} P={P}")
        if M * sub != h:
            raise ContractError(f"codebooks cover {M}x{sub} dims but centroids have h={h}")
        if self.pq_ids.shape[0] != self.ivf_ids.shape[0]:
            raise ContractError("ivf_ids and pq_ids disagree on document count")
        if self.ivf_ids.size and (self.ivf_ids.min() < 0 or self.ivf_ids.max() >= L):
            raise ContractError("ivf id out of range")
        if self.pq_ids.size and (self.pq_ids.min() < 0 or self.pq_ids.max() >= P):
            raise ContractError("pq id out of range")

    def rebuild_posting_lists(self) -> None:
        order = np.argsort(self.ivf_ids, kind="stable")
        sizes = np.bincount(self.ivf_ids, minlength=self.L)
        self.posting_lists: list[np.ndarray] = np.split(order, np.cumsum(sizes)[:-1])

    def check_partition(self) -> None:
        """Raise if posting lists do not partition ``[0, doc_count)`` consistently with the codes."""
        seen = np.zeros(self.doc_count, dtype=np.int64)
        for lid, members in enumerate(self.posting_lists):
            if members.size and np.any(self.ivf_ids[members] != lid):
                raise ContractError(f"posting list {lid} holds a document coded to another list")
            np.add.at(seen, members, 1)
        if np.any(seen != 1):
            raise ContractError("posting lists do not partition the document ids")

    def code(self, doc: int) -> DocumentCode:
        return DocumentCode(int(self.ivf_ids[doc]), tuple(int(j) for j in self.pq_ids[doc]))

    def copy(self) -> "IndexArtifact":
        return IndexArtifact(self.centroids.copy(), self.codebooks.copy(),
                             self.ivf_ids.copy(), self.pq_ids.copy())

    # -- bulk reconstruction -----------------------------------------------
    def reconstruct_ivf_many(self, docs) -> np.ndarray:
        return self.centroids[self.ivf_ids[docs]]

    def reconstruct_residual_many(self, docs) -> np.ndarray:
        docs = np.asarray(docs)
        segs = [self.codebooks[m, self.pq_ids[docs, m]] for m in range(self.M)]
        return np.concatenate(segs, axis=-1)

    def reconstruct_full_many(self, docs) -> np.ndarray:
        return self.reconstruct_ivf_many(docs) + self.reconstruct_residual_many(docs)


# --------------------------------------------------------------------------
# encoding


def _pq_assign(residuals: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    M, _, sub = codebooks.shape
    out = np.empty((residuals.shape[0], M), dtype=np.int64)
    for m in range(M):
        out[:, m] = argmin_l2(residuals[:, m * sub:(m + 1) * sub], codebooks[m])
    return out


def encode_document(v, O, C) -> DocumentCode:
    """Nearest centroid, then nearest codeword per subspace of the residual."""
    o = _as_centroids(O)
    c = _as_codebooks(C)
    v = np.asarray(v, dtype=np.float32).reshape(1, -1)
    if v.shape[1] != o.shape[1] or c.shape[0] * c.shape[2] != o.shape[1]:
        raise ContractError("dimension mismatch between vector, centroids and codebooks")
    ivf = int(argmin_l2(v, o)[0])
    pq = _pq_assign(v - o[ivf], c)[0]
    return DocumentCode(ivf, tuple(int(j) for j in pq))


def encode_all(docs: np.ndarray, O, C) -> tuple[np.ndarray, np.ndarray]:
    o = _as_centroids(O)
    c = _as_codebooks(C)
    ivf = argmin_l2(docs, o)
    pq = _pq_assign(docs - o[ivf], c) if docs.shape[0] else np.zeros((0, c.shape[0]), dtype=np.int64)
    return ivf, pq


def reconstruct_ivf(code: DocumentCode, O) -> np.ndarray:
    o = _as_centroids(O)
    if not 0 <= code.ivf_id < o.shape[0]:
        raise ContractError(f"ivf id {code.ivf_id} out of range [0, {o.shape[0]})")
    return o[code.ivf_id].copy()


def reconstruct_full(code: DocumentCode, O, C) -> np.ndarray:
    c = _as_codebooks(C)
    if len(code.pq_ids) != c.shape[0]:
        raise ContractError(f"code has {len(code.pq_ids)} pq ids, index has {c.shape[0]} codebooks")
    for j in code.pq_ids:
        if not 0 <= j < c.shape[1]:
            raise ContractError(f"pq id {j} out of range [0, {c.shape[1]})")
    res = np.concatenate([c[m, j] for m, j in enumerate(code.pq_ids)])
    return reconstruct_ivf(code, O) + res


def init_index(docs: EmbeddingSet, L: int, M: int, P: int, seed: int = 0,
               max_iters: int = 25, rel_tolerance: float = 1e-4) -> IndexArtifact:
    """Vanilla IVFPQ: k-means centroids, then k-means codebooks on post-IVF residuals."""
    if docs.count == 0:
        raise ContractError("cannot initialise an index from an empty document set")
    h = docs.dim
    if M < 1 or h % M:
        raise ContractError(f"embedding dim {h} is not divisible by M={M}")
    if P < 2:
        raise ContractError(f"P must be >= 2, got {P}")
    x = docs.values
    centroids = kmeans(x, KMeansConfig(L, max_iters, seed, rel_tolerance))
    ivf = argmin_l2(x, centroids)
    residuals = x - centroids[ivf]
    sub = h // M
    codebooks = np.empty((M, P, sub), dtype=np.float32)
    for m in range(M):
        cfg = KMeansConfig(P, max_iters, seed + 1 + m, rel_tolerance)
        codebooks[m] = kmeans(residuals[:, m * sub:(m + 1) * sub], cfg)
    pq = _pq_assign(residuals, codebooks)
    return IndexArtifact(centroids, codebooks, ivf, pq)


def reencode_pq(index: IndexArtifact, docs: EmbeddingSet | np.ndarray) -> np.ndarray:
    """Refresh PQ ids against the current parameters, keeping IVF ids pinned."""
    x = docs.values if isinstance(docs, EmbeddingSet) else np.asarray(docs)
    if x.shape != (index.doc_count, index.h):
        raise ContractError(f"docs shape {x.shape} does not match index ({index.doc_count}, {index.h})")
    residuals = x - index.centroids[index.ivf_ids]
    index.pq_ids = _pq_assign(residuals, index.codebooks)
    return index.pq_ids


# --------------------------------------------------------------------------
# serialization


def index_to_bytes(index: IndexArtifact) -> bytes:
    pq_dtype = "<u1" if index.P <= 256 else "<u2"
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, index.L, index.M, index.P, index.h, index.doc_count),
        index.centroids.astype("<f4").tobytes(),
        index.codebooks.astype("<f4").tobytes(),
        index.ivf_ids.astype("<u4").tobytes(),
        index.pq_ids.astype(pq_dtype).tobytes(),
        np.array([len(p) for p in index.posting_lists], dtype="<u4").tobytes(),
    ]
    parts.extend(p.astype("<u4").tobytes() for p in index.posting_lists)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def index_from_bytes(blob: bytes) -> IndexArtifact:
    if len(blob) < _HEADER.size + 4:
        raise ChecksumError("index file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("index checksum mismatch (truncated or corrupt file)")
    magic, version, L, M, P, h, n = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported index format version {version}")
    if M == 0 or h % M:
        raise DataFormatError(f"header h={h} not divisible by M={M}")
    pq_dtype = np.dtype("<u1" if P <= 256 else "<u2")
    pos = _HEADER.size

    def take(dtype, count):
        nonlocal pos
        dtype = np.dtype(dtype)
        end = pos + dtype.itemsize * count
        if end > len(body):
            raise DataFormatError(f"index body truncated at byte offset {pos}")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos)
        pos = end
        return arr

    centroids = take("<f4", L * h).reshape(L, h)
    codebooks = take("<f4", M * P * (h // M)).reshape(M, P, h // M)
    ivf = take("<u4", n).astype(np.int64)
    pq = take(pq_dtype, n * M).astype(np.int64).reshape(n, M)
    sizes = take("<u4", L).astype(np.int64)
    members = take("<u4", int(sizes.sum())).astype(np.int64)
    if pos != len(body):
        raise DataFormatError(f"{len(body) - pos} trailing bytes after index body")
    try:
        index = IndexArtifact(centroids.copy(), codebooks.copy(), ivf, pq)
    except ContractError as exc:
        raise DataFormatError(str(exc)) from None
    index.posting_lists = np.split(members, np.cumsum(sizes)[:-1])
    try:
        index.check_partition()
    except ContractError as exc:
        raise DataFormatError(str(exc)) from None
    return index


def save_index(index: IndexArtifact, path) -> None:
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


def load_index(path) -> IndexArtifact:
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())
