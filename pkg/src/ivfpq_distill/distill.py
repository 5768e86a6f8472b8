"""Distillation trainer for IVF centroids, PQ codebooks and a query transform.

Teacher scores come from the fixed dense embeddings. Student scores come
from the transformed query against the reconstructed documents, once with
the IVF centroid only and once with centroid plus PQ residual. The trainer
minimises the sum of both losses over every query in a batch, using
hand-derived gradients and AdamW with one learning rate per parameter group.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import EmbeddingSet, RelevanceJudgments
from .errors import ConfigError, ContractError, DataFormatError, NumericalError
from .index import IndexArtifact, reencode_pq
from .losses import LossKind, get_loss, loss_ranknet
from .sampling import CandidateSet, SamplingStrategy, sample_candidates

log = logging.getLogger(__name__)

# learning rates for the query side, IVF centroids and PQ codebooks
DEFAULT_LR_QUERY = 5e-6
DEFAULT_LR_IVF = 1e-3
DEFAULT_LR_PQ = 1e-4


class QueryTransform:
    """Affine map ``W @ v + b`` applied to fixed query embeddings."""

    MAGIC = b"QTRF"
    VERSION = 1

    def __init__(self, W: np.ndarray, b: np.ndarray):
        W = np.asarray(W)
        dtype = np.float64 if W.dtype == np.float64 else np.float32
        self.W = np.ascontiguousarray(W, dtype=dtype)
        self.b = np.ascontiguousarray(b, dtype=dtype)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1] or self.b.shape != (self.W.shape[0],):
            raise ContractError(f"transform shapes W{self.W.shape} b{self.b.shape} are inconsistent")

    @classmethod
    def identity(cls, h: int, dtype=np.float32) -> "QueryTransform":
        return cls(np.eye(h, dtype=dtype), np.zeros(h, dtype=dtype))

    @property
    def h(self) -> int:
        return self.b.shape[0]

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.h:
            raise ContractError(f"query dim {v.shape[-1]} != transform dim {self.h}")
        return v @ self.W.T.astype(np.float64) + self.b.astype(np.float64)

    def copy(self) -> "QueryTransform":
        return QueryTransform(self.W.copy(), self.b.copy())

    def to_bytes(self) -> bytes:
        body = (struct.pack("<4sII", self.MAGIC, self.VERSION, self.h)
                + self.W.astype("<f4").tobytes() + self.b.astype("<f4").tobytes())
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QueryTransform":
        if len(blob) < 16 or zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
            raise DataFormatError("transform checksum mismatch (truncated or corrupt file)")
        magic, version, h = struct.unpack_from("<4sII", blob, 0)
        if magic != cls.MAGIC or version != cls.VERSION:
            raise DataFormatError(f"not a version-{cls.VERSION} transform file")
        if len(blob) != 12 + 4 * (h * h + h) + 4:
            raise DataFormatError("transform file size does not match its header")
        W = np.frombuffer(blob, "<f4", h * h, 12).reshape(h, h)
        b = np.frombuffer(blob, "<f4", h, 12 + 4 * h * h)
        return cls(W.astype(np.float32), b.astype(np.float32))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "QueryTransform":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class DistillConfig:
    loss: LossKind = LossKind.LISTNET
    batch_size: int = 16
    epochs: int = 10
    lr_query: float = DEFAULT_LR_QUERY
    lr_ivf: float = DEFAULT_LR_IVF
    lr_pq: float = DEFAULT_LR_PQ
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    pq_reencode_cadence: int = 1  # epochs between PQ refreshes; 0 disables
    ranknet_pairs: str = "ordered"
    seed: int = 0

    def __post_init__(self):
        self.loss = LossKind.parse(self.loss)

    def validate(self) -> None:
        if min(self.lr_query, self.lr_ivf, self.lr_pq) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid AdamW hyper-parameters")
        if self.weight_decay < 0 or self.pq_reencode_cadence < 0:
            raise ConfigError("weight_decay and pq_reencode_cadence must be non-negative")
        if self.ranknet_pairs not in ("ordered", "preferred"):
            raise ConfigError(f"ranknet_pairs must be 'ordered' or 'preferred', got {self.ranknet_pairs!r}")


# --------------------------------------------------------------------------
# scoring


def student_scores(q_row: int, doc_ids, transform: QueryTransform, index: IndexArtifact,
                   mode: str, queries: EmbeddingSet) -> np.ndarray:
    """``<W v_q + b, recon(d)>`` with the IVF-only (``"ivf"``) or full (``"pq"``) reconstruction."""
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    if doc_ids.size and (doc_ids.min() < 0 or doc_ids.max() >= index.doc_count):
        raise ContractError("document id out of range")
    vt = transform.apply(queries.values[q_row])
    mode = mode.lower()
    if mode == "ivf":
        rec = index.reconstruct_ivf_many(doc_ids)
    elif mode == "pq":
        rec = index.reconstruct_full_many(doc_ids)
    else:
        raise ContractError(f"unknown student mode {mode!r}")
    return rec.astype(np.float64) @ vt


@dataclass
class Gradients:
    loss: float
    W: np.ndarray
    b: np.ndarray
    centroids: np.ndarray
    codebooks: np.ndarray
    touched_centroids: np.ndarray  # bool (L,)
    touched_codewords: np.ndarray  # bool (M, P)
    per_query_loss: list[float] = field(default_factory=list)

    def norm(self) -> float:
        return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                 for g in (self.W, self.b, self.centroids, self.codebooks))))


def _flatten(cands: Sequence[CandidateSet]):
    sizes = np.array([len(c) for c in cands], dtype=np.int64)
    qi = np.repeat(np.arange(len(cands)), sizes)
    docs = np.concatenate([c.doc_ids for c in cands]) if len(cands) else np.zeros(0, np.int64)
    t = np.concatenate([c.teacher_scores for c in cands]) if len(cands) else np.zeros(0)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return qi, docs.astype(np.int64), t.astype(np.float64), offsets


def backward(cands: Sequence[CandidateSet], queries: EmbeddingSet, transform: QueryTransform,
             index: IndexArtifact, loss: LossKind | str, ranknet_pairs: str = "ordered") -> Gradients:
    """Loss and gradients of the summed IVF + PQ objective over a batch.

    Document assignments are hard and treated as constants. Only centroids
    and codewords assigned to some candidate get non-zero gradient; they are
    flagged in ``touched_centroids`` / ``touched_codewords``.
    """
    kind = LossKind.parse(loss)
    fn = get_loss(kind)
    if kind is LossKind.RANKNET:
        def fn(t, s):
            return loss_ranknet(t, s, pairs=ranknet_pairs)

    B = len(cands)
    L, M, P, sub = index.L, index.M, index.P, index.sub_dim
    rows = np.array([c.query_row for c in cands], dtype=np.int64)
    vq = queries.values[rows].astype(np.float64)
    W = transform.W.astype(np.float64)
    vt = vq @ W.T + transform.b.astype(np.float64)
    O = index.centroids.astype(np.float64)
    C = index.codebooks.astype(np.float64)

    qi, docs, t, offsets = _flatten(cands)
    ivf = index.ivf_ids[docs]
    pq = index.pq_ids[docs]

    # ADC-style tables: per query, score against every centroid / codeword
    tab_ivf = vt @ O.T
    s_ivf = tab_ivf[qi, ivf]
    s_pq = s_ivf.copy()
    for m in range(M):
        tab = vt[:, m * sub:(m + 1) * sub] @ C[m].T
        s_pq += tab[qi, pq[:, m]]

    g_ivf = np.zeros_like(s_ivf)
    g_pq = np.zeros_like(s_pq)
    total = 0.0
    per_query = []
    for i in range(B):
        sl = slice(offsets[i], offsets[i + 1])
        la, ga = fn(t[sl], s_ivf[sl])
        lb, gb = fn(t[sl], s_pq[sl])
        g_ivf[sl] = ga
        g_pq[sl] = gb
        per_query.append(la + lb)
        total += la + lb

    # both scores share the centroid term
    w_ivf = np.bincount(qi * L + ivf, weights=g_ivf + g_pq, minlength=B * L).reshape(B, L)
    grad_O = w_ivf.T @ vt
    grad_vt = w_ivf @ O
    grad_C = np.zeros_like(C)
    touched_C = np.zeros((M, P), dtype=bool)
    for m in range(M):
        w = np.bincount(qi * P + pq[:, m], weights=g_pq, minlength=B * P).reshape(B, P)
        grad_C[m] = w.T @ vt[:, m * sub:(m + 1) * sub]
        grad_vt[:, m * sub:(m + 1) * sub] += w @ C[m]
        touched_C[m, pq[:, m]] = True
    touched_O = np.zeros(L, dtype=bool)
    touched_O[ivf] = True

    return Gradients(
        loss=float(total),
        W=(grad_vt.T @ vq).astype(transform.W.dtype),
        b=grad_vt.sum(axis=0).astype(transform.b.dtype),
        centroids=grad_O.astype(index.centroids.dtype),
        codebooks=grad_C.astype(index.codebooks.dtype),
        touched_centroids=touched_O,
        touched_codewords=touched_C,
        per_query_loss=per_query,
    )


def batch_loss(cands, queries, transform, index, loss, ranknet_pairs: str = "ordered") -> float:
    """Objective value only (used by finite-difference checks)."""
    kind = LossKind.parse(loss)
    fn = get_loss(kind)
    total = 0.0
    for c in cands:
        for mode in ("ivf", "pq"):
            s = student_scores(c.query_row, c.doc_ids, transform, index, mode, queries)
            if kind is LossKind.RANKNET:
                total += loss_ranknet(c.teacher_scores, s, pairs=ranknet_pairs)[0]
            else:
                total += fn(c.teacher_scores, s)[0]
    return total


# --------------------------------------------------------------------------
# optimizer


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0, rows: np.ndarray | None = None) -> None:
    """One in-place AdamW update (decoupled weight decay, bias-corrected moments).

    ``step`` is 1-based. With ``rows`` (a boolean mask over the leading
    axes of ``param``) only those rows are decayed and updated; their moments
    advance while other rows are left untouched.
    """
    if not np.isfinite(grad).all():
        raise NumericalError("non-finite gradient; optimizer step aborted")
    if rows is not None:
        p, g, mm, vv = param[rows], grad[rows], m[rows], v[rows]
    else:
        p, g, mm, vv = param, grad, m, v
    p = p.astype(np.float64)
    g = g.astype(np.float64)
    mm = beta1 * mm + (1.0 - beta1) * g
    vv = beta2 * vv + (1.0 - beta2) * g * g
    m_hat = mm / (1.0 - beta1 ** step)
    v_hat = vv / (1.0 - beta2 ** step)
    p = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    if rows is not None:
        param[rows], m[rows], v[rows] = p, mm, vv
    else:
        param[...], m[...], v[...] = p, mm, vv


@dataclass
class ParamGroup:
    name: str
    param: np.ndarray
    lr: float
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.param.shape, dtype=np.float64)
        if self.v is None:
            self.v = np.zeros(self.param.shape, dtype=np.float64)


class AdamW:
    """AdamW over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: Sequence[ParamGroup], beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.groups = {g.name: g for g in groups}
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.step_count = 0

    @classmethod
    def for_model(cls, transform: QueryTransform, index: IndexArtifact, cfg: DistillConfig) -> "AdamW":
        groups = [
            ParamGroup("W", transform.W, cfg.lr_query),
            ParamGroup("b", transform.b, cfg.lr_query),
            ParamGroup("centroids", index.centroids, cfg.lr_ivf),
            ParamGroup("codebooks", index.codebooks, cfg.lr_pq),
        ]
        return cls(groups, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, grads: dict[str, np.ndarray], rows: dict[str, np.ndarray] | None = None) -> None:
        rows = rows or {}
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {name}; optimizer step aborted")
        self.step_count += 1
        for name, g in grads.items():
            grp = self.groups[name]
            adamw_step(grp.param, g, grp.m, grp.v, self.step_count, grp.lr, self.beta1, self.beta2,
                       self.eps, self.weight_decay, rows.get(name))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array(self.step_count)}
        for name, g in self.groups.items():
            out[f"m_{name}"] = g.m
            out[f"v_{name}"] = g.v
        return out

    def load_state_arrays(self, arrays) -> None:
        self.step_count = int(arrays["step_count"])
        for name, g in self.groups.items():
            g.m[...] = arrays[f"m_{name}"]
            g.v[...] = arrays[f"v_{name}"]


# --------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    recall: float | None = None

    def tsv(self) -> str:
        rec = "" if self.recall is None else f"{self.recall:.6f}"
        return f"{self.epoch}\t{self.mean_loss:.8g}\t{rec}"


@dataclass
class TrainResult:
    index: IndexArtifact
    transform: QueryTransform
    history: list[EpochLog]
    optimizer: AdamW


def train(queries: EmbeddingSet, docs: EmbeddingSet, index: IndexArtifact,
          config: DistillConfig, strategy: SamplingStrategy,
          judgments: RelevanceJudgments | None = None, topk_cache=None,
          transform: QueryTransform | None = None, optimizer: AdamW | None = None,
          start_epoch: int = 0,
          evaluate: Callable[[IndexArtifact, QueryTransform], float] | None = None,
          on_epoch_end: Callable[[int, "TrainResult"], None] | None = None) -> TrainResult:
    """Run distillation epochs, mutating ``index`` and ``transform`` in place.

    Each epoch shuffles the training queries with an RNG derived from
    ``(seed, epoch)`` so a run resumed from an epoch checkpoint (with the
    optimizer state) replays the uninterrupted run exactly.
    """
    config.validate()
    strategy.validate(config.batch_size)
    if queries.dim != docs.dim or docs.dim != index.h:
        raise ContractError("query, document and index dimensions disagree")
    if docs.count != index.doc_count:
        raise ContractError("index was built for a different document set")
    if transform is None:
        transform = QueryTransform.identity(index.h, dtype=index.centroids.dtype)
    if optimizer is None:
        optimizer = AdamW.for_model(transform, index, config)

    result = TrainResult(index, transform, [], optimizer)
    n = queries.count
    for epoch in range(start_epoch, config.epochs):
        snapshot = (index.centroids.copy(), index.codebooks.copy(), transform.W.copy(), transform.b.copy())
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        total, seen = 0.0, 0
        try:
            for s in range(0, n, config.batch_size):
                batch = order[s:s + config.batch_size]
                cands = sample_candidates(batch, strategy, queries, docs, judgments, topk_cache, rng)
                cands = [c for c in cands if len(c)]
                if not cands:
                    continue
                grads = backward(cands, queries, transform, index, config.loss, config.ranknet_pairs)
                if not np.isfinite(grads.loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {s}")
                optimizer.step(
                    {"W": grads.W, "b": grads.b, "centroids": grads.centroids, "codebooks": grads.codebooks},
                    {"centroids": grads.touched_centroids, "codebooks": grads.touched_codewords},
                )
                total += grads.loss
                seen += len(cands)
        except NumericalError:
            index.centroids[...], index.codebooks[...], transform.W[...], transform.b[...] = snapshot
            raise
        if config.pq_reencode_cadence and (epoch + 1) % config.pq_reencode_cadence == 0:
            reencode_pq(index, docs)
        entry = EpochLog(epoch, total / max(seen, 1), evaluate(index, transform) if evaluate else None)
        result.history.append(entry)
        log.info("epoch %d loss %.6g%s", epoch, entry.mean_loss,
                 "" if entry.recall is None else f" recall {entry.recall:.4f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, result)
    return result
