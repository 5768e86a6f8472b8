"""Flat ``key = value`` run configuration shared by all CLI commands."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Any

from .errors import ConfigError
from .index import DEFAULT_M, DEFAULT_NLIST, DEFAULT_P

PATH_KEYS = {
    "queries", "docs", "judgments", "index", "topk_cache", "transform", "out_index",
    "out_transform", "log", "checkpoint_dir", "resume", "eval_queries", "eval_judgments",
    "report", "out_dir", "results",
}


@dataclass
class RunConfig:
    # paths
    queries: str | None = None
    docs: str | None = None
    judgments: str | None = None
    index: str | None = None
    topk_cache: str | None = None
    transform: str | None = None
    out_index: str | None = None
    out_transform: str | None = None
    log: str | None = None
    checkpoint_dir: str | None = None
    resume: str | None = None
    eval_queries: str | None = None
    eval_judgments: str | None = None
    report: str | None = None
    out_dir: str | None = None
    results: str | None = None
    # index
    L: int = DEFAULT_NLIST
    M: int = DEFAULT_M
    P: int = DEFAULT_P
    kmeans_iters: int = 25
    kmeans_tol: float = 1e-4
    # distillation
    loss: str = "listnet"
    batch_size: int = 16
    epochs: int = 10
    lr_query: float = 5e-6
    lr_ivf: float = 1e-3
    lr_pq: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    pq_reencode_cadence: int = 1
    ranknet_pairs: str = "ordered"
    # sampling
    use_ground_truth: bool = False
    topk_pool: int = 200
    topk_take: str = "all"
    use_in_batch: bool = True
    # search / eval
    nprobe: int = 100
    top_k: int = 100
    recall_ks: str = "10,50,100"
    mrr_k: int = 10
    nprobe_sweep: str = ""
    json: bool = False
    # synthetic data
    n_docs: int = 20_000
    n_queries: int = 2_000
    n_eval_queries: int = 500
    dim: int = 64
    clusters: int = 50
    cluster_std: float = 1.0
    std_spread: float = 4.0
    query_noise: float = 1.5
    scale: float = 4.0
    synth_judgments: str = "source"
    # misc
    seed: int = 0
    threads: int = 0

    # -- derived views ------------------------------------------------------
    def int_list(self, key: str) -> list[int]:
        raw = getattr(self, key)
        try:
            return [int(x) for x in str(raw).replace(" ", "").split(",") if x]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of integers, got {raw!r}") from None

    def topk_take_value(self) -> str | int:
        if self.topk_take == "all":
            return "all"
        try:
            return int(self.topk_take)
        except ValueError:
            raise ConfigError(f"topk_take must be 'all' or an integer, got {self.topk_take!r}") from None

    def echo(self) -> str:
        return "\n".join(f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return "" if v is None else str(v)


def _coerce(key: str, raw: Any) -> Any:
    typ = _TYPES[key]
    if raw is None:
        return None
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key} ({typ}): {raw!r}") from None
    return text or None if "None" in typ else text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a config from an optional file plus overrides.

    Relative paths in the file resolve against the file's directory;
    override paths are taken as given.
    """
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                file_vals = parse_config_text(fh.read(), path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        base = os.path.dirname(os.path.abspath(path))
        for k, v in file_vals.items():
            if k in PATH_KEYS and v and not os.path.isabs(v):
                v = os.path.join(base, v)
            values[k] = v
    for k, v in (overrides or {}).items():
        if k not in _TYPES:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            values[k] = v
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    for key in ("L", "M", "P", "batch_size", "top_k", "nprobe", "mrr_k", "kmeans_iters"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.P < 2:
        raise ConfigError("P must be >= 2")
    if cfg.epochs < 0 or cfg.topk_pool < 0 or cfg.threads < 0:
        raise ConfigError("epochs, topk_pool and threads must be non-negative")
    if min(cfg.lr_query, cfg.lr_ivf, cfg.lr_pq) <= 0:
        raise ConfigError("learning rates must be positive")
    if cfg.std_spread < 1.0:
        raise ConfigError("std_spread must be >= 1")
    if cfg.synth_judgments not in ("source", "dense_top1"):
        raise ConfigError("synth_judgments must be 'source' or 'dense_top1'")
    cfg.topk_take_value()
    cfg.int_list("recall_ks")
    cfg.int_list("nprobe_sweep")
    try:
        from .losses import LossKind
        LossKind.parse(cfg.loss)
    except ValueError:
        raise ConfigError(f"unknown loss {cfg.loss!r}") from None


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
