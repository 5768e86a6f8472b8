"""Command-line entry point: ``ivfpq-distill <command> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 2 usage/config error, 3 data-format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .core import (EmbeddingSet, RelevanceJudgments, read_embeddings, read_ivecs, read_judgments,
                   write_embeddings, write_ivecs, write_judgments)
from .distill import AdamW, DistillConfig, QueryTransform, train
from .errors import ConfigError, ContractError, DataFormatError, NumericalError
from .index import IndexArtifact, init_index, load_index, save_index
from .sampling import SamplingStrategy, mine_topk
from .search import (SearchParams, dense_top1_judgments, evaluate, search_many)
from .synth import SynthConfig, make_synthetic

log = logging.getLogger("ivfpq_distill")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
COMMANDS = ("build", "mine-topk", "train", "search", "eval", "synth")


class UsageError(Exception):
    pass


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + k for k in missing)}")


def _input(path: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"input file not found: {path}")
    return path


def _load_emb(path: str) -> EmbeddingSet:
    return read_embeddings(_input(path))


def _echo(cfg: RunConfig, command: str) -> None:
    sys.stderr.write(f"# {command}: resolved config\n")
    for line in cfg.echo().splitlines():
        sys.stderr.write(f"#   {line}\n")


# --------------------------------------------------------------------------
# commands


def cmd_build(cfg: RunConfig) -> int:
    _require(cfg, "docs", "index")
    docs = _load_emb(cfg.docs)
    t0 = time.perf_counter()
    index = init_index(docs, cfg.L, cfg.M, cfg.P, cfg.seed, cfg.kmeans_iters, cfg.kmeans_tol)
    save_index(index, cfg.index)
    all_ids = np.arange(docs.count)
    x = docs.values.astype(np.float64)
    ivf_err = ((x - index.reconstruct_ivf_many(all_ids)) ** 2).sum(axis=1).mean()
    full_err = ((x - index.reconstruct_full_many(all_ids)) ** 2).sum(axis=1).mean()
    print(f"built index L={index.L} M={index.M} P={index.P} h={index.h} docs={index.doc_count} "
          f"in {time.perf_counter() - t0:.1f}s")
    print(f"mean_ivf_distortion\t{ivf_err:.6g}")
    print(f"mean_full_distortion\t{full_err:.6g}")
    return 0


def cmd_mine_topk(cfg: RunConfig) -> int:
    _require(cfg, "queries", "docs", "topk_cache")
    queries, docs = _load_emb(cfg.queries), _load_emb(cfg.docs)
    if cfg.topk_pool < 1:
        raise ConfigError("topk_pool must be >= 1 for mine-topk")
    cache = mine_topk(queries, docs, cfg.topk_pool)
    write_ivecs(cache, cfg.topk_cache)
    print(f"mined top-{cache.shape[1]} for {cache.shape[0]} queries -> {cfg.topk_cache}")
    return 0


def _distill_config(cfg: RunConfig) -> DistillConfig:
    return DistillConfig(loss=cfg.loss, batch_size=cfg.batch_size, epochs=cfg.epochs,
                         lr_query=cfg.lr_query, lr_ivf=cfg.lr_ivf, lr_pq=cfg.lr_pq,
                         beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                         weight_decay=cfg.weight_decay, pq_reencode_cadence=cfg.pq_reencode_cadence,
                         ranknet_pairs=cfg.ranknet_pairs, seed=cfg.seed)


def _strategy(cfg: RunConfig) -> SamplingStrategy:
    return SamplingStrategy(use_ground_truth=cfg.use_ground_truth, topk_pool=cfg.topk_pool,
                            topk_take=cfg.topk_take_value(), use_in_batch=cfg.use_in_batch,
                            seed=cfg.seed)


def save_checkpoint(path: str, epoch: int, index: IndexArtifact, transform: QueryTransform,
                    optimizer: AdamW) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, epoch=np.array(epoch), centroids=index.centroids, codebooks=index.codebooks,
                 ivf_ids=index.ivf_ids, pq_ids=index.pq_ids, W=transform.W, b=transform.b,
                 **optimizer.state_arrays())
    os.replace(tmp, path)


def load_checkpoint(path: str, cfg: DistillConfig):
    try:
        with np.load(_input(path)) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, KeyError) as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from None
    index = IndexArtifact(arrays["centroids"], arrays["codebooks"], arrays["ivf_ids"], arrays["pq_ids"])
    transform = QueryTransform(arrays["W"], arrays["b"])
    optimizer = AdamW.for_model(transform, index, cfg)
    optimizer.load_state_arrays(arrays)
    return int(arrays["epoch"]), index, transform, optimizer


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "queries", "docs", "out_index", "out_transform")
    if cfg.resume is None:
        _require(cfg, "index")
    queries, docs = _load_emb(cfg.queries), _load_emb(cfg.docs)
    dcfg = _distill_config(cfg)
    strategy = _strategy(cfg)
    judgments = None
    if cfg.judgments is not None:
        judgments = read_judgments(_input(cfg.judgments), queries.count, docs.count)
    elif cfg.use_ground_truth:
        raise UsageError("use_ground_truth = true requires --judgments")

    topk_cache = None
    if strategy.topk_pool > 0:
        if cfg.topk_cache is not None and os.path.exists(cfg.topk_cache):
            topk_cache = read_ivecs(cfg.topk_cache)
            if len(topk_cache) != queries.count:
                raise DataFormatError(f"{cfg.topk_cache}: {len(topk_cache)} rows for {queries.count} queries")
        else:
            log.info("no Top-K cache supplied; mining top-%d", strategy.topk_pool)
            topk_cache = mine_topk(queries, docs, strategy.topk_pool)

    start_epoch, optimizer = 0, None
    if cfg.resume is not None:
        done, index, transform, optimizer = load_checkpoint(cfg.resume, dcfg)
        start_epoch = done + 1
    else:
        index = load_index(_input(cfg.index))
        transform = (QueryTransform.load(_input(cfg.transform)) if cfg.transform
                     else QueryTransform.identity(index.h))

    evaluate_fn = None
    if cfg.eval_queries and cfg.eval_judgments:
        eq = _load_emb(cfg.eval_queries)
        ej = read_judgments(_input(cfg.eval_judgments), eq.count, docs.count)
        k = max(cfg.int_list("recall_ks") or [cfg.top_k])

        def evaluate_fn(ix, tr):
            return evaluate(eq, ej, ix, min(cfg.nprobe, ix.L), [k], cfg.mrr_k, tr)[f"recall@{k}"]

    log_fh = open(cfg.log, "a" if cfg.resume else "w", encoding="utf-8") if cfg.log else None

    def on_epoch_end(epoch, result):
        if log_fh is not None:
            log_fh.write(result.history[-1].tsv() + "\n")
            log_fh.flush()
        if cfg.checkpoint_dir:
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            save_checkpoint(os.path.join(cfg.checkpoint_dir, f"epoch_{epoch:03d}.npz"),
                            epoch, result.index, result.transform, result.optimizer)

    try:
        result = train(queries, docs, index, dcfg, strategy, judgments, topk_cache, transform,
                       optimizer, start_epoch, evaluate_fn, on_epoch_end)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_index(result.index, cfg.out_index)
    result.transform.save(cfg.out_transform)
    for entry in result.history:
        print(entry.tsv())
    return 0


def cmd_search(cfg: RunConfig) -> int:
    _require(cfg, "queries", "index")
    queries = _load_emb(cfg.queries)
    index = load_index(_input(cfg.index))
    transform = QueryTransform.load(_input(cfg.transform)) if cfg.transform else None
    t0 = time.perf_counter()
    results = search_many(queries, index, SearchParams(cfg.nprobe, cfg.top_k), transform)
    elapsed = time.perf_counter() - t0
    out = open(cfg.results, "w", encoding="utf-8") if cfg.results else sys.stdout
    try:
        for q, r in enumerate(results):
            for rank, (d, s) in enumerate(zip(r.ids, r.scores), 1):
                out.write(f"{q}\t{rank}\t{int(d)}\t{float(s):.7g}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    sys.stderr.write(f"# searched {queries.count} queries in {elapsed:.3f}s\n")
    return 0


def _metric_rows(metrics: dict[str, float], suffix: str = "") -> list[tuple[str, int, float]]:
    rows = []
    for key, value in metrics.items():
        name, k = key.split("@")
        rows.append((name + suffix, int(k), value))
    return rows


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "queries", "index")
    queries = _load_emb(cfg.queries)
    index = load_index(_input(cfg.index))
    if cfg.judgments:
        judgments = read_judgments(_input(cfg.judgments), queries.count, index.doc_count)
    elif cfg.docs:
        judgments = dense_top1_judgments(queries, _load_emb(cfg.docs))
    else:
        raise UsageError("eval needs --judgments, or --docs to derive dense top-1 judgments")
    transform = QueryTransform.load(_input(cfg.transform)) if cfg.transform else None
    ks = cfg.int_list("recall_ks")

    rows = _metric_rows(evaluate(queries, judgments, index, min(cfg.nprobe, index.L), ks, cfg.mrr_k, transform))
    for nprobe in cfg.int_list("nprobe_sweep"):
        m = evaluate(queries, judgments, index, min(nprobe, index.L), ks, cfg.mrr_k, transform)
        rows.extend(_metric_rows(m, f"[nprobe={nprobe}]"))

    if cfg.json:
        obj = {f"{name}@{k}": v for name, k, v in rows}
        obj.update({f"config.{f.name}": getattr(cfg, f.name) for f in fields(cfg)})
        text = json.dumps(obj, sort_keys=True) + "\n"
    else:
        lines = [f"# {line}" for line in cfg.echo().splitlines()]
        lines += [f"{name}\t{k}\t{v:.6f}" for name, k, v in rows]
        text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if cfg.report:
        with open(cfg.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    _require(cfg, "out_dir")
    scfg = SynthConfig(n_docs=cfg.n_docs, n_queries=cfg.n_queries, n_eval_queries=cfg.n_eval_queries,
                       dim=cfg.dim, clusters=cfg.clusters, cluster_std=cfg.cluster_std,
                       std_spread=cfg.std_spread,
                       query_noise=cfg.query_noise, scale=cfg.scale, seed=cfg.seed)
    data = make_synthetic(scfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    j, ej = data.judgments, data.eval_judgments
    if cfg.synth_judgments == "dense_top1":
        j = dense_top1_judgments(data.queries, data.docs)
        ej = dense_top1_judgments(data.eval_queries, data.docs)
    paths = {
        "docs.fvecs": data.docs, "queries.fvecs": data.queries, "eval_queries.fvecs": data.eval_queries,
    }
    for name, emb in paths.items():
        write_embeddings(emb, os.path.join(cfg.out_dir, name))
    write_judgments(j, os.path.join(cfg.out_dir, "judgments.ivecs"))
    write_judgments(ej, os.path.join(cfg.out_dir, "eval_judgments.ivecs"))
    print(f"wrote {data.docs.count} docs, {data.queries.count} queries, "
          f"{data.eval_queries.count} eval queries to {cfg.out_dir}")
    return 0


HANDLERS = {
    "build": cmd_build, "mine-topk": cmd_mine_topk, "train": cmd_train,
    "search": cmd_search, "eval": cmd_eval, "synth": cmd_synth,
}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ivfpq-distill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file; flags override it")
        for f in fields(RunConfig):
            flags = [f"--{f.name}"]
            if "_" in f.name:
                flags.append(f"--{f.name.replace('_', '-')}")
            p.add_argument(*flags, dest=f.name, default=None, metavar="VALUE")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = cfgmod.load_config(args.config, overrides)
        _echo(cfg, args.command)
        limits = contextlib.nullcontext()
        if cfg.threads:
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(cfg.threads)
        with limits:
            return HANDLERS[args.command](cfg)
    except (UsageError, ConfigError, ContractError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except DataFormatError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
