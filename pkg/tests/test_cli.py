import json
import subprocess
import sys

import numpy as np
import pytest

from ivfpq_distill.cli import main
from ivfpq_distill.config import ConfigError, load_config, parse_config_text
from ivfpq_distill.core import EmbeddingSet, read_embeddings, read_ivecs, read_judgments, write_embeddings
from ivfpq_distill.distill import QueryTransform
from ivfpq_distill.index import load_index
from ivfpq_distill.search import brute_force_many, dense_top1_judgments, evaluate

SMALL = ["--n_docs", "300", "--n_queries", "40", "--n_eval_queries", "20", "--dim", "16", "--clusters", "5"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out_dir", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def built(synth_dir):
    path = synth_dir / "base.idx"
    assert main(["build", "--docs", str(synth_dir / "docs.fvecs"), "--index", str(path),
                 "--L", "8", "--M", "4", "--P", "16"]) == 0
    return path


class TestSynth:
    def test_counts(self, synth_dir):
        assert read_embeddings(synth_dir / "docs.fvecs").count == 300
        assert read_embeddings(synth_dir / "queries.fvecs").count == 40
        assert read_embeddings(synth_dir / "eval_queries.fvecs").count == 20
        assert len(read_ivecs(synth_dir / "judgments.ivecs")) == 40
        assert len(read_ivecs(synth_dir / "eval_judgments.ivecs")) == 20

    def test_zero_noise_self_retrieval(self, tmp_path):
        assert main(["synth", "--out_dir", str(tmp_path), *SMALL, "--query_noise", "0"]) == 0
        docs = read_embeddings(tmp_path / "docs.fvecs")
        queries = read_embeddings(tmp_path / "queries.fvecs")
        gt = read_ivecs(tmp_path / "judgments.ivecs")
        for q, res in enumerate(brute_force_many(queries, docs, 1)):
            assert res.ids[0] == gt[q][0]
            np.testing.assert_array_equal(queries[q], docs[gt[q][0]])

    def test_seeds_differ(self, tmp_path):
        main(["synth", "--out_dir", str(tmp_path / "a"), *SMALL, "--seed", "1"])
        main(["synth", "--out_dir", str(tmp_path / "b"), *SMALL, "--seed", "2"])
        main(["synth", "--out_dir", str(tmp_path / "c"), *SMALL, "--seed", "1"])
        a, b, c = ((tmp_path / x / "docs.fvecs").read_bytes() for x in "abc")
        assert a != b and a == c


class TestBuild:
    def test_deterministic_and_loadable(self, synth_dir, built, tmp_path, capsys):
        again = tmp_path / "again.idx"
        assert main(["build", "--docs", str(synth_dir / "docs.fvecs"), "--index", str(again),
                     "--L", "8", "--M", "4", "--P", "16"]) == 0
        assert again.read_bytes() == built.read_bytes()
        out = capsys.readouterr().out
        assert "mean_full_distortion" in out
        idx = load_index(built)
        assert (idx.L, idx.M, idx.P, idx.doc_count) == (8, 4, 16, 300)

    def test_indivisible_dim_exit_2(self, synth_dir, tmp_path, capsys):
        code = main(["build", "--docs", str(synth_dir / "docs.fvecs"), "--index", str(tmp_path / "x.idx"),
                     "--L", "4", "--M", "5", "--P", "4"])
        assert code == 2
        assert "divisible" in capsys.readouterr().err

    def test_missing_input_exit_2(self, tmp_path):
        assert main(["build", "--index", str(tmp_path / "x.idx")]) == 2
        assert main(["build", "--docs", str(tmp_path / "nope.fvecs"), "--index", str(tmp_path / "x.idx")]) == 2
        assert main(["frobnicate"]) == 2

    def test_corrupt_input_exit_3(self, tmp_path):
        bad = tmp_path / "bad.fvecs"
        bad.write_bytes(b"\x04\x00\x00\x00\x00")
        assert main(["build", "--docs", str(bad), "--index", str(tmp_path / "x.idx")]) == 3

    def test_echoes_config(self, synth_dir, tmp_path, capsys):
        main(["build", "--docs", str(synth_dir / "docs.fvecs"), "--index", str(tmp_path / "e.idx"),
              "--L", "4", "--M", "2", "--P", "4"])
        err = capsys.readouterr().err
        assert "resolved config" in err and "L = 4" in err and "lr_ivf = 0.001" in err


class TestMineTopK:
    def test_twin_corpus(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(30, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        write_embeddings(x, tmp_path / "d.fvecs")
        write_embeddings(x[[4, 9, 22]], tmp_path / "q.fvecs")
        assert main(["mine-topk", "--queries", str(tmp_path / "q.fvecs"), "--docs", str(tmp_path / "d.fvecs"),
                     "--topk_cache", str(tmp_path / "k.ivecs"), "--topk_pool", "1"]) == 0
        assert [r.tolist() for r in read_ivecs(tmp_path / "k.ivecs")] == [[4], [9], [22]]

    def test_matches_brute_force_and_clamps(self, synth_dir, tmp_path):
        assert main(["mine-topk", "--queries", str(synth_dir / "queries.fvecs"),
                     "--docs", str(synth_dir / "docs.fvecs"), "--topk_cache", str(tmp_path / "k.ivecs"),
                     "--topk_pool", "500"]) == 0
        rows = read_ivecs(tmp_path / "k.ivecs")
        assert len(rows[0]) == 300
        ref = brute_force_many(read_embeddings(synth_dir / "queries.fvecs"),
                               read_embeddings(synth_dir / "docs.fvecs"), 300)
        for r, res in zip(rows, ref):
            np.testing.assert_array_equal(r, res.ids)


def _train_args(synth_dir, built, tmp_path, tag, *extra):
    return ["train", "--queries", str(synth_dir / "queries.fvecs"), "--docs", str(synth_dir / "docs.fvecs"),
            "--index", str(built), "--out_index", str(tmp_path / f"{tag}.idx"),
            "--out_transform", str(tmp_path / f"{tag}.qt"), "--topk_pool", "20",
            "--lr_ivf", "0.01", "--lr_pq", "0.01", *extra]


class TestTrain:
    def test_zero_epochs_is_identity(self, synth_dir, built, tmp_path):
        assert main(_train_args(synth_dir, built, tmp_path, "z", "--epochs", "0")) == 0
        assert (tmp_path / "z.idx").read_bytes() == built.read_bytes()
        t = QueryTransform.load(tmp_path / "z.qt")
        np.testing.assert_array_equal(t.W, np.eye(16))

    def test_log_finite_and_resume(self, synth_dir, built, tmp_path):
        log = tmp_path / "full.tsv"
        assert main(_train_args(synth_dir, built, tmp_path, "full", "--epochs", "3", "--log", str(log),
                                "--checkpoint_dir", str(tmp_path / "ck"))) == 0
        losses = [float(line.split("\t")[1]) for line in log.read_text().splitlines()]
        assert len(losses) == 3 and all(np.isfinite(losses))
        assert main(_train_args(synth_dir, built, tmp_path, "resumed", "--epochs", "3",
                                "--resume", str(tmp_path / "ck" / "epoch_000.npz"))) == 0
        assert (tmp_path / "resumed.idx").read_bytes() == (tmp_path / "full.idx").read_bytes()
        assert (tmp_path / "resumed.qt").read_bytes() == (tmp_path / "full.qt").read_bytes()

    def test_ground_truth_needs_judgments(self, synth_dir, built, tmp_path):
        assert main(_train_args(synth_dir, built, tmp_path, "g", "--use_ground_truth", "true")) == 2


class TestSearchEval:
    def test_search_tsv(self, synth_dir, built, tmp_path):
        out = tmp_path / "res.tsv"
        assert main(["search", "--queries", str(synth_dir / "eval_queries.fvecs"), "--index", str(built),
                     "--nprobe", "2", "--top_k", "5", "--results", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 20 * 5
        assert lines[0].split("\t")[:2] == ["0", "1"]

    def test_eval_matches_direct_call(self, synth_dir, built, capsys):
        assert main(["eval", "--queries", str(synth_dir / "eval_queries.fvecs"), "--index", str(built),
                     "--judgments", str(synth_dir / "eval_judgments.ivecs"), "--nprobe", "3", "--json",
                     "true"]) == 0
        got = json.loads(capsys.readouterr().out)
        queries = read_embeddings(synth_dir / "eval_queries.fvecs")
        gt = read_judgments(synth_dir / "eval_judgments.ivecs", queries.count, 300)
        direct = evaluate(queries, gt, load_index(built), 3)
        for key, value in direct.items():
            assert got[key] == pytest.approx(value, abs=1e-12)
        assert got["config.nprobe"] == 3

    def test_perfect_index_and_sweep(self, tmp_path, capsys):
        x = np.random.default_rng(1).normal(size=(16, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        write_embeddings(x, tmp_path / "d.fvecs")
        assert main(["build", "--docs", str(tmp_path / "d.fvecs"), "--index", str(tmp_path / "p.idx"),
                     "--L", "16", "--M", "2", "--P", "4"]) == 0
        capsys.readouterr()
        assert main(["eval", "--queries", str(tmp_path / "d.fvecs"), "--docs", str(tmp_path / "d.fvecs"),
                     "--index", str(tmp_path / "p.idx"), "--nprobe", "16", "--recall_ks", "1,10",
                     "--nprobe_sweep", "1,2,4,8,16"]) == 0
        out = capsys.readouterr().out
        rows = [line.split("\t") for line in out.splitlines() if not line.startswith("#")]
        head = {(n, int(k)): float(v) for n, k, v in rows if "[" not in n}
        assert head == {("recall", 1): 1.0, ("recall", 10): 1.0, ("mrr", 10): 1.0}
        sweep = [float(v) for n, k, v in rows if n.startswith("recall[") and k == "10"]
        assert len(sweep) == 5 and sweep == sorted(sweep)
        assert any(line.startswith("# nprobe") for line in out.splitlines())

    def test_eval_without_judgments_or_docs(self, synth_dir, built):
        assert main(["eval", "--queries", str(synth_dir / "eval_queries.fvecs"), "--index", str(built)]) == 2


class TestConfigFile:
    def test_file_and_override(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("# comment\nL = 32\nlr_ivf = 0.5\ndocs = data/d.fvecs\nuse_in_batch = false\n")
        cfg = load_config(cfg_path, {"L": "64"})
        assert cfg.L == 64 and cfg.lr_ivf == 0.5 and cfg.use_in_batch is False
        assert cfg.docs == str(tmp_path / "data" / "d.fvecs")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("colour = blue\n")

    def test_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "ivfpq_distill.cli", "synth", "--out-dir", str(tmp_path),
                               "--n-docs", "10", "--n-queries", "2", "--n-eval-queries", "1", "--dim", "4",
                               "--clusters", "2"], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert read_embeddings(tmp_path / "docs.fvecs").count == 10
