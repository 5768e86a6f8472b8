import numpy as np
import pytest

from ivfpq_distill.core import EmbeddingSet, l2_distance_sq
from ivfpq_distill.errors import ChecksumError, ContractError, VersionError
from ivfpq_distill.index import (DEFAULT_M, DEFAULT_NLIST, DEFAULT_P, DocumentCode, IndexArtifact,
                                 encode_document, index_from_bytes, index_to_bytes, init_index,
                                 load_index, reconstruct_full, reconstruct_ivf, reencode_pq,
                                 save_index)


def _scan(v, rows):
    ds = [l2_distance_sq(v, r) for r in rows]
    return int(np.argmin(ds))  # argmin returns the first minimum


def _brute_code(v, O, C):
    ivf = _scan(v, O)
    res = np.asarray(v, dtype=np.float32) - O[ivf]
    sub = C.shape[2]
    return ivf, [_scan(res[m * sub:(m + 1) * sub], C[m]) for m in range(C.shape[0])]


@pytest.fixture(scope="module")
def random_index():
    docs = EmbeddingSet(np.random.default_rng(0).normal(size=(500, 16)))
    return docs, init_index(docs, L=8, M=4, P=16, seed=1)


def test_full_scale_default_sizes():
    assert (DEFAULT_NLIST, DEFAULT_M, DEFAULT_P) == (10_000, 64, 256)


class TestInit:
    def test_one_hot_docs_lossless_ivf(self):
        docs = EmbeddingSet(np.eye(4))
        idx = init_index(docs, L=4, M=2, P=2, seed=0)
        assert all(len(p) == 1 for p in idx.posting_lists)
        for d in range(4):
            np.testing.assert_array_equal(reconstruct_ivf(idx.code(d), idx.centroids), docs[d])

    def test_single_list_residuals(self):
        x = np.random.default_rng(1).normal(size=(40, 6)).astype(np.float32)
        idx = init_index(EmbeddingSet(x), L=1, M=3, P=4, seed=0)
        np.testing.assert_allclose(idx.centroids[0], x.astype(np.float64).mean(0), atol=1e-6)
        assert np.all(idx.ivf_ids == 0)

    def test_pq_reduces_distortion(self, random_index):
        docs, idx = random_index
        ids = np.arange(docs.count)
        x = docs.values.astype(np.float64)
        ivf_err = ((x - idx.reconstruct_ivf_many(ids)) ** 2).sum(1)
        full_err = ((x - idx.reconstruct_full_many(ids)) ** 2).sum(1)
        assert full_err.mean() < ivf_err.mean()
        # each document's pq ids are the per-subspace optimum for its residual
        for d in range(0, docs.count, 25):
            assert _brute_code(docs[d], idx.centroids, idx.codebooks) == (idx.ivf_ids[d], idx.pq_ids[d].tolist())

    def test_partition(self, random_index):
        random_index[1].check_partition()

    def test_indivisible_dim(self):
        with pytest.raises(ContractError):
            init_index(EmbeddingSet(np.ones((5, 6))), L=2, M=4, P=2)

    def test_lists_exceed_docs(self):
        idx = init_index(EmbeddingSet(np.random.default_rng(2).normal(size=(5, 4))), L=8, M=2, P=16)
        assert idx.L == 8 and idx.P == 16
        idx.check_partition()


class TestEncode:
    def test_zero_residual(self):
        rng = np.random.default_rng(3)
        O = rng.normal(size=(4, 6)).astype(np.float32)
        C = rng.normal(size=(3, 5, 2)).astype(np.float32)
        C[:, 0] = 0.0
        assert encode_document(O[2], O, C) == DocumentCode(2, (0, 0, 0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        O = rng.normal(size=(6, 8)).astype(np.float32)
        C = rng.normal(size=(4, 7, 2)).astype(np.float32)
        for _ in range(1000):
            v = rng.normal(size=8).astype(np.float32)
            code = encode_document(v, O, C)
            assert (code.ivf_id, list(code.pq_ids)) == _brute_code(v, O, C)

    def test_identical_docs_identical_codes(self, random_index):
        docs, idx = random_index
        assert encode_document(docs[7], idx.ivf, idx.pq) == encode_document(docs[7].copy(), idx.ivf, idx.pq)


class TestReconstruct:
    def test_ivf_row(self):
        O = np.eye(3, dtype=np.float32)
        np.testing.assert_array_equal(reconstruct_ivf(DocumentCode(0, (0,)), O), O[0])

    def test_ivf_is_nearest(self, random_index):
        docs, idx = random_index
        for d in range(0, 500, 10):
            rec = reconstruct_ivf(encode_document(docs[d], idx.ivf, idx.pq), idx.centroids)
            best = min(l2_distance_sq(docs[d], o) for o in idx.centroids)
            assert l2_distance_sq(docs[d], rec) == best

    def test_sees_updates(self, random_index):
        _, idx = random_index
        idx = idx.copy()
        code = idx.code(0)
        idx.centroids[code.ivf_id] += 1.0
        np.testing.assert_array_equal(reconstruct_ivf(code, idx.centroids), idx.centroids[code.ivf_id])

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            reconstruct_ivf(DocumentCode(5, ()), np.zeros((2, 2)))
        with pytest.raises(ContractError):
            reconstruct_full(DocumentCode(0, (9,)), np.zeros((2, 2)), np.zeros((1, 4, 2)))

    def test_zero_codebooks(self, random_index):
        _, idx = random_index
        zero = np.zeros_like(idx.codebooks)
        code = idx.code(3)
        np.testing.assert_array_equal(reconstruct_full(code, idx.centroids, zero),
                                      reconstruct_ivf(code, idx.centroids))

    def test_compositional(self, random_index):
        docs, idx = random_index
        for d in range(0, 500, 50):
            code = idx.code(d)
            segs = np.concatenate([idx.codebooks[m, j] for m, j in enumerate(code.pq_ids)])
            np.testing.assert_array_equal(reconstruct_full(code, idx.ivf, idx.pq),
                                          reconstruct_ivf(code, idx.ivf) + segs)

    def test_error_matches_scalar_loop(self, random_index):
        docs, idx = random_index
        sub = idx.sub_dim
        for d in range(0, 500, 50):
            code = idx.code(d)
            err = 0.0
            for i in range(idx.h):
                recon = float(idx.centroids[code.ivf_id][i]) + float(idx.codebooks[i // sub, code.pq_ids[i // sub], i % sub])
                err += (float(docs[d][i]) - recon) ** 2
            full = reconstruct_full(code, idx.centroids, idx.codebooks)
            assert l2_distance_sq(docs[d], full) == pytest.approx(err, rel=1e-5)


class TestReencode:
    def test_idempotent(self, random_index):
        docs, idx = random_index
        idx = idx.copy()
        before = idx.pq_ids.copy()
        reencode_pq(idx, docs)
        np.testing.assert_array_equal(idx.pq_ids, before)

    def test_duplicate_codeword_tie_goes_low(self, random_index):
        docs, idx = random_index
        idx = idx.copy()
        idx.codebooks[1, 9] = idx.codebooks[1, 4]
        reencode_pq(idx, docs)
        assert not np.any(idx.pq_ids[:, 1] == 9)

    def test_keeps_ivf_and_matches_encode(self, random_index):
        docs, idx = random_index
        idx = idx.copy()
        rng = np.random.default_rng(5)
        idx.centroids += rng.normal(scale=0.3, size=idx.centroids.shape).astype(np.float32)
        idx.codebooks += rng.normal(scale=0.3, size=idx.codebooks.shape).astype(np.float32)
        ivf = idx.ivf_ids.copy()
        reencode_pq(idx, docs)
        np.testing.assert_array_equal(idx.ivf_ids, ivf)
        idx.check_partition()
        sub = idx.sub_dim
        for d in range(500):
            res = docs[d] - idx.centroids[ivf[d]]
            expected = [_scan(res[m * sub:(m + 1) * sub], idx.codebooks[m]) for m in range(idx.M)]
            assert idx.pq_ids[d].tolist() == expected


class TestSerialization:
    def test_round_trip_bytes(self, random_index, tmp_path):
        _, idx = random_index
        save_index(idx, tmp_path / "a.idx")
        back = load_index(tmp_path / "a.idx")
        save_index(back, tmp_path / "b.idx")
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()
        np.testing.assert_array_equal(back.pq_ids, idx.pq_ids)
        back.check_partition()

    def test_truncated(self, random_index):
        blob = index_to_bytes(random_index[1])
        with pytest.raises(ChecksumError):
            index_from_bytes(blob[:-10])

    def test_corrupt_byte(self, random_index):
        blob = bytearray(index_to_bytes(random_index[1]))
        blob[100] ^= 0xFF
        with pytest.raises(ChecksumError):
            index_from_bytes(bytes(blob))

    def test_version_mismatch(self, random_index):
        import struct
        import zlib
        blob = bytearray(index_to_bytes(random_index[1]))
        blob[4:8] = struct.pack("<I", 99)
        body = bytes(blob[:-4])
        with pytest.raises(VersionError):
            index_from_bytes(body + struct.pack("<I", zlib.crc32(body)))

    def test_empty_index(self):
        idx = IndexArtifact(np.zeros((2, 4)), np.zeros((2, 3, 2)), np.zeros(0), np.zeros((0, 2)))
        back = index_from_bytes(index_to_bytes(idx))
        assert back.doc_count == 0
        assert index_to_bytes(back) == index_to_bytes(idx)

    def test_wide_codes(self):
        rng = np.random.default_rng(6)
        idx = IndexArtifact(rng.normal(size=(2, 4)), rng.normal(size=(2, 300, 2)),
                            rng.integers(2, size=10), rng.integers(300, size=(10, 2)))
        back = index_from_bytes(index_to_bytes(idx))
        np.testing.assert_array_equal(back.pq_ids, idx.pq_ids)
