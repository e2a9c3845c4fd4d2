import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anisoalign.errors import (
    DegenerateRow,
    FormatError,
    InsufficientSamples,
    InvalidInput,
    InvalidSplit,
    PairMismatch,
)
from anisoalign import store
from anisoalign.store import (
    EmbeddingSet,
    PairedSet,
    SplitSpec,
    canonical_order,
    l2_normalize,
    load,
    save,
    split,
)


def f32_matrix(rng, n, d):
    return rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)


class TestRoundTrip:
    def test_bitwise_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = f32_matrix(rng, 3, 4)
        eset = EmbeddingSet(data=data, modality="target")
        path = tmp_path / "a.embd"
        save(eset, path)
        back = load(path, modality="target")
        assert np.array_equal(back.data, data)
        assert back.modality == "target"

    def test_save_load_save_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        eset = EmbeddingSet(data=f32_matrix(rng, 7, 5))
        p1, p2 = tmp_path / "a.embd", tmp_path / "b.embd"
        save(eset, p1)
        save(load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, tmp_path):
        eset = EmbeddingSet(data=np.zeros((2, 3)))
        path = tmp_path / "a.embd"
        save(eset, path)
        raw = path.read_bytes()
        assert raw[:4] == b"EMBD"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:16], "little") == 2
        assert int.from_bytes(raw[16:20], "little") == 3
        assert raw[20] == 0  # float32
        assert raw[21:28] == b"\0" * 7
        assert len(raw) == 28 + 2 * 3 * 4

    def test_truncated_file(self, tmp_path):
        eset = EmbeddingSet(data=np.zeros((4, 4)))
        path = tmp_path / "a.embd"
        save(eset, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load(path)

    def test_shape_mismatch(self, tmp_path):
        eset = EmbeddingSet(data=np.zeros((3, 2)))
        path = tmp_path / "a.embd"
        save(eset, path)
        raw = bytearray(path.read_bytes())
        raw[8:16] = (2).to_bytes(8, "little")  # header says 2 rows, payload has 3
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.embd"
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(FormatError):
            load(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "a.embd"
        eset = EmbeddingSet(data=np.ones((2, 2)))
        save(eset, path)
        raw = bytearray(path.read_bytes())
        raw[28:32] = np.array([np.inf], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(InvalidInput):
            load(path)

    @given(n=st.integers(1, 20), d=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_property_roundtrip(self, tmp_path_factory, n, d, seed):
        rng = np.random.default_rng(seed)
        data = f32_matrix(rng, n, d)
        path = tmp_path_factory.mktemp("rt") / "x.embd"
        save(EmbeddingSet(data=data), path)
        assert np.array_equal(load(path).data, data)


class TestManifest:
    def test_fields(self, tmp_path):
        rng = np.random.default_rng(2)
        eset = l2_normalize(EmbeddingSet(data=f32_matrix(rng, 5, 3), modality="text"))
        path = tmp_path / "a.embd"
        save(eset, path)
        m = store.save_manifest(eset, path)
        assert set(m) == {"path", "modality", "n", "d", "normalized", "sha256"}
        assert m["n"] == 5 and m["d"] == 3 and m["normalized"] is True
        # sidecar read back informs load
        back = load(path)
        assert back.modality == "text"
        assert back.normalized

    def test_hash_mismatch_detected(self, tmp_path):
        rng = np.random.default_rng(3)
        eset = EmbeddingSet(data=f32_matrix(rng, 4, 2))
        path = tmp_path / "a.embd"
        save(eset, path)
        store.save_manifest(eset, path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load(path)


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(EmbeddingSet(data=np.array([[3.0, 4.0]])))
        assert np.allclose(out.data, [[0.6, 0.8]])
        assert out.normalized

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        a = l2_normalize(EmbeddingSet(data=rng.standard_normal((10, 6))))
        b = l2_normalize(a)
        assert np.abs(a.data - b.data).max() < 1e-12

    def test_zero_row(self):
        data = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateRow) as err:
            l2_normalize(EmbeddingSet(data=data))
        assert err.value.index == 1


class TestSplit:
    def _pairs(self, n=10, d=3, seed=0):
        rng = np.random.default_rng(seed)
        return PairedSet(
            x=EmbeddingSet(data=rng.standard_normal((n, d)), modality="target"),
            y=EmbeddingSet(data=rng.standard_normal((n, d)), modality="source"),
        )

    def test_disjoint_cover(self):
        pairs = self._pairs(10)
        est, held = split(pairs, SplitSpec(0.5, 7))
        assert est.n == 5 and held.n == 5
        all_rows = np.vstack([est.x.data, held.x.data])
        joined = np.vstack([pairs.x.data])
        assert (
            np.sort(all_rows.view([("", all_rows.dtype)] * 3), axis=0).tobytes()
            == np.sort(joined.view([("", joined.dtype)] * 3), axis=0).tobytes()
        )

    def test_reproducible(self):
        pairs = self._pairs(20)
        a = split(pairs, SplitSpec(0.3, 5))
        b = split(pairs, SplitSpec(0.3, 5))
        assert np.array_equal(a[0].x.data, b[0].x.data)
        assert np.array_equal(a[1].y.data, b[1].y.data)

    def test_pairing_preserved(self):
        pairs = self._pairs(12)
        est, _ = split(pairs, SplitSpec(0.5, 3))
        for i in range(est.n):
            j = np.where((pairs.x.data == est.x.data[i]).all(axis=1))[0][0]
            assert np.array_equal(pairs.y.data[j], est.y.data[i])

    def test_empty_part_rejected(self):
        with pytest.raises(InvalidSplit):
            split(self._pairs(10), SplitSpec(0.999, 0))

    def test_too_few(self):
        with pytest.raises(InsufficientSamples):
            split(self._pairs(1), SplitSpec(0.5, 0))

    def test_pair_mismatch_rejected(self):
        with pytest.raises(PairMismatch):
            PairedSet(
                x=EmbeddingSet(data=np.zeros((3, 2))),
                y=EmbeddingSet(data=np.zeros((4, 2))),
            )


class TestCanonicalOrder:
    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        data = rng.standard_normal((50, 4))
        perm = rng.permutation(50)
        a = data[canonical_order(data)]
        b = data[perm][canonical_order(data[perm])]
        assert np.array_equal(a, b)
