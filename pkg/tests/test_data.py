import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hubprobe import data as dt
from hubprobe.errors import (
    BadFraction,
    BadFractions,
    BadMagic,
    CorruptIndex,
    DataError,
    EmptyIntersection,
    IoError,
    MissingEmbedding,
    VersionUnsupported,
)


def _rec(task, image, lang, target=None):
    return dt.DatapointRecord(task, image, lang, candidate_ids=("c0", "c1"), gt_index=0, target_object=target)


def _foil(image, lang, label, pair):
    return dt.DatapointRecord("FOIL", image, lang, label=label, meta={"pair_id": pair})


def _random_raw(seed):
    """Random per-task item counts over a partly shared image pool."""
    rng = np.random.default_rng(seed)
    images = [f"img{i}" for i in range(rng.integers(3, 12))]
    raw = {}
    for t in dt.RETRIEVAL_TASKS:
        present = [im for im in images if rng.random() < 0.8]
        recs = []
        for im in present:
            for j in range(rng.integers(1, 6)):
                target = f"obj{rng.integers(0, 3)}" if rng.random() < 0.7 else None
                recs.append(_rec(t, im, f"{t}-{im}-{j}", target))
        raw[t] = recs
    return raw


class TestBank:
    def test_round_trip_bit_exact(self, tmp_path):
        bank = dt.EmbeddingBank(["a", "b", "c"], np.arange(12, dtype=np.float32).reshape(3, 4) / 7)
        dt.save_bank(bank, tmp_path / "x.hube")
        back = dt.load_bank(tmp_path / "x.hube")
        assert back == bank
        assert back.data.tobytes() == bank.data.tobytes()
        assert back.ids == ["a", "b", "c"]

    def test_save_is_deterministic(self, tmp_path):
        bank = dt.EmbeddingBank(["a", "b"], np.ones((2, 3)))
        dt.save_bank(bank, tmp_path / "1.hube")
        dt.save_bank(bank, tmp_path / "2.hube")
        assert (tmp_path / "1.hube").read_bytes() == (tmp_path / "2.hube").read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.hube"
        dt.save_bank(dt.EmbeddingBank(["a"], np.ones((1, 2))), p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            dt.load_bank(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "x.hube"
        dt.save_bank(dt.EmbeddingBank(["a"], np.ones((1, 2))), p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionUnsupported):
            dt.load_bank(p)

    def test_repeated_manifest_row(self, tmp_path):
        p = tmp_path / "x.hube"
        dt.save_bank(dt.EmbeddingBank(["a", "b"], np.ones((2, 2))), p)
        dt.manifest_path(p).write_text("0\ta\n0\tb\n")
        with pytest.raises(CorruptIndex):
            dt.load_bank(p)

    def test_duplicate_ids(self):
        with pytest.raises(CorruptIndex):
            dt.EmbeddingBank(["a", "a"], np.ones((2, 2)))

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(IoError, match="nothere"):
            dt.load_bank(tmp_path / "nothere.hube")

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "x.hube"
        dt.save_bank(dt.EmbeddingBank(["a"], np.ones((1, 4))), p)
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(IoError):
            dt.load_bank(p)

    def test_gather(self):
        bank = dt.EmbeddingBank(["a", "b"], [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(bank.gather(["b", "a"]), [[3.0, 4.0], [1.0, 2.0]])
        with pytest.raises(MissingEmbedding):
            bank.vector("z")

    def test_non_finite(self):
        with pytest.raises(DataError):
            dt.EmbeddingBank(["a"], [[np.nan, 1.0]])


class TestRecords:
    def test_jsonl_round_trip(self, tmp_path):
        recs = [
            _rec("VQA", "i1", "q1", "dog"),
            _foil("i1", "c1", "original", "p1"),
            _foil("i1", "c1f", "foiled", "p1"),
        ]
        dt.save_dataset(recs, tmp_path / "d.jsonl")
        assert dt.load_dataset(tmp_path / "d.jsonl") == recs

    def test_validation(self):
        with pytest.raises(DataError):
            dt.DatapointRecord("Other", "i", "l")
        with pytest.raises(DataError):
            dt.DatapointRecord("FOIL", "i", "l")
        with pytest.raises(DataError):
            dt.DatapointRecord("VQA", "i", "l", candidate_ids=("a", "a"))
        with pytest.raises(DataError):
            dt.DatapointRecord("VQA", "i", "l", candidate_ids=("a",), gt_index=1)

    def test_label_index(self):
        assert _foil("i", "l", "original", "p").label_index == 0
        assert _foil("i", "l", "foiled", "p").label_index == 1

    def test_malformed_line(self, tmp_path):
        (tmp_path / "d.jsonl").write_text("{not json\n")
        with pytest.raises(DataError, match=":1:"):
            dt.load_dataset(tmp_path / "d.jsonl")


class TestCommonDataset:
    def test_k_is_minimum(self):
        raw = {
            "VQA": [_rec("VQA", "i1", f"q{j}") for j in range(3)],
            "ReferIt": [_rec("ReferIt", "i1", f"r{j}") for j in range(2)],
            "GuessWhat": [_rec("GuessWhat", "i1", f"g{j}") for j in range(5)],
        }
        out = dt.build_common_dataset(raw)
        assert [len(out[t]) for t in dt.RETRIEVAL_TASKS] == [2, 2, 2]

    def test_image_missing_from_one_task_is_dropped(self):
        raw = {
            "VQA": [_rec("VQA", "i1", "q1"), _rec("VQA", "i2", "q2")],
            "ReferIt": [_rec("ReferIt", "i1", "r1"), _rec("ReferIt", "i2", "r2")],
            "GuessWhat": [_rec("GuessWhat", "i1", "g1")],
        }
        out = dt.build_common_dataset(raw)
        for t in dt.RETRIEVAL_TASKS:
            assert {r.image_id for r in out[t]} == {"i1"}

    def test_empty_intersection(self):
        raw = {
            "VQA": [_rec("VQA", "i1", "q1")],
            "ReferIt": [_rec("ReferIt", "i2", "r1")],
            "GuessWhat": [_rec("GuessWhat", "i1", "g1")],
        }
        with pytest.raises(EmptyIntersection):
            dt.build_common_dataset(raw)

    def test_prefers_shared_targets(self):
        raw = {
            "VQA": [_rec("VQA", "i1", "q0", "cat"), _rec("VQA", "i1", "q1", "dog")],
            "ReferIt": [_rec("ReferIt", "i1", "r0", "dog"), _rec("ReferIt", "i1", "r1", "bus")],
            "GuessWhat": [_rec("GuessWhat", "i1", "g0", "cup"), _rec("GuessWhat", "i1", "g1", "dog"),
                          _rec("GuessWhat", "i1", "g2", "car")],
        }
        # k = 2, one dog triple is anchored, the rest is topped up at random
        for seed in range(10):
            out = dt.build_common_dataset(raw, seed=seed)
            for t in dt.RETRIEVAL_TASKS:
                assert len(out[t]) == 2
                assert "dog" in {r.target_object for r in out[t]}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_properties_on_random_inputs(self, seed):
        raw = _random_raw(seed)
        shared = set.intersection(*({r.image_id for r in raw[t]} for t in dt.RETRIEVAL_TASKS))
        if not shared:
            with pytest.raises(EmptyIntersection):
                dt.build_common_dataset(raw, seed=seed)
            return
        out = dt.build_common_dataset(raw, seed=seed)
        counts_in = {t: Counter(r.image_id for r in raw[t]) for t in dt.RETRIEVAL_TASKS}
        counts_out = {t: Counter(r.image_id for r in out[t]) for t in dt.RETRIEVAL_TASKS}
        for t in dt.RETRIEVAL_TASKS:
            # intersection
            assert set(counts_out[t]) == shared
            # records come from the input, without repeats
            ids = [r.language_id for r in out[t]]
            assert len(set(ids)) == len(ids)
            assert set(ids) <= {r.language_id for r in raw[t]}
        for image in shared:
            k = min(counts_in[t][image] for t in dt.RETRIEVAL_TASKS)
            # exactly k per task
            assert all(counts_out[t][image] == k for t in dt.RETRIEVAL_TASKS)

    def test_deterministic(self):
        raw = _random_raw(11)
        assert dt.build_common_dataset(raw, seed=3) == dt.build_common_dataset(raw, seed=3)


class TestSplits:
    def _records(self, n_images, per_image=2):
        return [_rec("VQA", f"i{i}", f"q{i}-{j}") for i in range(n_images) for j in range(per_image)]

    def test_disjoint_and_complete(self):
        recs = self._records(50)
        s = dt.split_by_image(recs, (0.7, 0.15, 0.15), seed=4)
        parts = [{r.image_id for r in p} for p in (s.train, s.validation, s.test)]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        assert sum(len(p) for p in (s.train, s.validation, s.test)) == len(recs)
        assert [len(p) for p in parts] == [35, 8, 7]

    def test_deterministic(self):
        recs = self._records(30)
        a = dt.split_by_image(recs, (0.5, 0.5), seed=1)
        b = dt.split_by_image(recs, (0.5, 0.5), seed=1)
        c = dt.split_by_image(recs, (0.5, 0.5), seed=2)
        assert a.train == b.train
        assert a.train != c.train

    def test_single_fraction(self):
        recs = self._records(5)
        s = dt.split_by_image(recs, (1.0,), seed=0)
        assert s.train == recs and s.validation == [] and s.test == []

    def test_counts_at_corpus_scale(self):
        assert dt.split_counts(14_458, (0.9032, 0.0968)) == [13_058, 1_400]

    @pytest.mark.parametrize("fractions", [(0.5, 0.6), (1.2, -0.2), (), (0.25,) * 4])
    def test_bad_fractions(self, fractions):
        with pytest.raises(BadFractions):
            dt.split_by_image(self._records(4), fractions, seed=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.integers(3, 40))
    def test_image_level_disjointness(self, seed, n):
        recs = self._records(n, per_image=3)
        s = dt.split_by_image(recs, (0.6, 0.2, 0.2), seed=seed)
        owner = {}
        for part, records in enumerate((s.train, s.validation, s.test)):
            for r in records:
                assert owner.setdefault(r.image_id, part) == part


class TestSubset:
    def test_half(self):
        recs = [_rec("VQA", f"i{i}", f"q{i}") for i in range(100)]
        assert len(dt.subset_fraction(recs, 0.5, seed=0)) == 50

    def test_nested(self):
        recs = [_rec("VQA", f"i{i}", f"q{i}") for i in range(200)]
        prev = set()
        for f in (0.001, 0.01, 0.1, 0.5, 1.0):
            cur = {r.language_id for r in dt.subset_fraction(recs, f, seed=7)}
            assert prev <= cur
            prev = cur
        assert prev == {r.language_id for r in recs}

    def test_smallest_fraction_keeps_an_image(self):
        recs = [_rec("VQA", f"i{i}", f"q{i}") for i in range(200)]
        assert len(dt.subset_fraction(recs, 0.001, seed=0)) == 1

    def test_pairs_stay_together(self):
        recs = []
        for i in range(40):
            recs += [_foil(f"i{i}", f"c{i}", "original", f"p{i}"), _foil(f"i{i}", f"f{i}", "foiled", f"p{i}")]
        sub = dt.subset_fraction(recs, 0.3, seed=2)
        pairs = Counter(r.meta["pair_id"] for r in sub)
        assert set(pairs.values()) == {2}
        assert len(pairs) == 12

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, f):
        with pytest.raises(BadFraction):
            dt.subset_fraction([_rec("VQA", "i", "q")], f, seed=0)
