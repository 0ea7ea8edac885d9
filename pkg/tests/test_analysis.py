import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hubprobe import analysis as an
from hubprobe.data import DatapointRecord, EmbeddingBank
from hubprobe.encoder import EncoderDims, encoder_from_seed
from hubprobe.errors import (
    BadK,
    DataError,
    EmptyCategory,
    MissingVariant,
    SizeMismatch,
    TooSmallForDerangement,
    ZeroNorm,
)

import oracles


def _polar(degrees):
    a = np.radians(degrees)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


def _random_orthogonal(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _disjoint_pairs():
    """Six items whose 1-NN partners differ between the two spaces."""
    def clusters(pairs):
        X = np.zeros((6, 3))
        for c, (i, j) in enumerate(pairs):
            X[i] = np.eye(3)[c] + 0.1 * np.eye(3)[(c + 1) % 3]
            X[j] = np.eye(3)[c] + 0.1 * np.eye(3)[(c + 2) % 3]
        return X
    return clusters([(0, 1), (2, 3), (4, 5)]), clusters([(1, 2), (3, 4), (5, 0)])


class TestSimVector:
    @pytest.mark.parametrize("n", range(2, 51))
    def test_length(self, n):
        x = np.random.default_rng(n).normal(size=(n, 4))
        assert len(an.pairwise_sim_vector(x)) == n * (n - 1) // 2

    def test_identical_vectors(self):
        np.testing.assert_allclose(an.pairwise_sim_vector(np.ones((4, 3))), 1.0, atol=1e-15)

    def test_hand_oracle(self):
        x = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        np.testing.assert_allclose(an.pairwise_sim_vector(x), [0.0, 1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-15)

    def test_order_matches_loop(self):
        x = np.random.default_rng(0).normal(size=(6, 5))
        np.testing.assert_allclose(an.pairwise_sim_vector(x), oracles.upper_triangle_cosines(x.tolist()), atol=1e-14)

    def test_representation_set_checks(self):
        with pytest.raises(DataError):
            an.RepresentationSet("x", np.ones((1, 3)))
        with pytest.raises(ZeroNorm):
            an.RepresentationSet("x", np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestRsa:
    def test_self(self):
        x = np.random.default_rng(1).normal(size=(30, 8))
        assert an.rsa(x, x) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_orthogonal_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(20, 6)), rng.normal(size=(20, 4))
        q = _random_orthogonal(6, rng)
        assert abs(an.rsa(a @ q, b) - an.rsa(a, b)) <= 1e-9

    @settings(max_examples=50)
    @given(st.integers(0, 10**6))
    def test_brute_force_n4(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
        expected = oracles.spearman(oracles.upper_triangle_cosines(a.tolist()), oracles.upper_triangle_cosines(b.tolist()))
        assert abs(an.rsa(a, b) - expected) <= 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        assert an.rsa(a, b) == an.rsa(b, a)

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            an.rsa(np.ones((3, 2)) + np.eye(3, 2), np.ones((4, 2)) + np.eye(4, 2))

    def test_matrix(self):
        rng = np.random.default_rng(3)
        sets = [an.RepresentationSet(f"s{i}", rng.normal(size=(8, 3))) for i in range(3)]
        m = an.rsa_matrix(sets)
        np.testing.assert_array_equal(np.diag(m), 1.0)
        np.testing.assert_array_equal(m, m.T)
        assert m[0, 2] == an.rsa(sets[0], sets[2])


class TestNearestNeighbours:
    def test_cat_example(self):
        # items: cat, dog, tiger, lion, mouse
        a = _polar([0, 10, 20, 30, 170])
        b = _polar([0, 170, 20, 30, 10])
        assert set(an.knn_indices(a, 3)[0]) == {1, 2, 3}
        assert set(an.knn_indices(b, 3)[0]) == {4, 2, 3}
        count = an.neighbour_overlap_counts(a, b, 3)[0]
        assert count == 2
        assert count / 3 == pytest.approx(2 / 3, abs=1e-15)

    def test_identical_spaces(self):
        x = np.random.default_rng(4).normal(size=(12, 5))
        for k in (1, 10):
            assert an.nn_overlap(x, x, k) == 1.0

    def test_adversarial_disjoint(self):
        a, b = _disjoint_pairs()
        for i in range(6):
            assert oracles.knn(a.tolist(), i, 1) != oracles.knn(b.tolist(), i, 1)
        assert an.nn_overlap(a, b, 1) == 0.0

    @settings(max_examples=50)
    @given(st.integers(0, 10**6), st.integers(1, 7))
    def test_knn_matches_oracle(self, seed, k):
        x = np.random.default_rng(seed).normal(size=(8, 3))
        got = an.knn_indices(x, k)
        for i in range(8):
            assert set(got[i]) == oracles.knn(x.tolist(), i, k)

    def test_ties_to_lower_index(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        assert an.knn_indices(x, 1)[1][0] == 2
        assert an.knn_indices(x, 1)[0][0] == 1

    @pytest.mark.parametrize("k", [0, 5, 6])
    def test_bad_k(self, k):
        with pytest.raises(BadK):
            an.knn_indices(np.random.default_rng(0).normal(size=(5, 2)), k)

    def test_size_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(SizeMismatch):
            an.nn_overlap(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)), 1)


class TestDensity:
    def test_identical(self):
        assert an.density(np.ones((5, 3))) == pytest.approx(1.0, abs=1e-12)

    def test_orthonormal(self):
        assert an.density(np.eye(6)) == 0.0

    def test_random_high_dim(self):
        x = np.random.default_rng(5).normal(size=(400, 1000))
        assert abs(an.density(x)) <= 0.02

    def test_sampling_is_seeded(self):
        x = np.random.default_rng(6).normal(size=(300, 4)) + 1.0
        assert an.density(x, sample_size=50, seed=1) == an.density(x, sample_size=50, seed=1)
        assert an.density(x, sample_size=None) == an.density(x, sample_size=300)

    def test_paired_cosine(self):
        a = np.random.default_rng(7).normal(size=(5, 3))
        assert an.mean_paired_cosine(a, a) == pytest.approx(1.0, abs=1e-12)
        assert an.mean_paired_cosine(a, -a) == pytest.approx(-1.0, abs=1e-12)
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        b = np.array([[0.0, 1.0], [1.0, 1.0]])
        assert an.mean_paired_cosine(a, b) == pytest.approx((0.0 + 1 / np.sqrt(2)) / 2, abs=1e-15)


class TestPerturbations:
    @pytest.fixture
    def records(self):
        out = []
        for i in range(5):
            meta = {"pair_id": f"p{i}"}
            out.append(DatapointRecord("FOIL", f"i{i}", f"c{i}", label="original",
                                       meta={**meta, "scrambled_language_id": f"s{i}"}))
            out.append(DatapointRecord("FOIL", f"i{i}", f"f{i}", label="foiled", meta=meta))
        return out

    def test_derangement_of_two(self):
        np.testing.assert_array_equal(an.random_derangement(2, np.random.default_rng(0)), [1, 0])

    @settings(max_examples=50)
    @given(st.integers(2, 60), st.integers(0, 10**6))
    def test_derangement_has_no_fixed_points(self, n, seed):
        perm = an.random_derangement(n, np.random.default_rng(seed))
        assert sorted(perm) == list(range(n))
        assert not np.any(perm == np.arange(n))

    def test_derangement_too_small(self):
        with pytest.raises(TooSmallForDerangement):
            an.random_derangement(1, np.random.default_rng(0))

    def test_foil_pair(self, records):
        originals = [r for r in records if r.label == "original"]
        out = an.perturb_inputs(originals, "foil_pair", pool=records)
        assert [r.language_id for r in out] == [f"f{i}" for i in range(5)]
        assert [r.image_id for r in out] == [r.image_id for r in originals]

    def test_foil_pair_missing(self, records):
        with pytest.raises(MissingVariant):
            an.perturb_inputs(records[:1], "foil_pair")

    def test_scrambled(self, records):
        originals = [r for r in records if r.label == "original"]
        out = an.perturb_inputs(originals, "scrambled_language")
        assert [r.language_id for r in out] == [f"s{i}" for i in range(5)]
        with pytest.raises(MissingVariant):
            an.perturb_inputs(records[1:2], "scrambled_language")

    @pytest.mark.parametrize("mode,field", [("mismatched_image", "image_id"), ("mismatched_language", "language_id")])
    def test_mismatched(self, records, mode, field):
        originals = [r for r in records if r.label == "original"]
        out = an.perturb_inputs(originals, mode, seed=3)
        before = [getattr(r, field) for r in originals]
        after = [getattr(r, field) for r in out]
        assert sorted(after) == sorted(before)
        assert all(x != y for x, y in zip(before, after))
        assert out == an.perturb_inputs(originals, mode, seed=3)

    def test_unknown_mode(self, records):
        with pytest.raises(DataError):
            an.perturb_inputs(records, "shuffle")

    def test_unique_image_sample(self, records):
        sample = an.unique_image_sample(records, 3, seed=0)
        assert len(sample) == 3
        assert len({r.image_id for r in sample}) == 3
        assert all(r.label == "original" for r in sample)
        assert sample == an.unique_image_sample(records, 3, seed=0)
        assert len(an.unique_image_sample(records, 100, seed=0)) == 5

    def test_tiny_foil_perturbation_keeps_structure(self):
        rng = np.random.default_rng(8)
        n, dims = 40, EncoderDims(8, 6, 5, 10)
        lang = rng.normal(size=(n, 6))
        visual = EmbeddingBank([f"i{i}" for i in range(n)], rng.normal(size=(n, 8)))
        language = EmbeddingBank([f"c{i}" for i in range(n)] + [f"f{i}" for i in range(n)],
                                 np.vstack([lang, lang + 1e-3 * rng.normal(size=(n, 6))]))
        recs = []
        for i in range(n):
            recs.append(DatapointRecord("FOIL", f"i{i}", f"c{i}", label="original", meta={"pair_id": str(i)}))
            recs.append(DatapointRecord("FOIL", f"i{i}", f"f{i}", label="foiled", meta={"pair_id": str(i)}))
        originals = recs[::2]
        enc = encoder_from_seed(dims, 0)
        a = an.encode_records(originals, enc, visual, language)
        b = an.encode_records(an.perturb_inputs(originals, "foil_pair", pool=recs), enc, visual, language)
        assert an.rsa(a, b) > 0.95


class TestCategoryProtocol:
    DIMS = EncoderDims(4, 3, 3, 5)

    def _inputs(self, seed=0, n_cat=6):
        rng = np.random.default_rng(seed)
        words = {f"c{k}": rng.normal(size=3) for k in range(n_cat)}
        samples = {f"c{k}": rng.normal(size=(3, 4)) for k in range(n_cat)}
        return words, samples

    def test_spaces_and_overlaps(self):
        words, samples = self._inputs()
        spaces = an.nn_category_protocol(words, samples, encoder_from_seed(self.DIMS, 0))
        assert spaces.categories == sorted(words)
        assert len(spaces.hub) == 6
        res = spaces.overlaps(ks=(1, 3))
        assert set(res) == {"visual", "language"}
        for space in res.values():
            assert set(space) == {1, 3}
            assert all(0.0 <= v <= 1.0 for v in space.values())

    def test_single_sample_equals_average(self):
        words, samples = self._inputs()
        enc = encoder_from_seed(self.DIMS, 0)
        means = {c: s.mean(axis=0, keepdims=True) for c, s in samples.items()}
        a = an.nn_category_protocol(words, samples, enc)
        b = an.nn_category_protocol(words, means, enc)
        np.testing.assert_allclose(a.hub.vectors, b.hub.vectors, atol=1e-15)

    def test_sample_order_irrelevant(self):
        words, samples = self._inputs()
        enc = encoder_from_seed(self.DIMS, 0)
        flipped = {c: s[::-1] for c, s in samples.items()}
        np.testing.assert_allclose(an.nn_category_protocol(words, samples, enc).visual.vectors,
                                   an.nn_category_protocol(words, flipped, enc).visual.vectors, atol=1e-15)

    def test_empty_category(self):
        words, samples = self._inputs()
        samples["c0"] = np.empty((0, 4))
        with pytest.raises(EmptyCategory):
            an.nn_category_protocol(words, samples, encoder_from_seed(self.DIMS, 0))
