import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hubprobe import core_math as cm
from hubprobe import heads as hd
from hubprobe.errors import BadLabel, ConfigError, DimMismatch, ZeroNorm

import oracles
from composites import retrieval_composite


def _hinge_oracle(g, gt, negs, margin, aggregation="mean"):
    terms = [max(0.0, margin + oracles.cosine(g, e) - oracles.cosine(g, gt)) for e in negs]
    return sum(terms) / len(terms) if aggregation == "mean" else sum(terms)


class TestRetrievalHead:
    def test_zero_weights(self):
        head = hd.init_retrieval_head(4, 3, 2, np.random.default_rng(0))
        for t in head.tensors.values():
            t[:] = 0.0
        g, _ = hd.head_forward(np.ones(4), head)
        np.testing.assert_array_equal(g, 0.0)

    def test_hand_oracle(self):
        head = hd.RetrievalHead({
            "W1": np.array([[1.0, -1.0], [0.5, 0.5]]), "b1": np.array([0.0, 0.1]),
            "W2": np.array([[2.0, 0.0]]), "b2": np.array([-0.5]),
        })
        g, _ = hd.head_forward(np.array([0.3, 0.1]), head)
        expected = 2.0 * np.tanh(0.3 - 0.1) + 0.0 * np.tanh(0.15 + 0.05 + 0.1) - 0.5
        assert g[0] == pytest.approx(expected, abs=1e-12)

    def test_dim_mismatch(self):
        head = hd.init_retrieval_head(4, 3, 2, np.random.default_rng(0))
        with pytest.raises(DimMismatch):
            hd.head_forward(np.ones(5), head)

    @pytest.mark.parametrize("seed", range(25))
    def test_gradient_check(self, seed):
        fn, params = retrieval_composite(seed)
        assert cm.grad_check(fn, params, np.random.default_rng(seed)) < 1e-4


class TestRetrievalLoss:
    def test_satisfied_margin_is_zero(self):
        g = np.array([1.0, 0.0, 0.0])
        loss, grad = hd.retrieval_loss(g, g, np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_hand_value(self):
        g = np.array([1.0, 0.0])
        loss, _ = hd.retrieval_loss(g, np.array([0.0, 1.0]), np.array([[1.0, 0.0]]), hd.LossConfig(0.1))
        assert loss == pytest.approx(1.1, abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(ZeroNorm):
            hd.retrieval_loss(np.zeros(2), np.array([1.0, 0.0]), np.array([[0.0, 1.0]]))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            hd.LossConfig(margin=-1.0)
        with pytest.raises(ConfigError):
            hd.LossConfig(aggregation="max")

    @settings(max_examples=100)
    @given(st.integers(0, 100_000), st.sampled_from(["mean", "sum"]), st.floats(0.0, 1.0))
    def test_matches_loop_oracle(self, seed, aggregation, margin):
        rng = np.random.default_rng(seed)
        g, gt = rng.normal(size=4), rng.normal(size=4)
        negs = rng.normal(size=(5, 4))
        cfg = hd.LossConfig(margin, aggregation)
        loss, _ = hd.retrieval_loss(g, gt, negs, cfg)
        assert loss == pytest.approx(_hinge_oracle(g, gt, negs, margin, aggregation), abs=1e-12)
        assert loss >= 0.0
        # cosine-only dependence on g
        assert hd.retrieval_loss(2.0 * g, gt, negs, cfg)[0] == pytest.approx(loss, abs=1e-12)

    def test_mask_ignores_padding(self):
        rng = np.random.default_rng(4)
        G = rng.normal(size=(1, 3))
        cands = rng.normal(size=(1, 4, 3))
        full, _ = hd.retrieval_loss_batch(G, cands[:, :3], [0])
        padded = cands.copy()
        padded[0, 3] = 0.0
        masked, _ = hd.retrieval_loss_batch(G, padded, [0], mask=np.array([[True, True, True, False]]))
        assert masked == pytest.approx(full, abs=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_loss_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p = {"G": rng.normal(size=(3, 4))}
        cands = rng.normal(size=(3, 6, 4))
        gt = rng.integers(0, 6, size=3)

        def fn():
            loss, grad = hd.retrieval_loss_batch(p["G"], cands, gt, hd.LossConfig(1.5))
            return loss, {"G": grad}

        assert cm.grad_check(fn, p, rng) < 1e-4


class TestRanking:
    def test_exact_match_ranks_first(self):
        cands = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        res = hd.rank_candidates(np.array([1.0, 0.0]), cands, 1, ks=(1, 2))
        assert res.rank_of_gt == 1
        assert res.precision_at == {1: 1.0, 2: 1.0}
        assert res.reciprocal_rank == 1.0
        np.testing.assert_array_equal(res.ranking, [1, 2, 0])

    def test_ties_to_lower_index(self):
        cands = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
        assert hd.rank_candidates(np.array([1.0, 0.0]), cands, 1).rank_of_gt == 2
        assert hd.rank_candidates(np.array([1.0, 0.0]), cands, 0).rank_of_gt == 1

    @settings(max_examples=50)
    @given(st.integers(0, 100_000))
    def test_permutation_consistency(self, seed):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=5)
        cands = rng.normal(size=(8, 5))
        perm = rng.permutation(8)
        base = hd.rank_candidates(g, cands, 3)
        moved = hd.rank_candidates(g, cands[perm], int(np.where(perm == 3)[0][0]))
        assert base.rank_of_gt == moved.rank_of_gt
        np.testing.assert_array_equal(perm[moved.ranking], base.ranking)

    @pytest.mark.parametrize("n_cand", [18, 20])
    def test_random_scores_give_chance(self, n_cand):
        rng = np.random.default_rng(n_cand)
        cos = rng.normal(size=(20_000, n_cand))
        ranks = hd.gt_ranks(cos, rng.integers(0, n_cand, size=20_000))
        assert np.mean(ranks == 1) == pytest.approx(1 / n_cand, abs=0.01)
        assert ranks.mean() == pytest.approx((n_cand + 1) / 2, abs=0.2)


class TestFoilHead:
    def test_zero_weights(self):
        head = hd.init_foil_head(4, np.random.default_rng(0))
        head.tensors["W"][:] = 0.0
        probs, _, _ = hd.foil_forward(np.ones(4), head)
        np.testing.assert_array_equal(probs, [0.5, 0.5])

    @settings(max_examples=50)
    @given(st.integers(0, 100_000))
    def test_probabilities_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        head = hd.init_foil_head(6, rng)
        head.tensors["W"] *= 50
        probs, _, _ = hd.foil_forward(rng.normal(size=(5, 6)), head)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_bad_label(self):
        with pytest.raises(BadLabel):
            hd.foil_loss(np.zeros((2, 2)), np.array([0, 2]))

    def test_single_layer_two_logits(self):
        head = hd.init_foil_head(8, np.random.default_rng(0))
        assert set(head.tensors) == {"W", "b"}
        assert head.tensors["W"].shape == (2, 8)
