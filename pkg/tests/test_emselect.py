import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajlab.diffusion import to_actions
from trajlab.emselect import (
    SIGMA_FLOOR, CandidateSet, aggregate, aggregate_vectors, em_iterate,
    init_centroid, init_state,
)


def brute_force_centroid(mus, weights, d):
    """Independent coverage count: O(K^2) double loop, lowest-index tie."""
    best, best_cover = 0, -1.0
    for c in range(len(mus)):
        cover = sum(w for m, w in zip(mus, weights)
                    if np.linalg.norm(m - mus[c]) <= d)
        if cover > best_cover + 1e-12:
            best, best_cover = c, cover
    return best


class TestInitCentroid:
    def test_singleton(self):
        assert init_centroid(CandidateSet(np.zeros((1, 4)))) == 0

    def test_majority_cluster_beats_outlier(self):
        rng = np.random.default_rng(0)
        cluster = rng.normal(0.0, 0.2, size=(3, 4))
        outlier = cluster[0] + 10.0
        mus = np.vstack([outlier[None], cluster])  # outlier first
        idx = init_centroid(CandidateSet(mus), d=1.0)
        assert idx in (1, 2, 3)
        # brute-force oracle agreement
        assert idx == brute_force_centroid(mus, [0.25] * 4, 1.0)

    def test_all_identical_tie_breaks_to_zero(self):
        mus = np.ones((5, 4))
        assert init_centroid(CandidateSet(mus), d=2.0) == 0

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        k = rng.integers(1, 9)
        mus = rng.normal(size=(k, 3)) * rng.uniform(0.5, 4.0)
        weights = rng.dirichlet(np.ones(k))
        d = rng.uniform(0.2, 3.0)
        cands = CandidateSet(mus, weights)
        assert init_centroid(cands, d) == brute_force_centroid(mus, weights, d)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            CandidateSet(np.zeros((2, 2)), [0.5, 0.6])
        with pytest.raises(ValueError):
            CandidateSet(np.zeros((2, 2)), [-0.1, 1.1])


class TestEmIterate:
    def test_identical_candidates_fixed_point(self):
        mus = np.tile([1.0, -2.0, 0.5], (4, 1))
        cands = CandidateSet(mus)
        state = em_iterate(init_state(cands, 0), cands, iters=25)
        assert np.allclose(state.mean, mus[0], atol=1e-12)
        assert np.allclose(state.var, SIGMA_FLOOR, atol=1e-12)
        assert not state.underflow

    def test_two_scalar_candidates_first_update_is_midpoint(self):
        # flat density start (huge variance): weights equal -> mean 0.5
        cands = CandidateSet(np.array([[0.0], [1.0]]))
        state = init_state(cands, 0)
        state.var = np.array([1e6])
        out = em_iterate(state, cands, iters=1)
        assert out.mean[0] == pytest.approx(0.5, abs=1e-6)

    def test_mean_stays_in_convex_hull(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mus = rng.normal(size=(rng.integers(2, 7), 4)) * 3.0
            cands = CandidateSet(mus)
            state = init_state(cands, init_centroid(cands))
            for _ in range(5):
                state = em_iterate(state, cands, iters=1)
                assert np.all(state.mean >= mus.min(axis=0) - 1e-9)
                assert np.all(state.mean <= mus.max(axis=0) + 1e-9)

    def test_uniform_density_single_iteration_gives_weighted_mean(self):
        rng = np.random.default_rng(4)
        mus = rng.normal(size=(5, 3))
        weights = rng.dirichlet(np.ones(5))
        cands = CandidateSet(mus, weights)
        state = init_state(cands, 0)
        state.var = np.full(3, 1e9)   # d -> infinity analogue: flat density
        out = em_iterate(state, cands, iters=1)
        assert np.allclose(out.mean, weights @ mus, atol=1e-6)

    def test_variance_floor_enforced(self):
        cands = CandidateSet(np.zeros((3, 2)))
        out = em_iterate(init_state(cands, 0), cands, iters=10)
        assert np.all(out.var >= SIGMA_FLOOR)


class TestAggregate:
    def test_identical_candidates_returned_exactly(self):
        traj = np.cumsum(np.full((8, 2), [4.0, 0.1]), axis=0)
        out = aggregate([traj.copy() for _ in range(5)])
        assert np.max(np.abs(out - traj)) <= 1e-9

    def test_bimodal_seven_vs_one(self):
        # oracle: independent density-weighted mean around the majority mode
        rng = np.random.default_rng(7)
        mode_a = np.zeros(16)
        mode_b = np.full(16, 2.0)       # 8 m apart in l2
        mus = np.vstack([mode_a + rng.normal(0, 0.1, 16) for _ in range(7)]
                        + [mode_b + rng.normal(0, 0.1, 16)])
        out = aggregate_vectors(mus, d=2.0)
        assert np.linalg.norm(out - mode_a) < 1.0
        assert np.linalg.norm(out - mode_b) > 4.0

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        cands = [np.cumsum(rng.normal(2, 1, (8, 2)), axis=0) for _ in range(6)]
        a = aggregate(cands)
        b = aggregate([c.copy() for c in cands])
        assert np.array_equal(a, b)

    def test_permutation_invariant_when_argmax_unique(self):
        # middle candidate covers all three of its cluster, edges only two,
        # so the centroid choice is unique and order cannot matter
        mus = np.zeros((5, 16))
        mus[0, 0], mus[1, 0], mus[2, 0] = 0.0, 1.9, 3.8
        mus[3] = 40.0
        mus[4] = -40.0
        a = aggregate_vectors(mus, d=2.0)
        for perm in ([4, 1, 0, 2, 3], [2, 3, 4, 0, 1]):
            b = aggregate_vectors(mus[perm], d=2.0)
            assert np.allclose(a, b, atol=1e-12)

    def test_output_in_action_convex_hull(self):
        rng = np.random.default_rng(13)
        cands = [np.cumsum(rng.uniform(1, 5, (8, 2)), axis=0) for _ in range(6)]
        out_actions = to_actions(aggregate(cands))
        acts = np.stack([to_actions(c) for c in cands])
        assert np.all(out_actions >= acts.min(axis=0) - 1e-9)
        assert np.all(out_actions <= acts.max(axis=0) + 1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])
