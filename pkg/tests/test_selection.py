import itertools

import numpy as np
import pytest
from scipy.special import expit

from learnloop.diagnosis import predict, q_mask_array
from learnloop.ingest import KnowledgeGraph, QMatrix
from learnloop.selection import (
    SelectionState,
    WeightMatrix,
    create_selection_state,
    emc_scores,
    expected_model_change,
    filter_candidates,
    info_score,
    marginal_gain,
    record_response,
    select_next,
    update_ability,
    weight_matrix,
)

from conftest import make_model, random_q_matrix


def brute_force_info_score(weight: WeightMatrix, selected) -> float:
    """Plain-loop evaluation of the coverage sum."""
    total = 0.0
    for i, q in enumerate(weight.candidate_ids):
        if q in selected:
            continue
        if selected:
            total += max(weight.w[i][weight.index_of(j)] for j in selected)
    return total


def straight_line_weight_matrix(model, theta, candidates, q_mask, n_samples, seed):
    """Independent plain-loop reimplementation of the Monte-Carlo estimator."""
    from learnloop.diagnosis import ability_forward_backward

    items = np.asarray(candidates)
    p, g1, g0 = ability_forward_backward(model, theta, items, q_mask[items])
    draws = np.random.default_rng(seed).random(n_samples)
    m = len(candidates)
    dist = np.zeros((m, m))
    for u in draws:
        grads = [g1[i] if u < p[i] else g0[i] for i in range(m)]
        for i in range(m):
            for j in range(m):
                dist[i, j] += np.linalg.norm(grads[i] - grads[j])
    dist /= n_samples
    c = dist.max()
    return c - dist, c


class TestExpectedModelChange:
    def test_zero_learning_rate_gives_zero(self, small_model, small_q):
        for q in range(small_model.n_items):
            assert expected_model_change(small_model, 0, q, small_q.rows[q], 0.0) == 0.0

    def test_matches_clone_and_step_oracle(self):
        rng = np.random.default_rng(42)
        checked = 0
        for trial in range(100):
            model = make_model(1000 + trial)
            q_matrix = random_q_matrix(rng, model.n_items, model.d)
            s = int(rng.integers(model.n_students))
            q = int(rng.integers(model.n_items))
            lr = float(rng.uniform(0.05, 1.5))
            p = predict(model, s, q, q_matrix.rows[q])
            clone_t = model.clone()
            theta_t = update_ability(clone_t, s, q, q_matrix.rows[q], 1, lr)
            clone_f = model.clone()
            theta_f = update_ability(clone_f, s, q, q_matrix.rows[q], 0, lr)
            oracle = (p * np.linalg.norm(theta_t - model.theta[s])
                      + (1 - p) * np.linalg.norm(theta_f - model.theta[s]))
            emc = expected_model_change(model, s, q, q_matrix.rows[q], lr)
            assert emc == pytest.approx(oracle, rel=1e-10)
            checked += 1
        assert checked == 100

    def test_non_negative_and_positive_when_gradient_lives(self, small_model, small_q):
        for q in range(small_model.n_items):
            emc = expected_model_change(small_model, 1, q, small_q.rows[q], 0.5)
            assert emc > 0.0  # fresh models predict in the interior

    def test_invalid_item(self, small_model, small_q):
        with pytest.raises(IndexError):
            expected_model_change(small_model, 0, 99, {0}, 0.5)


class TestWeightMatrix:
    def test_diagonal_is_offset(self, small_model, small_q):
        q_mask = q_mask_array(small_q, small_model.d)
        w = weight_matrix(small_model, small_model.theta[0], [0, 2, 5], q_mask,
                          n_samples=16, seed=3)
        assert np.allclose(np.diag(w.w), w.c)

    def test_indistinguishable_items_share_offset_weight(self, small_model, small_q):
        small_model.beta[3] = small_model.beta[1]
        small_model.alpha_raw[3] = small_model.alpha_raw[1]
        q = QMatrix(rows=[row if i != 3 else set(small_q.rows[1])
                          for i, row in enumerate(small_q.rows)])
        q_mask = q_mask_array(q, small_model.d)
        w = weight_matrix(small_model, small_model.theta[2], [1, 3, 6], q_mask,
                          n_samples=8, seed=11)
        i, j = w.index_of(1), w.index_of(3)
        assert w.w[i, j] == pytest.approx(w.c, abs=1e-15)

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            model = make_model(300 + trial)
            q_matrix = random_q_matrix(rng, model.n_items, model.d)
            q_mask = q_mask_array(q_matrix, model.d)
            pool = sorted(rng.choice(model.n_items, size=3, replace=False).tolist())
            theta = model.theta[int(rng.integers(model.n_students))]
            w = weight_matrix(model, theta, pool, q_mask, n_samples=64, seed=trial)
            expected, c = straight_line_weight_matrix(model, theta, pool, q_mask,
                                                      64, trial)
            assert w.c == pytest.approx(c, rel=1e-12, abs=1e-15)
            np.testing.assert_allclose(w.w, expected, rtol=1e-10, atol=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(9)
        for trial in range(5):
            model = make_model(600 + trial)
            q_matrix = random_q_matrix(rng, model.n_items, model.d)
            q_mask = q_mask_array(q_matrix, model.d)
            pool = sorted(rng.choice(model.n_items, size=5, replace=False).tolist())
            w = weight_matrix(model, model.theta[0], pool, q_mask,
                              n_samples=12, seed=trial)
            assert np.array_equal(w.w, w.w.T)
            assert w.w.min() >= 0.0 and w.w.max() <= w.c

    def test_empty_pool_rejected(self, small_model, small_q):
        with pytest.raises(ValueError):
            weight_matrix(small_model, small_model.theta[0], [],
                          q_mask_array(small_q, 4))


def hand_weight() -> WeightMatrix:
    w = np.array([[3.0, 2.0, 1.0], [2.0, 3.0, 3.0], [1.0, 3.0, 3.0]])
    return WeightMatrix(w=w, c=3.0, candidate_ids=[0, 1, 2])


class TestInfoScore:
    def test_empty_selection_scores_zero(self):
        assert info_score(hand_weight(), []) == 0.0

    def test_full_selection_scores_zero(self):
        assert info_score(hand_weight(), [0, 1, 2]) == 0.0

    def test_hand_case(self):
        assert info_score(hand_weight(), [0]) == 3.0

    def test_unknown_id_rejected(self):
        with pytest.raises(KeyError):
            info_score(hand_weight(), [7])


class TestMarginalGain:
    def test_gain_on_empty_set_is_column_sum(self):
        w = hand_weight()
        assert marginal_gain(w, [], 1) == w.w[0, 1] + w.w[2, 1]

    def test_hand_case_cancels(self):
        assert marginal_gain(hand_weight(), [0], 1) == 0.0

    def test_already_selected_rejected(self):
        with pytest.raises(ValueError):
            marginal_gain(hand_weight(), [1], 1)

    def test_exhaustive_consistency_on_small_instances(self):
        rng = np.random.default_rng(17)
        for trial in range(8):
            model = make_model(800 + trial)
            q_matrix = random_q_matrix(rng, model.n_items, model.d)
            q_mask = q_mask_array(q_matrix, model.d)
            pool = sorted(rng.choice(model.n_items, size=6, replace=False).tolist())
            w = weight_matrix(model, model.theta[0], pool, q_mask,
                              n_samples=8, seed=trial)
            for r in range(len(pool)):
                for subset in itertools.combinations(pool, r):
                    subset = list(subset)
                    f_before = brute_force_info_score(w, subset)
                    assert info_score(w, subset) == pytest.approx(f_before, abs=1e-12)
                    for q in pool:
                        if q in subset:
                            continue
                        f_after = brute_force_info_score(w, subset + [q])
                        assert marginal_gain(w, subset, q) == pytest.approx(
                            f_after - f_before, abs=1e-12)


def build_state(model, q_matrix, *, budget=4, lam=0.5, seed=0, student=0,
                pool=None, lr=1.0):
    q_mask = q_mask_array(q_matrix, model.d)
    state = create_selection_state(
        model, model.theta[student], q_matrix, q_mask, None,
        budget=budget, lambda_mix=lam, n_samples=16, ability_lr=lr,
        seed=seed, pool=pool, threshold=0.0)  # threshold 0: keep the full pool
    return state, q_mask


class TestSelectNext:
    def test_pure_emc_mode(self):
        model = make_model(91)
        rng = np.random.default_rng(2)
        q_matrix = random_q_matrix(rng, model.n_items, model.d)
        state, q_mask = build_state(model, q_matrix, lam=1.0)
        emc = emc_scores(model, state.theta, np.array(state.candidate_ids),
                         q_mask, state.ability_lr)
        expected = state.candidate_ids[int(np.argmax(emc))]
        assert select_next(state, model, q_mask) == expected

    def test_pure_gain_matches_exhaustive_argmax(self):
        rng = np.random.default_rng(4)
        for trial in range(6):
            model = make_model(50 + trial)
            q_matrix = random_q_matrix(rng, model.n_items, model.d)
            pool = sorted(rng.choice(model.n_items, size=6, replace=False).tolist())
            state, q_mask = build_state(model, q_matrix, budget=6, lam=0.0,
                                        seed=trial, pool=pool)
            while state.remaining:
                expected, best = None, -np.inf
                for q in sorted(state.unselected()):
                    gain = marginal_gain(state.weight, state.selected, q)
                    if gain > best:
                        expected, best = q, gain
                assert select_next(state, model, q_mask) == expected

    def test_tie_breaks_to_smaller_item_id(self):
        model = make_model(15)
        # two indistinguishable items: same difficulty, discrimination, skills
        model.beta[5] = model.beta[2]
        model.alpha_raw[5] = model.alpha_raw[2]
        rows = [{0, 1}, {2}, {1, 3}, {0}, {2, 3}, {1, 3}, {0, 2}, {3}]
        q_matrix = QMatrix(rows=rows)
        state, q_mask = build_state(model, q_matrix, pool=[2, 5], budget=2)
        assert select_next(state, model, q_mask) == 2

    def test_budget_exhaustion(self):
        model = make_model(1)
        rng = np.random.default_rng(0)
        q_matrix = random_q_matrix(rng, model.n_items, model.d)
        state, q_mask = build_state(model, q_matrix, budget=1)
        select_next(state, model, q_mask)
        with pytest.raises(RuntimeError, match="budget"):
            select_next(state, model, q_mask)

    def test_no_repeat_within_session(self):
        model = make_model(33)
        rng = np.random.default_rng(1)
        q_matrix = random_q_matrix(rng, model.n_items, model.d)
        state, q_mask = build_state(model, q_matrix, budget=8)
        picks = []
        while state.remaining:
            item = select_next(state, model, q_mask)
            picks.append(item)
            record_response(state, model, q_mask, item, int(rng.integers(2)))
        assert len(picks) == len(set(picks)) == 8

    def test_session_determinism(self):
        replies = [1, 0, 1, 1, 0]

        def run():
            model = make_model(77)
            rng = np.random.default_rng(6)
            q_matrix = random_q_matrix(rng, model.n_items, model.d)
            state, q_mask = build_state(model, q_matrix, budget=5, seed=123)
            picks = []
            for reply in replies:
                item = select_next(state, model, q_mask)
                picks.append(item)
                record_response(state, model, q_mask, item, reply)
            return picks, state.theta

        picks1, theta1 = run()
        picks2, theta2 = run()
        assert picks1 == picks2
        assert np.array_equal(theta1, theta2)


class TestUpdateAbility:
    def test_saturated_item_barely_moves(self, small_model, small_q):
        small_model.biases[-1][:] = 13.0  # predict ~ 1 - 2e-6
        p = predict(small_model, 0, 1, small_q.rows[1])
        assert p > 1.0 - 1e-5
        theta = update_ability(small_model, 0, 1, small_q.rows[1], 1, 1.0)
        assert np.linalg.norm(theta - small_model.theta[0]) < 1e-5

    def test_correct_response_does_not_lower_prediction(self):
        rng = np.random.default_rng(10)
        for trial in range(20):
            model = make_model(400 + trial)
            q_matrix = random_q_matrix(rng, model.n_items, model.d)
            s = int(rng.integers(model.n_students))
            q = int(rng.integers(model.n_items))
            before = predict(model, s, q, q_matrix.rows[q])
            model.theta[s] = update_ability(model, s, q, q_matrix.rows[q], 1, 0.1)
            assert predict(model, s, q, q_matrix.rows[q]) >= before

    def test_step_norm_matches_emc_branches(self, small_model, small_q):
        s, q, lr = 2, 4, 0.7
        p = predict(small_model, s, q, small_q.rows[q])
        n1 = np.linalg.norm(
            update_ability(small_model, s, q, small_q.rows[q], 1, lr)
            - small_model.theta[s])
        n0 = np.linalg.norm(
            update_ability(small_model, s, q, small_q.rows[q], 0, lr)
            - small_model.theta[s])
        emc = expected_model_change(small_model, s, q, small_q.rows[q], lr)
        assert emc == pytest.approx(p * n1 + (1 - p) * n0, abs=1e-15)

    def test_invalid_observation(self, small_model, small_q):
        with pytest.raises(ValueError):
            update_ability(small_model, 0, 0, small_q.rows[0], 2, 0.1)


class TestFilterCandidates:
    def test_full_mastery_falls_back_to_pool(self, small_q):
        pool = list(range(8))
        kept = filter_candidates(small_q, None, np.ones(4), 0.6, pool)
        assert kept == pool

    def test_weak_points_and_prerequisites_kept(self, small_q):
        graph = KnowledgeGraph(edges=[(0, 1, "prerequisite")])
        mastery = np.array([0.9, 0.3, 0.9, 0.9])  # k1 weak, k0 its prerequisite
        kept = filter_candidates(small_q, graph, mastery, 0.6, list(range(8)))
        expected = [q for q in range(8) if small_q.rows[q] & {0, 1}]
        assert kept == expected

    def test_uncovered_weakness_falls_back(self):
        q = QMatrix(rows=[{0}, {0}])
        mastery = np.array([0.9, 0.1])
        assert filter_candidates(q, None, mastery, 0.6, [0, 1]) == [0, 1]


class TestPoolTruncation:
    def test_oversized_pool_truncated_by_emc(self):
        model = make_model(5, n_items=30)
        rng = np.random.default_rng(3)
        q_matrix = random_q_matrix(rng, 30, model.d)
        q_mask = q_mask_array(q_matrix, model.d)
        state = create_selection_state(
            model, model.theta[0], q_matrix, q_mask, None,
            budget=2, threshold=0.0, max_pool=10, seed=1)
        assert len(state.candidate_ids) == 10
        emc = emc_scores(model, model.theta[0], np.arange(30), q_mask, 1.0)
        expected = set(np.argsort(-emc, kind="stable")[:10].tolist())
        assert set(state.candidate_ids) == expected
