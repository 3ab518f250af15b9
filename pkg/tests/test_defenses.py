import math

import numpy as np
import pytest

from kvldp.attacks import M2GA, AttackConfig, craft_m2ga
from kvldp.core import (
    FREQUENCY_STAGE,
    PCKV_GRR,
    PRIVKVM,
    Dictionary,
    PrivacyParams,
    PrivKVMMessages,
    TargetSet,
    derive_perturb_params,
    make_rng,
)
from kvldp.data import generate_synthetic
from kvldp.defenses import (
    AnomalyState,
    ForestConfig,
    IsolationForest,
    as_detect,
    as_scores_update,
    build_feature_rows,
    isolation_forest_fit,
    oc_detect,
    reaggregate_excluding,
)
from kvldp.metrics import detection_metrics
from kvldp.protocols import (
    pckv_aggregate,
    pckv_grr_perturb,
    pckv_sample,
    privkvm_run,
)


def rank_auc(scores, labels):
    order = np.argsort(scores)
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    pos = labels.astype(bool)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


class TestIsolationForest:
    def test_outlier_scores_above_cluster(self):
        rng = make_rng(0)
        cluster = rng.normal(0, 0.1, (200, 2))
        outlier = np.full((5, 2), 6.0)
        x = np.vstack([cluster, outlier])
        forest = IsolationForest(ForestConfig(tree_count=50)).fit(x, rng)
        scores = forest.anomaly_scores(x)
        assert scores[200:].min() > scores[:200].max()

    def test_identical_rows_equal_scores(self):
        x = np.ones((50, 3))
        forest = IsolationForest(ForestConfig(tree_count=20)).fit(x, make_rng(1))
        scores = forest.anomaly_scores(x)
        assert np.allclose(scores, scores[0])

    def test_gaussian_plus_shifted_auc_above_09(self):
        rng = make_rng(2)
        inliers = rng.normal(0, 1, (1900, 2))
        outliers = rng.normal(3.5, 1, (100, 2))
        x = np.vstack([inliers, outliers])
        labels = np.concatenate([np.zeros(1900), np.ones(100)])
        forest = isolation_forest_fit(x, ForestConfig(tree_count=100, subsample=256), rng)
        assert rank_auc(forest.anomaly_scores(x), labels) > 0.9

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            IsolationForest().fit(np.ones((1, 2)), make_rng(3))


class TestOCDetect:
    def test_flags_minority_group(self):
        scores = np.array([0.3] * 90 + [0.7] * 10)
        known = np.arange(20)  # all in the low-score group
        detected = oc_detect(scores, known)
        assert detected.sum() == 10
        assert detected[90:].all()

    def test_tie_keeps_larger_group_genuine(self):
        scores = np.array([0.3] * 8 + [0.7] * 2)
        known = np.array([0, 8])  # one known user in each group
        detected = oc_detect(scores, known)
        assert detected[8:].all() and not detected[:8].any()

    def test_no_split_detects_nothing(self):
        scores = np.full(30, 0.4)
        assert not oc_detect(scores, np.arange(5)).any()

    def test_m2ga_grr_fakes_mostly_caught(self):
        # identical <k,1> pairs from fakes form a tight cluster the forest
        # isolates from the genuine spread
        n, m = 4000, 200
        ds = generate_synthetic(n, 50, rng=make_rng(4))
        dictionary = Dictionary(50, 1)
        params = derive_perturb_params(PCKV_GRR, FREQUENCY_STAGE, PrivacyParams(1.0), dictionary)
        rng = make_rng(5)
        keys, v_star = pckv_sample(ds, dictionary, rng)
        genuine = pckv_grr_perturb(keys, v_star, params, dictionary, rng)
        fake = craft_m2ga(PCKV_GRR, AttackConfig(M2GA, TargetSet((7,)), m), params, dictionary)
        from kvldp.core import GRRPairs

        combined = GRRPairs(
            key=np.concatenate([genuine.key, fake.key]),
            value=np.concatenate([genuine.value, fake.value]),
        )
        rows = build_feature_rows(PCKV_GRR, combined, dictionary)
        forest = isolation_forest_fit(rows, ForestConfig(), rng)
        detected = oc_detect(forest.anomaly_scores(rows), known_genuine=np.arange(400))
        fake_mask = np.arange(n + m) >= n
        fpr, fnr = detection_metrics(detected, fake_mask)
        assert fnr < 0.5
        assert fpr < 0.5


class TestAnomalyScores:
    def test_repeated_key_scores_round_count(self):
        state = AnomalyState(n_users=3, d=10)
        for _ in range(10):
            state.update(np.array([7, 7, 7]))
        assert np.all(state.scores == 10)

    def test_distinct_keys_score_one(self):
        state = AnomalyState(n_users=1, d=10)
        for k in range(1, 11):
            state.update(np.array([k]))
        assert state.scores[0] == 1

    def test_scores_monotone_and_bounded_by_round(self):
        rng = make_rng(6)
        state = AnomalyState(n_users=200, d=20)
        prev = state.scores.copy()
        for t in range(1, 9):
            state.update(rng.integers(1, 21, size=200))
            assert np.all(state.scores >= prev)
            assert np.all(state.scores <= t)
            prev = state.scores.copy()

    def test_update_wrapper_checks_length(self):
        state = AnomalyState(n_users=4, d=3)
        msgs = PrivKVMMessages(
            key_index=np.array([1, 2, 3]), kp=np.zeros(3, dtype=np.int8),
            vp=np.zeros(3, dtype=np.int8),
        )
        with pytest.raises(ValueError):
            as_scores_update(state, msgs)

    def test_as_detect_flags_once(self):
        state = AnomalyState(n_users=5, d=5)
        state.update(np.array([1, 1, 2, 3, 4]))
        state.update(np.array([1, 2, 2, 4, 4]))
        newly = as_detect(state, eta=2)
        assert newly.tolist() == [True, False, True, False, True]
        again = as_detect(state, eta=2)
        assert not again.any()

    def test_eta_above_round_count_flags_nobody(self):
        state = AnomalyState(n_users=10, d=3)
        for _ in range(4):
            state.update(np.ones(10, dtype=np.int64))
        assert not as_detect(state, eta=5).any()

    def test_m2ga_fakes_flagged_in_round_two(self):
        ds = generate_synthetic(1000, 30, rng=make_rng(7))
        privacy = PrivacyParams(1.0, 4)
        params = derive_perturb_params(PRIVKVM, FREQUENCY_STAGE, privacy, Dictionary(30))
        fake_rounds = craft_m2ga(
            PRIVKVM, AttackConfig(M2GA, TargetSet((9,)), 50), params, Dictionary(30),
            privacy, make_rng(8), n_rounds=4,
        )
        res = privkvm_run(ds, privacy, make_rng(9), adversary_rounds=fake_rounds, anomaly_eta=2)
        fake_mask = np.arange(1050) >= 1000
        fpr, fnr = detection_metrics(res.detected, fake_mask)
        assert fnr == 0.0

    def test_genuine_flag_rate_matches_birthday_bound(self):
        # Pr[some key repeats across N_iter uniform draws from d]
        d, n_iter, n = 40, 6, 20_000
        expect = 1.0
        for i in range(n_iter):
            expect *= 1 - i / d
        expect = 1 - expect
        rng = make_rng(10)
        state = AnomalyState(n_users=n, d=d)
        for _ in range(n_iter):
            state.update(rng.integers(1, d + 1, size=n))
        rate = (state.scores >= 2).mean()
        assert rate == pytest.approx(expect, abs=4 * math.sqrt(expect * (1 - expect) / n))


class TestReaggregate:
    def test_empty_detection_is_identity(self):
        ds = generate_synthetic(2000, 10, rng=make_rng(11))
        dictionary = Dictionary(10, 1)
        params = derive_perturb_params(PCKV_GRR, FREQUENCY_STAGE, PrivacyParams(1.0), dictionary)
        rng = make_rng(12)
        keys, v_star = pckv_sample(ds, dictionary, rng)
        msgs = pckv_grr_perturb(keys, v_star, params, dictionary, rng)
        table = pckv_aggregate(msgs, 2000, params, dictionary)
        again = reaggregate_excluding(
            PCKV_GRR, msgs, np.zeros(2000, dtype=bool), dictionary, params=params
        )
        assert np.array_equal(table.f_hat, again.f_hat)
        assert np.array_equal(table.m_hat, again.m_hat)

    def test_removing_exact_fakes_restores_estimates(self):
        ds = generate_synthetic(3000, 10, rng=make_rng(13))
        dictionary = Dictionary(10, 1)
        params = derive_perturb_params(PCKV_GRR, FREQUENCY_STAGE, PrivacyParams(1.0), dictionary)
        rng = make_rng(14)
        keys, v_star = pckv_sample(ds, dictionary, rng)
        genuine = pckv_grr_perturb(keys, v_star, params, dictionary, rng)
        clean = pckv_aggregate(genuine, 3000, params, dictionary)
        fake = craft_m2ga(PCKV_GRR, AttackConfig(M2GA, TargetSet((4,)), 150), params, dictionary)
        from kvldp.core import GRRPairs

        combined = GRRPairs(
            key=np.concatenate([genuine.key, fake.key]),
            value=np.concatenate([genuine.value, fake.value]),
        )
        detected = np.arange(3150) >= 3000
        restored = reaggregate_excluding(PCKV_GRR, combined, detected, dictionary, params=params)
        assert np.allclose(restored.f_hat, clean.f_hat)
        assert restored.n_users == 3000

    def test_false_positives_keep_estimates_in_bounds(self):
        ds = generate_synthetic(2000, 10, rng=make_rng(15))
        res = privkvm_run(ds, PrivacyParams(1.0, 3), make_rng(16), collect=True)
        detected = np.zeros(2000, dtype=bool)
        detected[make_rng(17).choice(2000, 300, replace=False)] = True
        table = reaggregate_excluding(
            PRIVKVM, res.rounds, detected, Dictionary(10), privacy=PrivacyParams(1.0, 3)
        )
        assert table.n_users == 1700
        assert np.all(table.f_hat >= 1 / 1700) and np.all(table.f_hat <= 1.0)
        assert np.all(np.abs(table.m_hat) <= 1.0)

    def test_all_detected_rejected(self):
        dictionary = Dictionary(2, 1)
        params = derive_perturb_params(PCKV_GRR, FREQUENCY_STAGE, PrivacyParams(1.0), dictionary)
        from kvldp.core import GRRPairs

        msgs = GRRPairs(key=np.array([1, 2]), value=np.array([1, -1], dtype=np.int8))
        with pytest.raises(ValueError):
            reaggregate_excluding(
                PCKV_GRR, msgs, np.ones(2, dtype=bool), dictionary, params=params
            )


def test_feature_rows_shapes():
    ds = generate_synthetic(100, 8, rng=make_rng(18))
    res = privkvm_run(ds, PrivacyParams(1.0, 3), make_rng(19), collect=True)
    rows = build_feature_rows(PRIVKVM, res.rounds, Dictionary(8))
    assert rows.shape == (100, 9)
    assert rows[:, 0].max() <= 1.0  # key index normalized by d
