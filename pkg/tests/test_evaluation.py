"""Metric correctness against exhaustive oracles plus protocol contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrface.errors import ProtocolError
from attrface.evaluation import (
    PairProtocol,
    accuracy_from_probs,
    ablation_report,
    format_verification_table,
    roc_points,
    report_records,
    score_pairs_from_embeddings,
    tar_at_far,
    verification_report,
)

from oracles import tar_at_far_oracle


class TestProtocol:
    def test_self_pair_rejected(self):
        with pytest.raises(ProtocolError, match="itself"):
            PairProtocol([(0, 0, True), (0, 1, False)])

    def test_needs_both_kinds(self):
        with pytest.raises(ProtocolError, match="both pair kinds"):
            PairProtocol([(0, 1, True), (2, 3, True)])


class TestScorePairs:
    def test_identical_embeddings_score_one(self):
        emb = np.array([[0.5, 1.0], [0.5, 1.0], [1.0, -0.5]])
        protocol = PairProtocol([(0, 1, True), (0, 2, False)])
        genuine, impostor = score_pairs_from_embeddings(emb, {0: 0, 1: 1, 2: 2}, protocol)
        assert genuine[0] == pytest.approx(1.0, abs=1e-6)

    def test_one_hot_embeddings_separate_perfectly(self):
        emb = np.eye(4)[[0, 0, 1, 1]]
        protocol = PairProtocol([(0, 1, True), (2, 3, True), (0, 2, False), (1, 3, False)])
        genuine, impostor = score_pairs_from_embeddings(emb, {i: i for i in range(4)}, protocol)
        np.testing.assert_allclose(genuine, 1.0)
        np.testing.assert_allclose(impostor, 0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((6, 8))
        protocol = PairProtocol([(0, 1, True), (2, 3, False), (4, 5, False)])
        index = {i: i for i in range(6)}
        base = score_pairs_from_embeddings(emb, index, protocol)
        scaled = score_pairs_from_embeddings(emb * 7.3, index, protocol)
        np.testing.assert_allclose(base[0], scaled[0], atol=1e-9)
        np.testing.assert_allclose(base[1], scaled[1], atol=1e-9)

    def test_zero_embedding_rejected(self):
        emb = np.array([[0.0, 0.0], [1.0, 0.0]])
        protocol = PairProtocol([(0, 1, True), (1, 0, False)])
        with pytest.raises(ValueError, match="degenerate"):
            score_pairs_from_embeddings(emb, {0: 0, 1: 1}, protocol)


class TestTarAtFar:
    def test_perfectly_separated(self):
        table = tar_at_far([0.9, 0.8], [0.1, 0.2], [0.5])
        assert table[0.5].tar == 1.0

    def test_indistinguishable_scores(self):
        scores = list(np.linspace(0, 1, 100))
        table = tar_at_far(scores, scores, [0.1, 0.25, 0.5])
        for f, point in table.items():
            assert point.tar == pytest.approx(f, abs=0.02)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            n_g = int(rng.integers(5, 400))
            n_i = int(rng.integers(5, 400))
            genuine = rng.normal(0.6, 0.2, n_g)
            impostor = rng.normal(0.3, 0.2, n_i)
            targets = [1e-3, 1e-2, 0.1, 0.5, 1.0]
            table = tar_at_far(genuine, impostor, targets)
            for f in targets:
                t_ref, tar_ref = tar_at_far_oracle(genuine, impostor, f)
                assert table[f].threshold == t_ref, (trial, f)
                assert table[f].tar == tar_ref, (trial, f)

    def test_unachievable_far_flagged(self):
        table = tar_at_far([0.9, 0.2], [0.1, 0.3, 0.5], [1e-4])
        point = table[1e-4]
        assert not point.achievable
        # conservative point: only scores above every impostor accepted
        assert point.tar == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            tar_at_far([], [0.1], [0.5])

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError, match="FAR target"):
            tar_at_far([0.5], [0.1], [0.0])

    def test_monotone_in_far_target(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            genuine = rng.normal(0.5, 0.3, 50)
            impostor = rng.normal(0.2, 0.3, 70)
            targets = sorted(rng.uniform(0.001, 1.0, 6))
            table = tar_at_far(genuine, impostor, targets)
            tars = [table[f].tar for f in targets]
            assert all(a <= b + 1e-12 for a, b in zip(tars, tars[1:]))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_tar_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    genuine = rng.normal(0.5, 0.25, int(rng.integers(3, 60)))
    impostor = rng.normal(0.25, 0.25, int(rng.integers(3, 60)))
    targets = [0.01, 0.2, 1.0]
    base = tar_at_far(genuine, impostor, targets)
    shuffled = tar_at_far(rng.permutation(genuine), rng.permutation(impostor), targets)
    for f in targets:
        assert base[f] == shuffled[f]


class TestAttributeAccuracy:
    def test_perfect(self):
        probs = np.ones((10, 3))
        targets = np.ones((10, 3))
        np.testing.assert_allclose(accuracy_from_probs(probs, targets), 1.0)

    def test_ties_predict_positive(self):
        probs = np.full((4, 1), 0.5)
        targets = np.array([[1.0], [1.0], [0.0], [0.0]])
        np.testing.assert_allclose(accuracy_from_probs(probs, targets), 0.5)

    def test_random_vs_counting_oracle(self):
        rng = np.random.default_rng(3)
        probs = rng.uniform(size=(50, 4))
        targets = rng.integers(0, 2, size=(50, 4)).astype(float)
        got = accuracy_from_probs(probs, targets)
        for k in range(4):
            correct = sum(
                1 for i in range(50)
                if (probs[i, k] >= 0.5) == (targets[i, k] == 1.0)
            )
            assert got[k] == pytest.approx(correct / 50)
        assert ((got >= 0) & (got <= 1)).all()


class TestReports:
    def test_report_and_roc(self):
        rng = np.random.default_rng(4)
        genuine = rng.normal(0.7, 0.1, 40)
        impostor = rng.normal(0.2, 0.1, 40)
        report = verification_report(genuine, impostor, far_targets=(0.01, 0.1, 1.0))
        assert set(report.tar_at_far) == {0.01, 0.1, 1.0}
        fars = [p[0] for p in report.roc]
        tars = [p[1] for p in report.roc]
        assert fars == sorted(fars, reverse=True)
        assert tars == sorted(tars, reverse=True)

    def test_table_format_and_records(self):
        genuine, impostor = [0.9, 0.8, 0.7], [0.1, 0.2]
        report = verification_report(genuine, impostor, far_targets=(0.5, 1.0))
        text, records = ablation_report([("baseline", report), ("dual", report)],
                                        far_targets=(0.5, 1.0))
        assert "baseline" in text and "dual" in text
        assert len(records) == 4
        assert records[0][0] == "baseline" and records[0][1] == 0.5
        assert all(len(r) == 4 for r in records)

    def test_unachievable_flag_rendered(self):
        report = verification_report([0.9], [0.1, 0.2], far_targets=(1e-3,))
        text = format_verification_table([("x", report.tar_at_far)], (1e-3,))
        assert "*" in text
