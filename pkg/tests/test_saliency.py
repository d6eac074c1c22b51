import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wstal.saliency import (
    DifferenceSet,
    assign_labels,
    diff_values,
    random_partition,
    requested_salient_count,
    score_partition,
    selected_pairs,
)


class TestDiffValues:
    def test_l1_hand_case(self):
        tau = diff_values(np.array([[1.0, 2.0], [3.0, 1.0]]), "l1").tau
        np.testing.assert_array_equal(tau, [3.0])

    def test_identical_snippets_zero_for_all_metrics(self):
        f = np.tile([1.0, -2.0, 0.5], (4, 1))
        for metric in ("l1", "l2", "cosine"):
            np.testing.assert_allclose(diff_values(f, metric).tau, 0.0, atol=1e-12)

    def test_orthogonal_hand_case(self):
        f = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert diff_values(f, "l2").tau[0] == pytest.approx(np.sqrt(2.0))
        assert diff_values(f, "cosine").tau[0] == pytest.approx(1.0)

    def test_cosine_zero_norm_snippet_is_max_dissimilar(self, caplog):
        f = np.array([[0.0, 0.0], [1.0, 0.0]])
        with caplog.at_level("WARNING"):
            tau = diff_values(f, "cosine").tau
        assert tau[0] == 1.0
        assert any("zero-norm" in r.message for r in caplog.records)

    def test_too_short_video_rejected(self):
        with pytest.raises(ValueError):
            diff_values(np.ones((1, 4)), "l1")

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_scaling_keeps_order_and_scales_l1_l2(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((8, 5))
        alpha = float(rng.uniform(0.1, 10.0))
        for metric in ("l1", "l2"):
            tau = diff_values(f, metric).tau
            tau_scaled = diff_values(alpha * f, metric).tau
            np.testing.assert_allclose(tau_scaled, alpha * tau, rtol=1e-9)
        cos = diff_values(f, "cosine").tau
        cos_scaled = diff_values(alpha * f, "cosine").tau
        np.testing.assert_allclose(cos_scaled, cos, atol=1e-9)


class TestAssignLabels:
    def test_hand_sort_marks_later_snippet(self):
        part = assign_labels(DifferenceSet(np.array([5.0, 1.0, 3.0]), "l1"), salient_ratio=0.5)
        np.testing.assert_array_equal(part.b, [0, 1, 0, 1])
        assert part.K == 2

    def test_full_ratio_saturates_at_pairs(self):
        part = assign_labels(DifferenceSet(np.array([1.0, 2.0, 3.0]), "l1"), salient_ratio=1.0)
        np.testing.assert_array_equal(part.b, [0, 1, 1, 1])
        assert part.K == 3

    def test_all_equal_tau_prefers_early_pairs(self):
        part = assign_labels(DifferenceSet(np.zeros(5), "l1"), salient_ratio=0.5)
        np.testing.assert_array_equal(part.b, [0, 1, 1, 1, 0, 0])

    def test_k_floor_of_one(self):
        assert requested_salient_count(2, 0.1) == 1
        part = assign_labels(DifferenceSet(np.array([0.7]), "l1"), salient_ratio=0.1)
        assert part.K == 1

    def test_mark_earlier_rule(self):
        part = assign_labels(DifferenceSet(np.array([5.0, 1.0, 3.0]), "l1"), 0.5, mark="earlier")
        np.testing.assert_array_equal(part.b, [1, 0, 1, 0])

    def test_mark_both_rule(self):
        part = assign_labels(DifferenceSet(np.array([5.0, 1.0, 3.0]), "l1"), 0.5, mark="both")
        np.testing.assert_array_equal(part.b, [1, 1, 0, 0])

    def test_determinism(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((20, 6))
        a = assign_labels(diff_values(f, "l1"), 0.5)
        b = assign_labels(diff_values(f, "l1"), 0.5)
        np.testing.assert_array_equal(a.b, b.b)

    @given(st.integers(2, 200), st.floats(0.01, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_partition_completeness(self, T, ratio):
        rng = np.random.default_rng(T)
        part = assign_labels(DifferenceSet(rng.uniform(size=T - 1), "l1"), ratio)
        assert int(part.b.sum()) == part.K
        assert len(part.salient_idx) + len(part.non_salient_idx) == T
        assert set(part.salient_idx) | set(part.non_salient_idx) == set(range(T))


class TestAblationPartitions:
    def test_random_partition_is_seeded(self):
        a = random_partition(30, 0.5, np.random.default_rng(5))
        b = random_partition(30, 0.5, np.random.default_rng(5))
        np.testing.assert_array_equal(a.b, b.b)
        assert a.K == 15

    def test_score_partition_ranks_snippets(self):
        part = score_partition(np.array([0.1, 0.9, 0.4, 0.8]), 0.5)
        np.testing.assert_array_equal(part.b, [0, 1, 0, 1])

    def test_selected_pairs_rank_order(self):
        pairs = selected_pairs(DifferenceSet(np.array([5.0, 1.0, 3.0]), "l1"), k=2)
        np.testing.assert_array_equal(pairs, [0, 2])
