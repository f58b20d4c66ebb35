import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossprune.tensor_core import seeded_tensor
from crossprune.trimming import (
    Selection,
    SelectionEmptyError,
    accumulate_importance,
    baseline_random,
    baseline_spatial,
    select_topk_per_head,
    synthetic_attention,
    topk_count,
    trim,
    trim_scores,
    union_selection,
)
from oracles import exhaustive_trim, naive_importance


def uniform_attn(h, m, L):
    return np.full((h, m, L), 1.0 / L, dtype=np.float32)


def test_single_head_single_query_scores_equal_row():
    row = np.array([[[0.1, 0.7, 0.2]]], dtype=np.float32)
    assert np.array_equal(accumulate_importance(row), row[:, 0, :].astype(np.float64))


def test_uniform_attention_scores():
    assert np.allclose(accumulate_importance(uniform_attn(1, 4, 8)), 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_importance_matches_triple_loop_exactly(seed):
    attn = synthetic_attention(2, 3, 4, seed)
    assert accumulate_importance(attn).tolist() == naive_importance(attn)


def test_importance_rows_sum_to_query_count():
    attn = synthetic_attention(3, 7, 11, 5)
    assert np.allclose(accumulate_importance(attn).sum(axis=1), 7, atol=1e-4)


def test_k_from_appendix_example():
    assert topk_count(0.25, 32) == 8


def test_topk_example():
    scores = np.array([[0.5, 0.1, 0.3, 0.1]])
    assert select_topk_per_head(scores, 0.5) == [(0, 2)]
    kept, _ = exhaustive_trim(scores.tolist(), 0.5)
    assert kept == [0, 2]


def test_topk_ties_go_to_lower_index():
    assert select_topk_per_head(np.ones((1, 4)), 0.5) == [(0, 1)]


def test_topk_floor_with_minimum_one():
    assert topk_count(0.01, 10) == 1
    assert topk_count(0.99, 10) == 9


def test_union_example():
    sel = union_selection([(0, 2), (1, 2)], 4)
    assert sel.kept == (0, 1, 2)
    assert sel.remaining_ratio == 0.75


def test_union_identical_heads():
    sel = union_selection([(1, 3)] * 4, 8)
    assert sel.kept == (1, 3) and sel.remaining_ratio == 2 / 8


def test_union_disjoint_heads():
    sel = union_selection([(0, 1), (2, 3), (4, 5)], 8)
    assert len(sel.kept) == 6


def test_union_empty_fails_hard():
    with pytest.raises(SelectionEmptyError):
        union_selection([(), ()], 4)


def test_union_rejects_out_of_range():
    with pytest.raises(ValueError):
        union_selection([(0, 9)], 4)


def test_trim_full_ratio_keeps_everything():
    assert trim(synthetic_attention(2, 3, 10, 1), 1.0).kept == tuple(range(10))


def test_trim_uniform_tie_break():
    sel = trim(uniform_attn(2, 4, 8), 0.25)
    assert sel.kept == (0, 1)
    assert sel.per_head == ((0, 1), (0, 1))


def test_random_baseline():
    assert baseline_random(10, 1.0, 3).kept == tuple(range(10))
    a = baseline_random(1024, 0.5, 1)
    b = baseline_random(1024, 0.5, 2)
    assert len(a.kept) == 512 and a.kept != b.kept
    assert baseline_random(1024, 0.5, 1) == a
    assert a.per_head == ()


def test_random_baseline_rounds_half_up():
    assert len(baseline_random(5, 0.5, 0).kept) == 3


def test_random_baseline_is_roughly_uniform():
    counts = np.zeros(16)
    for s in range(2000):
        counts[list(baseline_random(16, 0.25, s).kept)] += 1
    # each index expected 500 times; binomial sd ~19
    assert np.all(np.abs(counts - 500) < 100)


def test_spatial_baseline():
    assert baseline_spatial(8, 0.5, 2).kept == (0, 2, 4, 6)
    assert baseline_spatial(8, 1.0, 2).kept == tuple(range(8))
    assert baseline_spatial(9, 0.5, 2).kept == (0, 2, 4, 6, 8)
    assert baseline_spatial(12, 0.5, 4).kept == (0, 1, 4, 5, 8, 9)


def test_selection_json_roundtrip():
    sel = trim(synthetic_attention(2, 3, 8, 4), 0.25)
    doc = json.loads(sel.to_json())
    assert set(doc) == {"n_features", "k_ratio", "method", "kept", "per_head"}
    assert Selection.from_dict(doc) == sel


score_matrices = st.tuples(st.integers(1, 4), st.integers(1, 16), st.integers(0, 2**32)).map(
    lambda t: np.round(seeded_tensor((t[0], t[1]), t[2], 1.0).astype(np.float64) + 1.0, 1)
)


@settings(max_examples=200, deadline=None)
@given(score_matrices, st.sampled_from([0.25, 0.5]))
def test_trim_matches_exhaustive_oracle(scores, k_ratio):
    # rounding to one decimal forces plenty of ties
    kept, per_head = exhaustive_trim(scores.tolist(), k_ratio)
    sel = trim_scores(scores, k_ratio)
    assert list(sel.kept) == kept
    assert [set(t) for t in sel.per_head] == per_head


@settings(max_examples=200, deadline=None)
@given(score_matrices, st.sampled_from([0.1, 0.25, 0.5, 0.75]), st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_bounds_and_nesting(scores, r1, r2):
    H, L = scores.shape
    lo, hi = sorted((r1, r2))
    a, b = trim_scores(scores, lo), trim_scores(scores, hi)
    k = topk_count(lo, L)
    assert k / L <= a.remaining_ratio <= min(1, H * k / L)
    assert a.remaining_ratio > lo - 1 / L
    assert set(a.kept) <= set(b.kept)
    assert all(len(t) == k for t in a.per_head)


@settings(max_examples=100, deadline=None)
@given(score_matrices, st.floats(0.01, 100), st.integers(0, 3))
def test_scale_invariance(scores, c, head):
    head = head % scores.shape[0]
    scaled = scores.copy()
    scaled[head] *= c
    # scaling can perturb float ties, so compare on tie-free inputs
    if len(set(scores[head].tolist())) != scores.shape[1]:
        return
    assert select_topk_per_head(scaled, 0.5)[head] == select_topk_per_head(scores, 0.5)[head]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(2, 16), st.integers(0, 2**32))
def test_permutation_equivariance(H, L, seed):
    scores = seeded_tensor((H, L), seed, 1.0).astype(np.float64)  # continuous: ties have measure zero
    perm = np.random.default_rng(seed).permutation(L)
    base = trim_scores(scores, 0.5)
    permuted = trim_scores(scores[:, perm], 0.5)
    # column c of the permuted matrix is original feature perm[c]
    assert sorted(int(perm[c]) for c in permuted.kept) == list(base.kept)
