from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csnat.masking import CN, EN, MaskPlan, Vocabulary
from csnat.scoring import (DEL, INS, MATCH, SUB, ScoringError, cs_point_counts, cs_point_mer, edit_distance,
                           format_report, mask_accuracy, mer, parse_report)

LM = Vocabulary(["a", "b", "你", "好"], [EN, EN, CN, CN]).langmap
EN_A, EN_B, CN_A, CN_B = 1, 2, 3, 4


def recursive_distance(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j + 1) + (a[i] != b[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)
    return go(0, 0)


def test_edit_distance_examples():
    assert edit_distance([1, 2, 3], [1, 2, 3])[0] == 0
    d, ali = edit_distance([1, 2, 3], [1, 3])
    assert d == 1 and ali.counts()[DEL] == 1
    assert edit_distance([], [1, 2])[0] == 2


def test_matches_recursion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = tuple(rng.integers(1, 4, size=rng.integers(0, 9)).tolist())
        b = tuple(rng.integers(1, 4, size=rng.integers(0, 9)).tolist())
        assert edit_distance(a, b)[0] == recursive_distance(a, b)


def test_backtrace_prefers_substitution_over_indel():
    _, ali = edit_distance([1], [2])
    assert [op.kind for op in ali.ops] == [SUB]


seqs = st.lists(st.integers(1, 4), max_size=10)


@given(seqs, seqs, seqs)
def test_metric_properties_and_replay(a, b, c):
    dab, ali = edit_distance(a, b)
    assert dab == edit_distance(b, a)[0]
    assert edit_distance(a, c)[0] <= dab + edit_distance(b, c)[0]
    assert ali.replay(a, b) == list(b)
    assert ali.cost == dab
    counts = ali.counts()
    assert counts[MATCH] + counts[SUB] + counts[DEL] == len(a)
    assert counts[MATCH] + counts[SUB] + counts[INS] == len(b)


def test_mer_examples():
    assert mer([[1, 2]], [[1, 2]]) == 0.0
    assert mer([[1, 2, 3, 4]], [[1, 2, 9, 4]]) == 25.0
    with pytest.raises(ScoringError):
        mer([[]], [[1]])
    with pytest.raises(ScoringError):
        mer([[1]], [])


def test_mer_is_pooled_not_averaged():
    refs = [[1], [1, 2, 3, 4], [1, 2, 3, 4, 5]]
    hyps = [[2], [1, 2, 3, 4], [1, 2, 3, 4, 5]]
    # pooled 1/10; the per-utterance mean would be (100 + 0 + 0) / 3
    assert mer(refs, hyps) == pytest.approx(10.0)


def test_cs_point_mer_examples():
    assert cs_point_mer([[CN_A, EN_A]], [[CN_A, EN_B]], LM) == 50.0
    assert cs_point_mer([[CN_A, EN_A, CN_B]], [[CN_A, EN_A, CN_B]], LM) == 0.0
    with pytest.raises(ScoringError):
        cs_point_mer([[EN_A, EN_B]], [[EN_A]], LM)


def test_cs_point_insertions_follow_previous_ref_token():
    # insertion after the flagged EN token counts; after an unflagged token it does not
    assert cs_point_counts([CN_A, EN_A], [CN_A, EN_A, EN_B], LM) == (1, 2)
    assert cs_point_counts([EN_A, EN_B, CN_A], [EN_A, EN_A, EN_B, CN_A], LM) == (0, 2)
    # an insertion before any ref token is never at a switch point
    assert cs_point_counts([CN_A, EN_A], [EN_B, CN_A, EN_A], LM) == (0, 2)


def test_mask_accuracy_examples():
    dists = np.log(np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]]))
    plan = MaskPlan(3, (0, 1, 2))
    assert mask_accuracy(dists, [1, 2, 1], plan) == 1.0
    assert mask_accuracy(dists, [2, 1, 2], plan) == 0.0
    assert mask_accuracy(dists, [1, 2, 2], plan) == pytest.approx(2 / 3)
    assert mask_accuracy(np.zeros((1, 3)), [1], MaskPlan(1, (0,))) == 1.0  # tie goes to lowest id
    with pytest.raises(ScoringError):
        mask_accuracy(dists, [1, 2, 1], MaskPlan(3, ()))


def test_report_round_trip():
    text = format_report({"mer": 12.5, "utterances": 3})
    assert text == "mer=12.5000\nutterances=3\n"
    assert parse_report(text) == {"mer": "12.5000", "utterances": "3"}
