import csv
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biodiscover.aggregate import get_rule, majority_vote, weighted_sum, write_predictions


def dyadic_vectors(k_min=2, k_max=5, n_max=12):
    """Probability rows on a 1/8 grid so ties are frequent and sums exact."""

    @st.composite
    def build(draw):
        k = draw(st.integers(k_min, k_max))
        n = draw(st.integers(1, n_max))
        rows = []
        for _ in range(n):
            cuts = sorted(draw(st.lists(st.integers(0, 8), min_size=k - 1, max_size=k - 1)))
            parts = [b - a for a, b in zip([0] + cuts, cuts + [8])]
            rows.append([p / 8 for p in parts])
        return rows

    return build()


def majority_oracle(rows):
    k = len(rows[0])
    totals = [sum(Fraction(r[j]) for r in rows) for j in range(k)]
    rank = lambda j: (-totals[j], j)
    votes = Counter()
    for r in rows:
        top = max(r)
        votes[min((j for j in range(k) if r[j] == top), key=rank)] += 1
    best = max(votes.values())
    return min((j for j in range(k) if votes[j] == best), key=rank)


def weighted_oracle(rows):
    k = len(rows[0])
    scores = [sum(Fraction(max(r)) * Fraction(r[j]) for r in rows) for j in range(k)]
    best = max(scores)
    return scores.index(best)


@settings(max_examples=300, deadline=None)
@given(dyadic_vectors())
def test_majority_matches_exact_oracle(rows):
    assert majority_vote(rows).predicted == majority_oracle(rows)


@settings(max_examples=300, deadline=None)
@given(dyadic_vectors())
def test_weighted_matches_exact_oracle(rows):
    assert weighted_sum(rows).predicted == weighted_oracle(rows)


@settings(max_examples=200, deadline=None)
@given(dyadic_vectors(), st.randoms())
def test_rules_ignore_image_order(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    for rule in (majority_vote, weighted_sum):
        assert rule(shuffled).predicted == rule(rows).predicted


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6))
def test_single_image_is_its_argmax(raw):
    p = np.array(raw) / sum(raw)
    top = int(np.flatnonzero(p == p.max())[0])
    assert majority_vote([p]).predicted == top
    assert weighted_sum([p]).predicted == top


@settings(max_examples=200, deadline=None)
@given(dyadic_vectors())
def test_unanimous_images_decide(rows):
    first = rows[0]
    if list(first).count(max(first)) > 1:
        return
    same = [first] * 5
    top = int(np.argmax(first))
    assert majority_vote(same).predicted == top
    assert weighted_sum(same).predicted == top


def test_worked_examples():
    rows = [[0.6, 0.4, 0.0], [0.6, 0.4, 0.0], [0.0, 0.1, 0.9], [0.0, 0.1, 0.9], [0.0, 0.45, 0.55]]
    # votes: class 0 twice, class 2 three times
    mv = majority_vote(rows, "s1")
    assert mv.predicted == 2 and mv.scores == (2.0, 0.0, 3.0) and mv.n_images == 5
    # tied votes 1:1, summed probability favours class 1
    assert majority_vote([[0.5, 0.5, 0.0], [0.0, 0.25, 0.75], [0.5, 0.5, 0.0]]).predicted == 1
    # weights: 0.9 * 0.9 beats 0.6 * 0.6 + 0.55 * 0.55
    ws = weighted_sum([[0.6, 0.4], [0.1, 0.9], [0.55, 0.45]])
    assert ws.scores[1] == pytest.approx(0.6 * 0.4 + 0.9 * 0.9 + 0.55 * 0.45)
    assert ws.predicted == 1
    # exact tie in both totals goes to the lower index
    assert majority_vote([[0.5, 0.5], [0.5, 0.5]]).predicted == 0
    assert weighted_sum([[0.25, 0.75], [0.75, 0.25]]).predicted == 0


def test_rules_reject_empty_input():
    for rule in (majority_vote, weighted_sum):
        with pytest.raises(ValueError):
            rule(np.zeros((0, 3)))


def test_rule_lookup():
    assert get_rule("majority") is majority_vote
    assert get_rule("weighted") is weighted_sum
    assert get_rule(weighted_sum) is weighted_sum
    with pytest.raises(ValueError):
        get_rule("median")


def test_write_predictions(tmp_path):
    rows = [(majority_vote([[0.9, 0.1]], "a"), 0), (majority_vote([[0.2, 0.8]], "b"), 0)]
    write_predictions(tmp_path / "p.csv", rows, ["A a", "B b"])
    with open(tmp_path / "p.csv") as fh:
        got = list(csv.DictReader(fh))
    assert got[1] == {"specimen_id": "b", "rule": "majority", "predicted": "B b", "true": "A a", "n_images": "1"}
