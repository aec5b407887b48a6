import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlgen.errors import ValidationError
from vlgen.metrics import accuracy, bleu, bleu1, bleu4, bleu_stats

HYP = "a red circle on a blue square"
REF = "a red circle above a blue square"


def test_identity():
    assert bleu4([REF], [REF]) == 1.0


def test_no_shared_four_gram():
    assert bleu4(["a b c d e"], ["e d c b a"]) == 0.0


def test_hand_worked_counts():
    # unigrams 6/7, bigrams {a red, red circle, a blue, blue square} 4/6,
    # trigrams {a red circle, a blue square} 2/5, four-grams none of 4
    matches, totals, h, r = bleu_stats([HYP], [REF])
    assert matches == [6, 4, 2, 0] and totals == [7, 6, 5, 4] and h == r == 7


def test_hand_worked_values():
    assert bleu4([HYP], [REF]) == 0.0
    assert abs(bleu([HYP], [REF], 3) - (6 / 7 * 4 / 6 * 2 / 5) ** (1 / 3)) < 1e-9
    assert abs(bleu([HYP], [REF], 2) - math.sqrt(6 / 7 * 4 / 6)) < 1e-9
    assert abs(bleu1([HYP], [REF]) - 6 / 7) < 1e-9


def test_brevity_penalty():
    # short hypothesis with perfect unigram precision
    got = bleu1(["a red circle"], [REF])
    assert abs(got - math.exp(1 - 7 / 3)) < 1e-12


def test_token_lists_equal_strings():
    assert bleu([HYP.split()], [REF.split()], 3) == bleu([HYP], [REF], 3)


def test_corpus_level_pooling():
    hyps = [HYP, "a green star"]
    refs = [REF, "a green star"]
    # four-gram counts pool: 0 + 0 of 4 + 0 -> still zero
    assert bleu4(hyps, refs) == 0.0
    m, t, _, _ = bleu_stats(hyps, refs)
    assert m == [9, 6, 3, 0] and t == [10, 8, 6, 4]


def test_empty_hypothesis_set():
    with pytest.raises(ValidationError):
        bleu4([], [])


def test_length_mismatch():
    with pytest.raises(ValidationError):
        bleu4(["a"], ["a", "b"])


words = st.sampled_from("a red blue green circle square star on above below left of".split())
sents = st.lists(words, min_size=1, max_size=9).map(" ".join)


@given(st.lists(st.tuples(sents, sents), min_size=1, max_size=6), st.randoms())
def test_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = bleu4([h for h, _ in pairs], [r for _, r in pairs])
    b = bleu4([h for h, _ in shuffled], [r for _, r in shuffled])
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_accuracy():
    assert accuracy(["x", "y", "z"], ["x", "q", "z"]) == pytest.approx(2 / 3)
    with pytest.raises(ValidationError):
        accuracy(["x"], [])
