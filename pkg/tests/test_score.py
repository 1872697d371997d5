import itertools

import pytest
from hypothesis import given, settings, strategies as st

from seqpretrain.score import (ErrorCounts, corpus_counts, edit_distance, error_rate,
                               tokenize_for_metric)


def brute_force_distance(a, b):
    """Plain recursive Levenshtein with memoization, no backtrace."""
    memo = {}

    def go(i, j):
        if (i, j) not in memo:
            if i == 0 or j == 0:
                memo[i, j] = i + j
            else:
                memo[i, j] = min(go(i - 1, j) + 1, go(i, j - 1) + 1,
                                 go(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
        return memo[i, j]
    return go(len(a), len(b))


def test_identical():
    assert edit_distance(list("abc"), list("abc")) == ErrorCounts(0, 0, 0, 3)


def test_kitten_sitting():
    c = edit_distance(list("kitten"), list("sitting"))
    assert c.errors == 3 == brute_force_distance("kitten", "sitting")
    assert (c.substitutions, c.insertions, c.deletions) == (2, 1, 0)


def test_empty_reference():
    assert edit_distance([], list("abcd")) == ErrorCounts(0, 4, 0, 0)
    assert edit_distance(list("ab"), []) == ErrorCounts(0, 0, 2, 2)


def test_tie_break_prefers_substitution():
    # "ab" -> "ba": two substitutions or one deletion + one insertion; both cost 2
    c = edit_distance(list("ab"), list("ba"))
    assert (c.substitutions, c.insertions, c.deletions) == (2, 0, 0)


def test_error_rate_values():
    assert error_rate(ErrorCounts(0, 0, 0, 5)) == 0.0
    assert error_rate(ErrorCounts(2, 2, 1, 5)) == 100.0
    assert error_rate(ErrorCounts(0, 7, 0, 2)) == 350.0
    with pytest.raises(ValueError):
        error_rate(ErrorCounts(0, 1, 0, 0))


def test_corpus_rate_is_not_mean_of_rates():
    a = edit_distance(list("a"), list("b"))          # 1 error / 1 -> 100%
    b = edit_distance(list("abcdefghij"), list("abcdefghij"))  # 0 / 10
    corpus = error_rate(corpus_counts([a, b]))
    assert corpus == pytest.approx(100 / 11)
    assert corpus != (error_rate(a) + error_rate(b)) / 2


def test_tokenize_modes():
    assert tokenize_for_metric("ab c", "char") == ["a", "b", "c"]
    assert tokenize_for_metric("ab c", "word") == ["ab", "c"]
    assert tokenize_for_metric("unhappy day", "piece", ["un", "happ", "y", "da"]) == \
        ["un", "happ", "y", "da", "y"]
    with pytest.raises(ValueError):
        tokenize_for_metric("x", "bytes")


words = st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=5), max_size=6)


@settings(max_examples=100)
@given(words, st.sampled_from([" ", "  ", "\t", " \n "]))
def test_word_mode_roundtrip(ws, sep):
    text = sep + sep.join(ws) + sep
    normalized = " ".join(text.split())
    assert " ".join(tokenize_for_metric(text, "word")) == normalized


seqs = st.lists(st.sampled_from("abcd"), max_size=7)


@settings(max_examples=200)
@given(seqs, seqs)
def test_distance_matches_brute_force_and_counts_are_consistent(a, b):
    c = edit_distance(a, b)
    assert c.errors == brute_force_distance(a, b)
    assert c.reference_length == len(a)
    # every ref symbol is matched, substituted or deleted; hyp symbols likewise
    assert len(a) - c.deletions == len(b) - c.insertions


@settings(max_examples=200)
@given(seqs, seqs, seqs)
def test_metric_axioms(a, b, c):
    dab = edit_distance(a, b).errors
    assert dab == edit_distance(b, a).errors
    assert (dab == 0) == (a == b)
    assert edit_distance(a, c).errors <= dab + edit_distance(b, c).errors


@pytest.mark.parametrize("perm", list(itertools.permutations("abcd"))[::5])
def test_relabeling_invariance(perm):
    relabel = dict(zip("abcd", perm))
    ref, hyp = list("abcadbcda"), list("bacddcab")
    mapped = edit_distance([relabel[x] for x in ref], [relabel[x] for x in hyp])
    assert mapped.errors == edit_distance(ref, hyp).errors
