import itertools

import numpy as np
import pytest

from unitstream import metrics as M


def test_identical_strings_zero():
    assert M.wer("a b c", "a b c").rate == 0.0
    assert M.cer("abc", "abc").rate == 0.0


def test_single_substitution_third():
    rep = M.wer("a b c", "a x c")
    assert rep.rate == pytest.approx(1 / 3)
    assert (rep.substitutions, rep.insertions, rep.deletions) == (1, 0, 0)


def test_cer_single_substitution():
    assert M.cer("abc", "abd").rate == pytest.approx(1 / 3)


def test_empty_hypothesis_all_deletions():
    rep = M.wer("one two three", "")
    assert rep.rate == 1.0
    assert rep.deletions == 3


def test_empty_reference_rejected():
    with pytest.raises(M.EmptyReferenceError):
        M.wer("...", "hello")  # punctuation-only reference normalizes away


def test_normalization_lowercase_punct():
    assert M.wer("Hello, World!", "hello world").rate == 0.0
    assert M.cer("A  B", "a b").rate == 0.0  # whitespace runs collapse


def test_distance_symmetry(rng):
    rep = M.wer("a b c d", "a c x")
    rev = M.wer("a c x", "a b c d")
    assert rep.distance == rev.distance
    assert rep.insertions == rev.deletions and rep.deletions == rev.insertions


# --------------------------------------------------------- independent oracles


def _oracle_distance(ref, hyp):
    # memoized recursive formulation, structurally unlike the row-DP
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        cost = 0 if ref[i - 1] == hyp[j - 1] else 1
        return min(d(i - 1, j - 1) + cost, d(i - 1, j) + 1, d(i, j - 1) + 1)

    return d(len(ref), len(hyp))


def _brute_force_distance(ref, hyp):
    # plain exponential recursion; exact for tiny sequences
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    sub = _brute_force_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0])
    dele = _brute_force_distance(ref[1:], hyp) + 1
    ins = _brute_force_distance(ref, hyp[1:]) + 1
    return min(sub, dele, ins)


def test_wer_matches_independent_dp(rng):
    vocab = ["a", "b", "c", "d", "e"]
    for _ in range(200):
        ref = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(1, 10))]
        hyp = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(0, 10))]
        rep = M.wer(" ".join(ref), " ".join(hyp))
        assert rep.distance == _oracle_distance(tuple(ref), tuple(hyp))


def test_dp_matches_brute_force_short(rng):
    for _ in range(60):
        ref = "".join("ab"[i] for i in rng.integers(0, 2, size=rng.integers(1, 8)))
        hyp = "".join("ab"[i] for i in rng.integers(0, 2, size=rng.integers(0, 8)))
        assert M.cer(ref, hyp).distance == _brute_force_distance(ref, hyp)


def test_decomposition_sums_to_distance(rng):
    vocab = ["w1", "w2", "w3"]
    for _ in range(50):
        ref = [vocab[i] for i in rng.integers(0, 3, size=rng.integers(1, 7))]
        hyp = [vocab[i] for i in rng.integers(0, 3, size=rng.integers(0, 7))]
        rep = M.wer(" ".join(ref), " ".join(hyp))
        assert rep.substitutions + rep.insertions + rep.deletions == rep.distance
        assert rep.distance == _oracle_distance(tuple(ref), tuple(hyp))


# ------------------------------------------------------------------ aggregate


def test_aggregate_single_report():
    rep = M.wer("a b", "a c")
    assert M.aggregate([rep]).rate == rep.rate


def test_aggregate_is_pooled_not_mean():
    short = M.ErrorRateReport(substitutions=1, insertions=0, deletions=0, reference_len=1)
    long = M.ErrorRateReport(substitutions=0, insertions=0, deletions=0, reference_len=9)
    assert M.aggregate([short, long]).rate == pytest.approx(0.1)  # not 0.5


def test_aggregate_order_invariant(rng):
    reports = [
        M.ErrorRateReport(int(s), int(i), int(d), int(n))
        for s, i, d, n in rng.integers(1, 5, size=(6, 4))
    ]
    base = M.aggregate(reports).rate
    for perm in itertools.islice(itertools.permutations(reports), 10):
        assert M.aggregate(perm).rate == base


def test_aggregate_empty_rejected():
    with pytest.raises(M.EmptyReferenceError):
        M.aggregate([])
