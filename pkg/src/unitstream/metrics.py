"""Word and character error rates between reference text and a transcript.

Normalization (lowercase, punctuation stripped) is a documented choice of
this artifact, not inherited from anywhere. Corpus aggregation pools edit
counts over pooled reference length, the usual ASR convention, rather than
averaging per-utterance rates.
"""
from __future__ import annotations

import string
from dataclasses import dataclass


class EmptyReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorRateReport:
    substitutions: int
    insertions: int
    deletions: int
    reference_len: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.distance / self.reference_len


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_words(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


def normalize_chars(text: str) -> list[str]:
    cleaned = " ".join(text.lower().translate(_PUNCT_TABLE).split())
    return list(cleaned)


def _edit_counts(ref: list, hyp: list) -> tuple[int, int, int]:
    """Levenshtein with unit costs, tracking an optimal (S, I, D) split."""
    n, m = len(ref), len(hyp)
    # dp[i][j] = (distance, subs, ins, dels) for ref[:i] vs hyp[:j]
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)] + [None] * m
        for j in range(1, m + 1):
            if ref[i - 1] == hyp[j - 1]:
                d, s, ins, dl = prev[j - 1]
                cur[j] = (d, s, ins, dl)
                continue
            sub = prev[j - 1]
            dele = prev[j]
            inse = cur[j - 1]
            best = min(sub[0], dele[0], inse[0]) + 1
            if sub[0] + 1 == best:
                cur[j] = (best, sub[1] + 1, sub[2], sub[3])
            elif dele[0] + 1 == best:
                cur[j] = (best, dele[1], dele[2], dele[3] + 1)
            else:
                cur[j] = (best, inse[1], inse[2] + 1, inse[3])
        prev = cur
    _, s, ins, dl = prev[m]
    return s, ins, dl


def _error_rate(ref: list, hyp: list) -> ErrorRateReport:
    if not ref:
        raise EmptyReferenceError("reference is empty after normalization")
    s, i, d = _edit_counts(ref, hyp)
    return ErrorRateReport(substitutions=s, insertions=i, deletions=d, reference_len=len(ref))


def wer(reference: str, hypothesis: str) -> ErrorRateReport:
    return _error_rate(normalize_words(reference), normalize_words(hypothesis))


def cer(reference: str, hypothesis: str) -> ErrorRateReport:
    return _error_rate(normalize_chars(reference), normalize_chars(hypothesis))


def aggregate(reports) -> ErrorRateReport:
    reports = list(reports)
    if not reports:
        raise EmptyReferenceError("no reports to aggregate")
    return ErrorRateReport(
        substitutions=sum(r.substitutions for r in reports),
        insertions=sum(r.insertions for r in reports),
        deletions=sum(r.deletions for r in reports),
        reference_len=sum(r.reference_len for r in reports),
    )
