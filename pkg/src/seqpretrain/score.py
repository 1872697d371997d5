"""Error-rate scoring (CER / WER) by Levenshtein alignment."""

from dataclasses import dataclass
from typing import Hashable, Iterable, List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.substitutions + other.substitutions,
                           self.insertions + other.insertions,
                           self.deletions + other.deletions,
                           self.reference_length + other.reference_length)


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> ErrorCounts:
    """Unit-cost alignment of ``hyp`` against ``ref``.

    The total is the Levenshtein distance. When several optimal alignments
    exist, the backtrace prefers match/substitution, then deletion, then
    insertion at each cell, which fixes the S/D/I split.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (r != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)

    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorCounts(int(s), ins, dels, n)


def error_rate(counts: ErrorCounts) -> float:
    """Percent errors, ``100 * (S + I + D) / N``; can exceed 100."""
    if counts.reference_length <= 0:
        raise ValueError("error rate undefined for an empty reference")
    return 100.0 * counts.errors / counts.reference_length


def corpus_counts(pairs: Iterable[ErrorCounts]) -> ErrorCounts:
    total = ErrorCounts()
    for c in pairs:
        total = total + c
    return total


def tokenize_for_metric(text: str, mode: str = "char",
                        pieces: Optional[Iterable[str]] = None) -> List[str]:
    """Split ``text`` into scoring symbols.

    ``char``: every non-whitespace character. ``word``: whitespace-split.
    ``piece``: each word greedily segmented longest-match-first against
    ``pieces``; an unsegmentable remainder falls back to single characters.
    """
    if mode == "char":
        return [c for c in text if not c.isspace()]
    if mode == "word":
        return text.split()
    if mode != "piece":
        raise ValueError(f"mode must be char, word or piece, got {mode!r}")
    if pieces is None:
        raise ValueError("piece mode needs a piece vocabulary")
    vocab = set(pieces)
    longest = max((len(p) for p in vocab), default=1)
    out = []
    for word in text.split():
        i = 0
        while i < len(word):
            for L in range(min(longest, len(word) - i), 0, -1):
                if word[i:i + L] in vocab or L == 1:
                    out.append(word[i:i + L])
                    i += L
                    break
    return out
