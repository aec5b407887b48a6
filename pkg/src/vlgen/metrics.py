"""Corpus BLEU-4 and accuracy helpers."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .errors import ValidationError


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(toks: list, n: int) -> Counter:
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def bleu_stats(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> tuple[list[int], list[int], int, int]:
    """Clipped n-gram matches, n-gram totals, hypothesis length and reference length."""
    if len(hypotheses) != len(references):
        raise ValidationError("one reference per hypothesis is required")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU with brevity penalty; any zero precision gives 0."""
    if not hypotheses:
        raise ValidationError("bleu needs at least one hypothesis")
    matches, totals, hyp_len, ref_len = bleu_stats(hypotheses, references, max_n)
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def bleu4(hypotheses: Sequence, references: Sequence) -> float:
    return bleu(hypotheses, references, 4)


def bleu1(hypotheses: Sequence, references: Sequence) -> float:
    return bleu(hypotheses, references, 1)


def accuracy(predictions: Sequence, targets: Sequence) -> float:
    if len(predictions) != len(targets):
        raise ValidationError("predictions and targets differ in length")
    if not targets:
        return 0.0
    return sum(p == t for p, t in zip(predictions, targets)) / len(targets)
