"""Corpus BLEU, RIBES and UNK counting."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError

Tokens = Sequence[str]


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    bp: float
    hyp_len: int
    ref_len: int


@dataclass
class RibesReport:
    score: float
    nkt: float
    precision: float
    bp: float
    alpha: float = 0.25
    beta: float = 0.10
    degenerate: bool = False


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _lower(corpus: Iterable[Tokens]) -> list[list[str]]:
    return [[t.lower() for t in sent] for sent in corpus]


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4,
         case_insensitive: bool = True, smooth_add1: bool = False) -> BleuReport:
    """Corpus-level BLEU against a single reference per line, on a 0-100 scale.

    With ``smooth_add1`` the precisions for n > 1 get add-one smoothing
    (useful for sentence-level scores); by default any zero precision makes
    the score 0.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if case_insensitive:
        hypotheses, references = _lower(hypotheses), _lower(references)
    matches = [0] * max_n
    totals = [0] * max_n
    ref_totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            ref_totals[n - 1] += max(len(ref) - n + 1, 0)
    precisions = []
    log_sum, orders = 0.0, 0
    zero = False
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth_add1 and n > 0:
            m, t = m + 1, t + 1
        if t == 0:
            if ref_totals[n] == 0 and hyp_len > 0:
                # neither side is long enough for this order
                precisions.append(1.0)
                continue
            precisions.append(0.0)
            zero = True
            continue
        p = m / t
        precisions.append(p)
        if p == 0:
            zero = True
        else:
            log_sum += math.log(p)
            orders += 1
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if zero or hyp_len == 0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(log_sum / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def sentence_bleu(hyp: Tokens, ref: Tokens, smooth_add1: bool = True) -> float:
    return bleu([hyp], [ref], smooth_add1=smooth_add1).score


# --------------------------------------------------------------------- RIBES

def _occurrences(seq: Sequence, gram: tuple) -> int:
    n = len(gram)
    return sum(1 for i in range(len(seq) - n + 1) if tuple(seq[i:i + n]) == gram)


def _first_index(seq: Sequence, gram: tuple) -> int:
    n = len(gram)
    for i in range(len(seq) - n + 1):
        if tuple(seq[i:i + n]) == gram:
            return i
    return -1


def align(hyp: Tokens, ref: Tokens) -> list[int]:
    """Reference position of each alignable hypothesis word, in hypothesis order.

    A word is aligned by unigram if it occurs exactly once on both sides;
    otherwise the context is widened one word at a time (left context
    first, then right) until the n-gram occurs exactly once on both sides.
    """
    positions = []
    for i, word in enumerate(hyp):
        if word not in ref:
            continue
        if ref.count(word) == 1 and hyp.count(word) == 1:
            positions.append(ref.index(word))
            continue
        for window in range(1, max(i + 1, len(hyp) - i + 1)):
            if window <= i:
                gram = tuple(hyp[i - window:i + 1])
                if _occurrences(ref, gram) == 1 and _occurrences(hyp, gram) == 1:
                    positions.append(_first_index(ref, gram) + len(gram) - 1)
                    break
            if i + window < len(hyp):
                gram = tuple(hyp[i:i + window + 1])
                if _occurrences(ref, gram) == 1 and _occurrences(hyp, gram) == 1:
                    positions.append(_first_index(ref, gram))
                    break
    return positions


def kendall_tau(ranks: Sequence[int]) -> float:
    n = len(ranks)
    pairs = n * (n - 1) // 2
    ascending = sum(1 for i in range(n) for j in range(i + 1, n) if ranks[i] < ranks[j])
    # one integer division keeps the result correctly rounded
    return (2 * ascending - pairs) / pairs


def ribes(hypothesis: Tokens, reference: Tokens, alpha: float = 0.25, beta: float = 0.10,
          case_insensitive: bool = True) -> RibesReport:
    """Sentence RIBES = NKT * precision**alpha * BP**beta."""
    if not reference:
        raise DataError("ribes: empty reference")
    hyp = [t.lower() for t in hypothesis] if case_insensitive else list(hypothesis)
    ref = [t.lower() for t in reference] if case_insensitive else list(reference)
    if not hyp:
        return RibesReport(0.0, 0.0, 0.0, 0.0, alpha, beta, degenerate=True)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    ranks = align(hyp, ref)
    if len(ranks) == 1 and len(ref) == 1:
        precision = 1.0 / len(hyp)
        return RibesReport(precision ** alpha * bp ** beta, 1.0, precision, bp, alpha, beta)
    if len(ranks) < 2:
        return RibesReport(0.0, 0.0, 0.0, bp, alpha, beta, degenerate=True)
    nkt = (kendall_tau(ranks) + 1.0) / 2.0
    precision = len(ranks) / len(hyp)
    return RibesReport(nkt * precision ** alpha * bp ** beta, nkt, precision, bp, alpha, beta)


def corpus_ribes(hypotheses: Sequence[Tokens], references: Sequence[Tokens], alpha: float = 0.25,
                 beta: float = 0.10) -> float:
    if len(hypotheses) != len(references):
        raise DataError(f"ribes: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        return 0.0
    return sum(ribes(h, r, alpha, beta).score for h, r in zip(hypotheses, references)) / len(hypotheses)


# ----------------------------------------------------------------------- UNK

@dataclass
class UnkCounts:
    per_file: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_file.values())


def count_unk_lines(lines: Iterable[Tokens], unk_token: str = "UNK") -> int:
    return sum(sum(1 for t in line if t == unk_token) for line in lines)


def count_unk(corpus: dict[str, Iterable[Tokens]], unk_token: str = "UNK") -> UnkCounts:
    """``corpus`` maps a file label to its tokenized lines."""
    return UnkCounts({name: count_unk_lines(lines, unk_token) for name, lines in corpus.items()})
