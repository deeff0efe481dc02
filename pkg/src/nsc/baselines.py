"""Selection baselines: pass one system through, or pick per sentence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .datasim import UNK_TOKEN
from .errors import ConfigurationError
from .evaluation import sentence_bleu


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str  # "fixed", "oracle" or "heuristic"
    index: int = 0

    @classmethod
    def parse(cls, text: str) -> "SelectionPolicy":
        if text in ("oracle", "heuristic"):
            return cls(text)
        if text.startswith("fixed:"):
            try:
                return cls("fixed", int(text.split(":", 1)[1]))
            except ValueError:
                pass
        raise ConfigurationError(f"bad policy {text!r}; expected fixed:K, oracle or heuristic")


def select(hypotheses: Sequence[Sequence[str]], policy: SelectionPolicy,
           reference: Sequence[str] | None = None) -> list[str]:
    """Choose one of the K system outputs for a sentence.

    oracle picks the highest add-one smoothed sentence BLEU; heuristic picks
    the fewest UNKs, then the longest.  Ties go to the lowest index.
    """
    K = len(hypotheses)
    if K == 0:
        raise ConfigurationError("select: no hypotheses")
    if policy.kind == "fixed":
        if not 0 <= policy.index < K:
            raise ConfigurationError(f"fixed system index {policy.index} outside 0..{K - 1}")
        return list(hypotheses[policy.index])
    if policy.kind == "oracle":
        if reference is None:
            raise ConfigurationError("oracle selection needs a reference")
        scores = [sentence_bleu(h, reference) for h in hypotheses]
        best = max(range(K), key=lambda k: (scores[k], -k))
        return list(hypotheses[best])
    if policy.kind == "heuristic":
        best = min(range(K), key=lambda k: (sum(t == UNK_TOKEN for t in hypotheses[k]), -len(hypotheses[k]), k))
        return list(hypotheses[best])
    raise ConfigurationError(f"unknown policy kind {policy.kind!r}")


def select_corpus(systems: Sequence[Sequence[Sequence[str]]], policy: SelectionPolicy,
                  references: Sequence[Sequence[str]] | None = None) -> list[list[str]]:
    """``systems[k][i]`` is system k's output for sentence i."""
    n = len(systems[0]) if systems else 0
    refs = references if references is not None else [None] * n
    return [select([s[i] for s in systems], policy, refs[i]) for i in range(n)]
