"""Training data for combination models.

Two routes: cross-fold simulation (train a system on one half of the
corpus, translate the other half, and the reverse) and parameterized
corruption channels that imitate NMT-like and SMT-like error profiles.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .rng import stream

UNK_TOKEN = "UNK"
TASKS = ("copy", "reverse", "lexmap")


@dataclass(frozen=True)
class CorruptionProfile:
    kind: str
    oov_substitution_rate: float = 0.0
    omission_rate: float = 0.0
    repetition_rate: float = 0.0
    local_reorder_window: int = 0
    function_word_error_rate: float = 0.0
    seed: int = 0
    # chance that a position starts a local swap when the window is > 0
    reorder_rate: float = 0.1

    def __post_init__(self):
        for name in ("oov_substitution_rate", "omission_rate", "repetition_rate",
                     "function_word_error_rate", "reorder_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.local_reorder_window < 0:
            raise ConfigurationError("local_reorder_window must be >= 0")


PROFILES = {
    "nmt-like": CorruptionProfile("nmt-like", oov_substitution_rate=0.15, omission_rate=0.05, repetition_rate=0.05),
    "smt-like": CorruptionProfile("smt-like", local_reorder_window=3, function_word_error_rate=0.15),
    "pbmt-like": CorruptionProfile("pbmt-like", local_reorder_window=2, function_word_error_rate=0.10),
}


def profile(name: str, seed: int = 0) -> CorruptionProfile:
    if name not in PROFILES:
        raise ConfigurationError(f"unknown profile {name!r}; valid: {', '.join(PROFILES)}")
    return replace(PROFILES[name], seed=seed)


def corrupt(reference: Sequence[str], prof: CorruptionProfile, rng: np.random.Generator | None = None,
            frequencies: dict[str, int] | None = None, rare_threshold: float | None = None,
            function_words: Sequence[str] = ()) -> list[str]:
    """Pass ``reference`` through the channel described by ``prof``.

    Steps run in a fixed order: OOV substitution, omission, repetition,
    local reordering, function-word errors.  A token is OOV-eligible when
    its corpus frequency is below ``rare_threshold`` (every token is
    eligible when no frequency table is given).
    """
    if not reference:
        raise DataError("corrupt: empty reference")
    if rng is None:
        rng = stream(prof.seed, "corrupt", prof.kind)
    out = list(reference)

    if prof.oov_substitution_rate > 0:
        hits = rng.random(len(out)) < prof.oov_substitution_rate
        for i, tok in enumerate(out):
            rare = frequencies is None or rare_threshold is None or frequencies.get(tok, 0) < rare_threshold
            if hits[i] and rare:
                out[i] = UNK_TOKEN

    if prof.omission_rate > 0:
        keep = rng.random(len(out)) >= prof.omission_rate
        out = [t for t, k in zip(out, keep) if k]

    if prof.repetition_rate > 0:
        dup = rng.random(len(out)) < prof.repetition_rate
        out = [t for t, d in zip(out, dup) for _ in range(2 if d else 1)]

    window = min(prof.local_reorder_window, max(len(out) - 1, 0))
    if window > 0:
        i = 0
        while i < len(out) - 1:
            if rng.random() < prof.reorder_rate:
                j = min(i + int(rng.integers(1, window + 1)), len(out) - 1)
                out[i], out[j] = out[j], out[i]
                i = j + 1
            else:
                i += 1

    if prof.function_word_error_rate > 0 and function_words:
        fw = set(function_words)
        result = []
        hits = rng.random(len(out)) < prof.function_word_error_rate
        for tok, hit in zip(out, hits):
            if hit and tok in fw:
                continue
            if hit:
                result.append(function_words[int(rng.integers(len(function_words)))])
            result.append(tok)
        out = result

    return out or [UNK_TOKEN]


@dataclass
class ChannelContext:
    """Corpus statistics the corruption channels consult."""
    frequencies: dict[str, int]
    rare_threshold: float
    function_words: list[str]

    @classmethod
    def from_corpus(cls, references: Iterable[Sequence[str]], n_function_words: int = 10) -> "ChannelContext":
        counts = Counter(t for sent in references for t in sent)
        if not counts:
            raise DataError("channel statistics need a nonempty corpus")
        threshold = float(np.median(sorted(counts.values())))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(dict(counts), threshold, [t for t, _ in ranked[:n_function_words]])


def corrupt_corpus(references: Sequence[Sequence[str]], prof: CorruptionProfile, ctx: ChannelContext,
                   ids: Sequence[int] | None = None) -> list[list[str]]:
    """Corrupt every sentence with a per-sentence sub-seed (order independent)."""
    ids = range(len(references)) if ids is None else ids
    return [corrupt(ref, prof, stream(prof.seed, "corrupt", prof.kind, int(i)), ctx.frequencies,
                    ctx.rare_threshold, ctx.function_words)
            for i, ref in zip(ids, references)]


# --------------------------------------------------------------- synthetic

@dataclass
class ParallelCorpus:
    sources: list[list[str]]
    targets: list[list[str]]
    mapping: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sources)


def synthetic_task_generate(task: str, vocab_size: int, length_range: tuple[int, int], count: int,
                            seed: int) -> ParallelCorpus:
    """Sources drawn uniformly from ``vocab_size`` word types.

    copy: target = source; reverse: target = reversed source; lexmap: each
    source word is replaced through a fixed seeded bijection.
    """
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")
    lo, hi = length_range
    if vocab_size < 4 or lo < 1 or hi < lo or count < 0:
        raise ConfigurationError(f"invalid generation ranges: vocab={vocab_size} lengths={length_range} count={count}")
    words = [f"s{i}" for i in range(vocab_size)]
    mapping = {}
    if task == "lexmap":
        perm = stream(seed, "lexmap").permutation(vocab_size)
        mapping = {words[i]: f"t{perm[i]}" for i in range(vocab_size)}
    rng = stream(seed, "data", task)
    sources, targets = [], []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        src = [words[i] for i in rng.integers(0, vocab_size, size=n)]
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = [mapping[w] for w in src]
        sources.append(src)
        targets.append(tgt)
    return ParallelCorpus(sources, targets, mapping)


# --------------------------------------------------------------- cross-fold

@dataclass
class FoldAssignment:
    folds: list[str]
    seed: int

    def members(self, fold: str) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f == fold]


def assign_folds(n: int, seed: int) -> FoldAssignment:
    """Random halves A and B whose sizes differ by at most one."""
    perm = stream(seed, "folds").permutation(n)
    folds = ["B"] * n
    for i in perm[: (n + 1) // 2]:
        folds[int(i)] = "A"
    return FoldAssignment(folds, seed)


@dataclass
class SimRecord:
    id: int
    source: list[str]
    translation: list[str]
    reference: list[str]
    fold: str
    translated_by: str


def crossfold_simulate(corpus: ParallelCorpus, train_fn: Callable, translate_fn: Callable, seed: int,
                       min_fold_size: int = 1, tag: str = "nmt") -> tuple[list[SimRecord], dict[str, object]]:
    """Train on each half, translate the other half.

    ``train_fn(sources, targets)`` returns a system; ``translate_fn(system,
    sources)`` returns one token list per source.  Returns the records in
    corpus order plus the two fold systems.
    """
    n = len(corpus)
    if n < 2:
        raise ConfigurationError("cross-fold simulation needs at least 2 sentences")
    folds = assign_folds(n, seed)
    systems = {}
    records: list[SimRecord | None] = [None] * n
    for train_fold, test_fold in (("A", "B"), ("B", "A")):
        tr, te = folds.members(train_fold), folds.members(test_fold)
        if len(tr) < min_fold_size:
            raise ConfigurationError(f"fold {train_fold} has {len(tr)} sentences; need {min_fold_size} to train")
        system = train_fn([corpus.sources[i] for i in tr], [corpus.targets[i] for i in tr])
        systems[train_fold] = system
        outputs = translate_fn(system, [corpus.sources[i] for i in te])
        if len(outputs) != len(te):
            raise DataError(f"system returned {len(outputs)} translations for {len(te)} sentences")
        for i, hyp in zip(te, outputs):
            records[i] = SimRecord(i, corpus.sources[i], list(hyp), corpus.targets[i], folds.folds[i],
                                   f"{tag}:{train_fold}")
    return records, systems


# ---------------------------------------------------------------------- I/O

def read_corpus(path) -> list[list[str]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None
    return [line.split() for line in text.splitlines()]


def format_corpus(lines: Iterable[Sequence[str]]) -> str:
    return "".join(" ".join(toks) + "\n" for toks in lines)


def write_corpus(path, lines: Iterable[Sequence[str]]) -> None:
    Path(path).write_text(format_corpus(lines), encoding="utf-8")


def write_provenance(path, rows: Iterable[tuple[int, str, str]]) -> None:
    Path(path).write_text("".join(f"{i}\t{fold}\t{tag}\n" for i, fold, tag in rows), encoding="utf-8")


def read_provenance(path) -> list[tuple[int, str, str]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        i, fold, tag = line.split("\t")
        rows.append((int(i), fold, tag))
    return rows
