"""Corpus directories and batch decoding shared by the CLI and experiments.

A data directory holds aligned, line-numbered files per split:
``{split}.src``, ``{split}.sys0`` .. ``{split}.sys{K-1}``, ``{split}.ref`` and,
when produced by simulation, ``{split}.sys{k}.prov`` provenance sidecars.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .datasim import read_corpus
from .decoder import DecodeConfig
from .errors import DataError
from .model import CombinationExample, CombinationModel, ModelConfig, Vocabulary, build_vocab, ensemble, make_example

SPLITS = ("train", "dev", "test")


@dataclass
class Split:
    source: list[list[str]] | None
    systems: list[list[list[str]]] = field(default_factory=list)
    reference: list[list[str]] | None = None

    def __len__(self) -> int:
        for side in (self.source, self.reference, *(self.systems or [])):
            if side is not None:
                return len(side)
        return 0


def system_files(data_dir, split: str) -> list[Path]:
    data_dir = Path(data_dir)
    out = []
    k = 0
    while (data_dir / f"{split}.sys{k}").exists():
        out.append(data_dir / f"{split}.sys{k}")
        k += 1
    return out


def _read_required(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    return read_corpus(path)


def load_split(data_dir, split: str, num_systems: int | None = None, need_source: bool = True,
               need_reference: bool = True) -> Split:
    data_dir = Path(data_dir)
    src = _read_required(data_dir / f"{split}.src") if need_source else None
    ref = _read_required(data_dir / f"{split}.ref") if need_reference else None
    if num_systems is None:
        files = system_files(data_dir, split)
    else:
        files = [data_dir / f"{split}.sys{k}" for k in range(num_systems)]
    systems = [_read_required(p) for p in files]
    out = Split(src, systems, ref)
    check_aligned(out, f"{data_dir}/{split}")
    return out


def check_aligned(split: Split, label: str) -> None:
    sizes = {len(s) for s in (split.source, split.reference, *split.systems) if s is not None}
    if len(sizes) > 1:
        raise DataError(f"{label}: files are not line-aligned (line counts {sorted(sizes)})")


def build_vocabularies(train: Split, cfg: ModelConfig) -> tuple[Vocabulary | None, Vocabulary]:
    src_vocab = build_vocab(train.source, cfg.src_vocab_limit) if cfg.use_source else None
    tgt_lines = list(train.reference) + [line for sys in train.systems for line in sys]
    return src_vocab, build_vocab(tgt_lines, cfg.tgt_vocab_limit)


def to_examples(split: Split, cfg: ModelConfig, src_vocab: Vocabulary | None,
                tgt_vocab: Vocabulary) -> list[CombinationExample]:
    sv = src_vocab or Vocabulary([])
    K = cfg.num_system_inputs
    if len(split.systems) < K:
        raise DataError(f"model expects {K} system inputs, data provides {len(split.systems)}")
    examples = []
    for i in range(len(split)):
        src = split.source[i] if split.source is not None else []
        ref = split.reference[i] if split.reference is not None else None
        if ref is not None and not ref:
            raise DataError(f"line {i + 1}: empty reference")
        examples.append(make_example(src, [s[i] for s in split.systems[:K]], ref, sv, tgt_vocab))
    return examples


def decode_split(models: Sequence[CombinationModel], split: Split, cfg: DecodeConfig,
                 greedy: bool = False, threads: int = 1) -> list[list[str]]:
    """Translate every line; one model is plain beam search, several form an ensemble."""
    def one(i: int) -> list[str]:
        src = split.source[i] if split.source is not None else None
        per_model = [m.example(src, [s[i] for s in split.systems[:m.cfg.num_system_inputs]]) for m in models]
        if greedy and len(models) == 1:
            hyp = models[0].greedy(per_model[0], cfg.max_len)
        elif len(models) == 1:
            hyp = models[0].beam(per_model[0], cfg)
        else:
            hyp = ensemble(models, per_model, cfg)
        return models[0].tgt_vocab.decode(hyp.words())

    n = len(split)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]
