"""Conditional GRU decoder, greedy/beam search and ensemble decoding.

One decoder step:
    s_tilde = GRU_1(s_prev, emb(y_prev))
    c       = attention(s_tilde, annotations)      (word level, then system level)
    s       = GRU_2(s_tilde, c)
    p       = softmax(W_vocab tanh(W_o1 s + W_o2 emb(y_prev) + W_o3 c + b_o) + b_vocab)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (AttentionOutput, SystemAttentionParams, WordAttentionParams, attend,
                        precompute_keys)
from .encoder import AnnotationMatrix, GruCell, GruParams
from .errors import ConfigurationError, InputError, VocabularyError
from .numerics import Tensor

PAD, EOS, BOS, UNK = 0, 1, 2, 3


@dataclass
class ReadoutParams:
    W_o1: Tensor
    W_o2: Tensor
    W_o3: Tensor
    b_o: Tensor
    W_vocab: Tensor
    b_vocab: Tensor

    @classmethod
    def from_mapping(cls, params, prefix: str = "out") -> "ReadoutParams":
        names = ("W_o1", "W_o2", "W_o3", "b_o", "W_vocab", "b_vocab")
        return cls(*(nx.as_tensor(params[f"{prefix}.{f}"]) for f in names))

    @property
    def vocab_size(self) -> int:
        return self.W_vocab.shape[0]


@dataclass
class DecoderParams:
    emb: Tensor
    gru1: GruParams
    gru2: GruParams
    word_att: list[WordAttentionParams]
    sys_att: SystemAttentionParams
    readout: ReadoutParams
    W_init: Tensor


@dataclass
class DecoderState:
    s: Tensor
    prev: np.ndarray


@dataclass
class DecodeConfig:
    beam: int = 10
    max_len: int | None = None
    length_norm: bool = True

    def __post_init__(self):
        if self.beam < 1:
            raise ConfigurationError(f"beam size must be >= 1, got {self.beam}")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigurationError(f"max output length must be >= 1, got {self.max_len}")


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    truncated: bool = False
    state: DecoderState | None = field(default=None, repr=False)

    @property
    def complete(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def score(self, length_norm: bool) -> float:
        return self.log_prob / max(len(self.tokens), 1) if length_norm else self.log_prob

    def words(self) -> list[int]:
        return self.tokens[:-1] if self.complete else list(self.tokens)


def mean_annotation(H: AnnotationMatrix) -> Tensor:
    m = H.mask.astype(H.H.dtype)
    total = nx.tsum(H.H * m[:, :, None], axis=1)
    return total * (1.0 / m.sum(axis=1, keepdims=True))


def init_state(annotation_sets: list[AnnotationMatrix], W_init, primary: int = 0) -> Tensor:
    """s_0 = tanh(W_init . mean of the primary input's annotations)."""
    if not annotation_sets:
        raise InputError("init_state: no annotation sets")
    W_init = nx.as_tensor(W_init)
    return nx.tanh(mean_annotation(annotation_sets[primary]) @ W_init.T)


class Decoder:
    """Decoder weights with concatenations/transposes built once."""

    def __init__(self, dp: DecoderParams, primary: int = 0):
        self.p = dp
        self.primary = primary
        self.cell1 = GruCell(dp.gru1)
        self.cell2 = GruCell(dp.gru2)
        ro = dp.readout
        self.o1_T, self.o2_T, self.o3_T = ro.W_o1.T, ro.W_o2.T, ro.W_o3.T
        self.vocab_T = ro.W_vocab.T
        self.vocab_size = ro.vocab_size

    def keys(self, inputs: list[AnnotationMatrix]) -> list[Tensor]:
        return [precompute_keys(H, wp) for H, wp in zip(inputs, self.p.word_att)]

    def init_state(self, inputs: list[AnnotationMatrix]) -> DecoderState:
        s0 = init_state(inputs, self.p.W_init, self.primary)
        return DecoderState(s0, np.full(s0.shape[0], BOS, dtype=np.int64))

    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabularyError(f"decoder: previous token id out of range [0, {self.vocab_size})")
        return nx.embedding(self.p.emb, ids)

    def transition(self, s_prev: Tensor, xp1: Tensor, inputs, keys) -> tuple[Tensor, AttentionOutput]:
        s_tilde = self.cell1.step(xp1, s_prev)
        att = attend(s_tilde, inputs, self.p.word_att, self.p.sys_att, keys)
        s = self.cell2.step(self.cell2.project(att.context), s_tilde)
        return s, att

    def logits(self, s: Tensor, prev_emb: Tensor, c: Tensor) -> Tensor:
        t = nx.tanh(s @ self.o1_T + prev_emb @ self.o2_T + c @ self.o3_T + self.p.readout.b_o)
        return t @ self.vocab_T + self.p.readout.b_vocab

    def step(self, state: DecoderState, inputs, keys=None) -> tuple[Tensor, DecoderState, AttentionOutput]:
        if keys is None:
            keys = self.keys(inputs)
        e = self.embed(state.prev)
        s, att = self.transition(state.s, self.cell1.project(e), inputs, keys)
        return self.logits(s, e, att.context), DecoderState(s, state.prev), att


def decoder_step(state: DecoderState, annotation_sets: list[AnnotationMatrix], params: DecoderParams):
    """One step; returns (probabilities [B, V], new state, attention output)."""
    logits, new, att = Decoder(params).step(state, annotation_sets)
    probs = nx.softmax(logits, axis=-1)
    return probs.data, new, att


# ------------------------------------------------------------------- search

def _repeat_inputs(inputs, keys, rows: np.ndarray):
    reps = [AnnotationMatrix(Tensor(H.H.data[rows]), H.mask[rows]) for H in inputs]
    return reps, [Tensor(k.data[rows]) for k in keys]


class _Member:
    """One model's view of a single sentence during search."""

    def __init__(self, decoder: Decoder, inputs: list[AnnotationMatrix]):
        self.decoder = decoder
        self.inputs = inputs
        self.keys = decoder.keys(inputs)
        self.state = decoder.init_state(inputs)
        self.rows = np.zeros(1, dtype=np.int64)

    def probs(self, prev: np.ndarray) -> np.ndarray:
        inputs, keys = _repeat_inputs(self.inputs, self.keys, np.zeros(len(prev), dtype=np.int64))
        state = DecoderState(self.state.s, prev)
        logits, self._next, _ = self.decoder.step(state, inputs, keys)
        return nx.softmax(logits, axis=-1).data

    def advance(self, rows: np.ndarray) -> None:
        self.state = DecoderState(Tensor(self._next.s.data[rows]), None)


def _search(members: list[_Member], cfg: DecodeConfig, max_len: int) -> Hypothesis:
    b = cfg.beam
    vocab = members[0].decoder.vocab_size
    live_tokens: list[list[int]] = [[]]
    live_scores = np.zeros(1)
    complete: list[Hypothesis] = []
    for _ in range(max_len):
        prev = np.array([t[-1] if t else BOS for t in live_tokens], dtype=np.int64)
        dist = members[0].probs(prev) if len(members) == 1 else \
            np.mean([m.probs(prev) for m in members], axis=0)
        with np.errstate(divide="ignore"):
            logp = np.log(dist.astype(np.float64))
        logp[:, PAD] = -np.inf
        logp[:, BOS] = -np.inf
        cand = (live_scores[:, None] + logp).reshape(-1)
        k = b - len(complete)
        order = np.argsort(-cand, kind="stable")[:k]
        next_tokens, next_scores, rows = [], [], []
        for idx in order:
            if not np.isfinite(cand[idx]):
                break
            row, tok = divmod(int(idx), vocab)
            toks = live_tokens[row] + [tok]
            if tok == EOS:
                complete.append(Hypothesis(toks, float(cand[idx])))
            else:
                next_tokens.append(toks)
                next_scores.append(cand[idx])
                rows.append(row)
        if len(complete) >= b or not next_tokens:
            break
        rows_arr = np.asarray(rows, dtype=np.int64)
        for m in members:
            m.advance(rows_arr)
        live_tokens, live_scores = next_tokens, np.asarray(next_scores)
    if not complete:
        best = int(np.argmax(live_scores))
        return Hypothesis(live_tokens[best], float(live_scores[best]), truncated=True)
    return max(complete, key=lambda h: h.score(cfg.length_norm))


def default_max_len(inputs: list[AnnotationMatrix]) -> int:
    return 3 * max(int(H.lengths.max()) for H in inputs)


def ensemble_decode(decoders: list[Decoder], encoded: list[list[AnnotationMatrix]],
                    cfg: DecodeConfig) -> Hypothesis:
    """Beam search over the arithmetic mean of member distributions.

    ``encoded[i]`` holds member i's annotations of the same single sentence.
    """
    if not decoders:
        raise ConfigurationError("ensemble needs at least one model")
    sizes = {d.vocab_size for d in decoders}
    if len(sizes) != 1:
        raise ConfigurationError(f"ensemble members disagree on target vocabulary size: {sorted(sizes)}")
    max_len = cfg.max_len or default_max_len(encoded[0])
    with nx.no_grad():
        members = [_Member(d, inp) for d, inp in zip(decoders, encoded)]
        return _search(members, cfg, max_len)


def beam_search(decoder: Decoder, inputs: list[AnnotationMatrix], cfg: DecodeConfig) -> Hypothesis:
    return ensemble_decode([decoder], [inputs], cfg)


def greedy_decode(decoder: Decoder, inputs: list[AnnotationMatrix], max_len: int | None = None) -> Hypothesis:
    """Arg-max decoding of one sentence, independent of the beam code path."""
    max_len = max_len or default_max_len(inputs)
    with nx.no_grad():
        keys = decoder.keys(inputs)
        state = decoder.init_state(inputs)
        tokens, total = [], 0.0
        for _ in range(max_len):
            logits, state, _ = decoder.step(state, inputs, keys)
            dist = nx.softmax(logits, axis=-1).data[0].astype(np.float64)
            dist[[PAD, BOS]] = 0.0
            tok = int(np.argmax(dist))
            total += float(np.log(dist[tok]))
            tokens.append(tok)
            if tok == EOS:
                return Hypothesis(tokens, total)
            state = DecoderState(state.s, np.array([tok]))
        return Hypothesis(tokens, total, truncated=True)


def greedy_decode_batch(decoder: Decoder, inputs: list[AnnotationMatrix], max_len: int) -> list[list[int]]:
    """Arg-max decoding of a padded batch; returns word ids without EOS."""
    with nx.no_grad():
        keys = decoder.keys(inputs)
        state = decoder.init_state(inputs)
        B = state.s.shape[0]
        out = np.zeros((B, max_len), dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for t in range(max_len):
            logits, state, _ = decoder.step(state, inputs, keys)
            scores = logits.data.copy()
            scores[:, [PAD, BOS]] = -np.inf
            tok = np.argmax(scores, axis=-1)
            tok[done] = PAD
            out[:, t] = tok
            done |= tok == EOS
            if done.all():
                break
            state = DecoderState(state.s, np.where(done, EOS, tok))
    result = []
    for row in out:
        words = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            words.append(int(tok))
        result.append(words)
    return result
