"""The combination model: K+1 encoders, two-level attention, conditional
decoder.  Owns configuration, vocabularies, parameter layout, the teacher-forced
loss, the Adadelta training loop and the binary checkpoint format.
"""

from __future__ import annotations

import copy
import dataclasses
import io
import logging
import math
import os
import struct
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .attention import SystemAttentionParams, WordAttentionParams
from .decoder import (BOS, EOS, PAD, UNK, DecodeConfig, Decoder, DecoderParams, ReadoutParams,
                      ensemble_decode, greedy_decode, greedy_decode_batch)
from .encoder import GRU_CONVENTION, GRU_FIELDS, AnnotationMatrix, GruParams, encode
from .errors import ConfigurationError, DataError, InputError, LoadError, TrainingError
from .numerics import Tensor
from .rng import stream

log = logging.getLogger(__name__)

SYSTEM_ATTENTION_FORM = "projected-dot"
RESERVED = ("<pad>", "</s>", "<s>", "UNK")


# ------------------------------------------------------------------- config

@dataclass
class ModelConfig:
    num_system_inputs: int = 3
    use_source: bool = True
    share_word_attention: bool = False
    share_system_encoders: bool = False
    hidden: int = 32
    embedding: int = 16
    src_vocab_limit: int = 200
    tgt_vocab_limit: int = 200
    batch_size: int = 32
    max_epochs: int = 20
    max_updates: int = 0
    patience: int = 10
    seed: int = 0
    beam: int = 4
    length_norm: bool = True
    rho: float = 0.95
    adadelta_eps: float = 1e-6
    init_scale: float = 0.08
    dtype: str = "float32"
    gru_convention: str = GRU_CONVENTION
    system_attention: str = SYSTEM_ATTENTION_FORM

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_system_inputs < 0:
            raise ConfigurationError("num_system_inputs must be >= 0")
        if self.num_system_inputs == 0 and not self.use_source:
            raise ConfigurationError("the model needs at least one input: set num_system_inputs >= 1 or use_source")
        for name in ("hidden", "embedding", "batch_size", "src_vocab_limit", "tgt_vocab_limit", "beam"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_epochs < 0 or self.max_updates < 0 or self.patience < 1:
            raise ConfigurationError("max_epochs/max_updates must be >= 0 and patience >= 1")
        if not 0.0 < self.rho < 1.0 or self.adadelta_eps <= 0:
            raise ConfigurationError("Adadelta needs 0 < rho < 1 and eps > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.gru_convention != GRU_CONVENTION:
            raise ConfigurationError(f"unsupported GRU convention {self.gru_convention!r}")
        if self.system_attention != SYSTEM_ATTENTION_FORM:
            raise ConfigurationError(f"unsupported system attention form {self.system_attention!r}")

    @property
    def input_names(self) -> list[str]:
        names = ["src"] if self.use_source else []
        return names + [f"sys{k}" for k in range(self.num_system_inputs)]

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "ModelConfig | None" = None) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        return cls(**values)


PRESETS = {
    "desk": dict(src_vocab_limit=200, tgt_vocab_limit=200, hidden=32, embedding=16, beam=4),
    "paper": dict(src_vocab_limit=30000, tgt_vocab_limit=30000, hidden=1000, embedding=500, beam=10),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = str(typ)
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None
    return raw.strip()


def parse_kv_text(text: str) -> dict[str, str]:
    """UTF-8 ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path, base: ModelConfig | None = None) -> ModelConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return ModelConfig.from_pairs(parse_kv_text(text), base)


# --------------------------------------------------------------- vocabulary

class Vocabulary:
    """Token/id bijection with PAD=0, EOS=1, BOS=2, UNK=3 reserved."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(corpus: Iterable[Sequence[str]], limit: int) -> Vocabulary:
    """Keep the ``limit`` most frequent tokens, ties broken lexicographically."""
    if limit < 1:
        raise ConfigurationError(f"vocabulary limit must be >= 1, got {limit}")
    counts = Counter()
    lines = 0
    for sent in corpus:
        lines += 1
        counts.update(t for t in sent if t not in RESERVED)
    if lines == 0:
        raise InputError("build_vocab: empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[:limit]])


# ------------------------------------------------------------------ examples

@dataclass
class CombinationExample:
    """Source ids, K system hypotheses (target-language ids), reference ids."""
    source: list[int]
    systems: list[list[int]]
    reference: list[int] = field(default_factory=list)

    def inputs(self, cfg: ModelConfig) -> list[list[int]]:
        seqs = [self.source] if cfg.use_source else []
        return seqs + list(self.systems[:cfg.num_system_inputs])


def make_example(src_tokens, sys_tokens, ref_tokens, src_vocab: Vocabulary,
                 tgt_vocab: Vocabulary) -> CombinationExample:
    # empty system lines (possible from a real decoder) become a lone UNK
    systems = [tgt_vocab.encode(s) if s else [UNK] for s in sys_tokens]
    src = src_vocab.encode(src_tokens) if src_tokens else [UNK]
    ref = tgt_vocab.encode(ref_tokens) if ref_tokens is not None else []
    return CombinationExample(src, systems, ref)


def pad_batch(seqs: Sequence[Sequence[int]], extra: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if any(len(s) == 0 for s in seqs):
        raise InputError("empty sequence in batch")
    T = max(len(s) for s in seqs) + extra
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


# --------------------------------------------------------------- parameters

def _gru_shapes(prefix: str, d_in: int, n: int):
    for f in GRU_FIELDS:
        if f.startswith("W"):
            yield f"{prefix}.{f}", (n, d_in)
        elif f.startswith("U"):
            yield f"{prefix}.{f}", (n, n)
        else:
            yield f"{prefix}.{f}", (n,)


def encoder_prefix(cfg: ModelConfig, name: str) -> str:
    if name != "src" and cfg.share_system_encoders:
        return "enc.sys"
    return f"enc.{name}"


def attention_prefix(cfg: ModelConfig, name: str) -> str:
    return "att.shared" if cfg.share_word_attention else f"att.{name}"


def param_shapes(cfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int) -> dict[str, tuple[int, ...]]:
    """Ordered parameter layout; a deterministic function of the config."""
    n, e = cfg.hidden, cfg.embedding
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.use_source:
        shapes["emb.src"] = (src_vocab_size, e)
    shapes["emb.tgt"] = (tgt_vocab_size, e)
    for name in cfg.input_names:
        pre = encoder_prefix(cfg, name)
        for direction in ("fwd", "bwd"):
            for k, s in _gru_shapes(f"{pre}.{direction}", e, n):
                shapes.setdefault(k, s)
    for name in cfg.input_names:
        pre = attention_prefix(cfg, name)
        shapes.setdefault(f"{pre}.W_a", (n, n))
        shapes.setdefault(f"{pre}.U_a", (n, 2 * n))
        shapes.setdefault(f"{pre}.v_a", (n,))
    shapes["sysatt.P"] = (n, 2 * n)
    shapes["dec.W_init"] = (n, 2 * n)
    shapes.update(_gru_shapes("dec.gru1", e, n))
    shapes.update(_gru_shapes("dec.gru2", 2 * n, n))
    shapes["out.W_o1"] = (e, n)
    shapes["out.W_o2"] = (e, e)
    shapes["out.W_o3"] = (e, 2 * n)
    shapes["out.b_o"] = (e,)
    shapes["out.W_vocab"] = (tgt_vocab_size, e)
    shapes["out.b_vocab"] = (tgt_vocab_size,)
    return shapes


def _is_recurrent(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("U_z", "U_r", "U_h")


def _is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b_")


def init_params(cfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int,
                seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform(-0.08, 0.08) weights, orthogonal recurrent matrices, zero biases."""
    rng = stream(cfg.seed if seed is None else seed, "init")
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg, src_vocab_size, tgt_vocab_size).items():
        if _is_bias(name):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        w = rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
        if _is_recurrent(name):
            u, _, vt = np.linalg.svd(w)
            w = u @ vt
        params[name] = w.astype(dtype)
    return params


def count_params(cfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg, src_vocab_size, tgt_vocab_size).values())


# ------------------------------------------------------------------ network

class Network:
    """Structured view over a flat parameter mapping (arrays or tensors)."""

    def __init__(self, cfg: ModelConfig, params):
        self.cfg = cfg
        self.P = {k: nx.as_tensor(v) for k, v in params.items()}
        P = self.P
        self.encoders = [(GruParams.from_mapping(P, f"{encoder_prefix(cfg, nm)}.fwd"),
                          GruParams.from_mapping(P, f"{encoder_prefix(cfg, nm)}.bwd"))
                         for nm in cfg.input_names]
        self.embeddings = [P["emb.src"] if nm == "src" else P["emb.tgt"] for nm in cfg.input_names]
        dp = DecoderParams(
            emb=P["emb.tgt"],
            gru1=GruParams.from_mapping(P, "dec.gru1"),
            gru2=GruParams.from_mapping(P, "dec.gru2"),
            word_att=[WordAttentionParams.from_mapping(P, attention_prefix(cfg, nm)) for nm in cfg.input_names],
            sys_att=SystemAttentionParams(P["sysatt.P"]),
            readout=ReadoutParams.from_mapping(P, "out"),
            W_init=P["dec.W_init"],
        )
        self.decoder = Decoder(dp, primary=0)

    def encode(self, batch: Sequence[CombinationExample]) -> list[AnnotationMatrix]:
        per_input = list(zip(*[ex.inputs(self.cfg) for ex in batch]))
        if len(per_input) != len(self.cfg.input_names):
            raise InputError(f"examples provide {len(per_input)} inputs, model expects "
                             f"{len(self.cfg.input_names)} ({', '.join(self.cfg.input_names)})")
        out = []
        for seqs, emb, (fwd, bwd) in zip(per_input, self.embeddings, self.encoders):
            ids, mask = pad_batch(seqs)
            out.append(encode(ids, emb, fwd, bwd, mask))
        return out


def forward_loss(batch: Sequence[CombinationExample], params, cfg: ModelConfig) -> Tensor:
    """Teacher-forced summed negative log-likelihood over unpadded target positions."""
    if not batch:
        raise InputError("forward_loss: empty batch")
    for ex in batch:
        if not ex.reference or PAD in ex.reference:
            raise DataError("reference is empty or contains PAD")
    net = Network(cfg, params)
    inputs = net.encode(batch)
    dec = net.decoder
    yin, _ = pad_batch([[BOS] + ex.reference for ex in batch])
    yout, ymask = pad_batch([ex.reference + [EOS] for ex in batch])
    emb_in = dec.embed(yin)
    xp1 = dec.cell1.project(emb_in)
    keys = dec.keys(inputs)
    s = dec.init_state(inputs).s
    states, contexts = [], []
    for t in range(yin.shape[1]):
        s, att = dec.transition(s, xp1[:, t], inputs, keys)
        states.append(s)
        contexts.append(att.context)
    logits = dec.logits(nx.stack(states, axis=1), emb_in, nx.stack(contexts, axis=1))
    return nx.cross_entropy(logits, yout, ymask)


# ----------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    loss_per_token: float
    updates: int
    dev_bleu: float | None
    seconds: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EpochRecord]
    best_dev_bleu: float | None
    updates: int


def make_batches(n: int, batch_size: int, lengths: Sequence[int], rng: np.random.Generator,
                 chunk: int = 20) -> list[list[int]]:
    """Shuffle, then sort by length inside chunks of ``chunk`` batches."""
    order = rng.permutation(n)
    span = batch_size * chunk
    batches = []
    for start in range(0, n, span):
        block = sorted(order[start:start + span], key=lambda i: lengths[i])
        batches.extend(block[i:i + batch_size] for i in range(0, len(block), batch_size))
    perm = rng.permutation(len(batches))
    return [[int(i) for i in batches[j]] for j in perm]


def train(examples: Sequence[CombinationExample], cfg: ModelConfig, tgt_vocab: Vocabulary,
          src_vocab: Vocabulary | None = None, dev: Sequence[CombinationExample] | None = None,
          init: dict[str, np.ndarray] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    if not examples:
        raise InputError("train: empty training corpus")
    src_size = len(src_vocab) if src_vocab is not None else 0
    params = init if init is not None else init_params(cfg, src_size, len(tgt_vocab))
    dtype = np.dtype(cfg.dtype)
    params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    names = list(params)
    state = nx.AdadeltaState(rho=cfg.rho, eps=cfg.adadelta_eps)
    rng = stream(cfg.seed, "shuffle")
    lengths = [len(ex.reference) for ex in examples]
    history: list[EpochRecord] = []
    best_bleu, best_params, stale, updates = None, None, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total, tokens = 0.0, 0
        for b, idx in enumerate(make_batches(len(examples), cfg.batch_size, lengths, rng)):
            batch = [examples[i] for i in idx]
            leaves = [Tensor(params[k], requires_grad=True) for k in names]
            loss = forward_loss(batch, dict(zip(names, leaves)), cfg)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = nx.backward(loss, leaves)
            nx.adadelta_update(params, dict(zip(names, grads)), state)
            total += value
            tokens += sum(len(ex.reference) + 1 for ex in batch)
            updates += 1
            if cfg.max_updates and updates >= cfg.max_updates:
                break
        dev_bleu = None
        if dev:
            dev_bleu = dev_score(params, cfg, dev)
            # ties keep the more trained parameters; only strict gains reset patience
            stale = 0 if best_bleu is None or dev_bleu > best_bleu else stale + 1
            if best_bleu is None or dev_bleu >= best_bleu:
                best_bleu, best_params = dev_bleu, copy.deepcopy(params)
        rec = EpochRecord(epoch, total / max(tokens, 1), updates, dev_bleu, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch=%d loss=%.6f updates=%d dev_bleu=%s seconds=%.1f", rec.epoch, rec.loss_per_token,
                 rec.updates, "-" if dev_bleu is None else f"{dev_bleu:.2f}", rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if cfg.max_updates and updates >= cfg.max_updates:
            break
        # a flat zero means decoding has not matched anything yet, so keep going
        if dev and best_bleu > 0 and stale >= cfg.patience:
            break
    return TrainResult(best_params if best_params is not None else params, history, best_bleu, updates)


def dev_score(params, cfg: ModelConfig, dev: Sequence[CombinationExample], batch_size: int = 64) -> float:
    from .evaluation import bleu
    hyps = decode_greedy_batched(params, cfg, dev, batch_size)
    return bleu([list(map(str, h)) for h in hyps], [list(map(str, ex.reference)) for ex in dev]).score


def decode_greedy_batched(params, cfg: ModelConfig, examples: Sequence[CombinationExample],
                          batch_size: int = 64) -> list[list[int]]:
    net = Network(cfg, params)
    out: list[list[int] | None] = [None] * len(examples)
    order = sorted(range(len(examples)), key=lambda i: max(len(s) for s in examples[i].inputs(cfg)))
    with nx.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = [examples[i] for i in idx]
            inputs = net.encode(batch)
            max_len = 3 * max(int(H.lengths.max()) for H in inputs)
            for i, hyp in zip(idx, greedy_decode_batch(net.decoder, inputs, max_len)):
                out[i] = hyp
    return out


# -------------------------------------------------------------- checkpoints

MAGIC = b"NSC1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    cfg: ModelConfig
    src_vocab: Vocabulary | None
    tgt_vocab: Vocabulary


def _config_block(cfg: ModelConfig, src_vocab, tgt_vocab) -> bytes:
    text = cfg.to_text()
    if src_vocab is not None:
        text += "src_vocab=" + " ".join(src_vocab.words) + "\n"
    text += "tgt_vocab=" + " ".join(tgt_vocab.words) + "\n"
    return text.encode("utf-8")


def checkpoint_bytes(params: dict[str, np.ndarray], cfg: ModelConfig, tgt_vocab: Vocabulary,
                     src_vocab: Vocabulary | None = None) -> bytes:
    expected = param_shapes(cfg, len(src_vocab) if src_vocab else 0, len(tgt_vocab))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    block = _config_block(cfg, src_vocab, tgt_vocab)
    buf.write(struct.pack("<Q", len(block)))
    buf.write(block)
    for name, shape in expected.items():
        arr = params[name]
        if tuple(arr.shape) != shape:
            raise ConfigurationError(f"parameter {name} has shape {arr.shape}, config implies {shape}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}Q", *shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(params, cfg: ModelConfig, path, tgt_vocab: Vocabulary,
                    src_vocab: Vocabulary | None = None) -> None:
    data = checkpoint_bytes(params, cfg, tgt_vocab, src_vocab)
    atomic_write(Path(path), data)


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise LoadError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise LoadError("magic: not an NSC1 checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise LoadError(f"version: expected {FORMAT_VERSION}, found {version}")
    (size,) = r.unpack("<Q", "config length")
    pairs = parse_kv_text(r.take(size, "config block").decode("utf-8"))
    src_words = pairs.pop("src_vocab", None)
    tgt_words = pairs.pop("tgt_vocab", None)
    if tgt_words is None:
        raise LoadError("tgt_vocab: missing from config block")
    cfg = ModelConfig.from_pairs(pairs)
    src_vocab = Vocabulary(src_words.split()) if src_words is not None else None
    tgt_vocab = Vocabulary(tgt_words.split())
    expected = param_shapes(cfg, len(src_vocab) if src_vocab else 0, len(tgt_vocab))
    params: dict[str, np.ndarray] = {}
    while not r.done:
        (nlen,) = r.unpack("<I", "parameter name length")
        name = r.take(nlen, "parameter name").decode("utf-8")
        (rank,) = r.unpack("<I", f"{name} rank")
        dims = r.unpack(f"<{rank}Q", f"{name} dims")
        if name not in expected:
            raise LoadError(f"{name}: not a parameter of the declared config")
        if tuple(dims) != expected[name]:
            raise LoadError(f"{name}: dims {tuple(dims)} disagree with config {expected[name]}")
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * count, f"{name} payload")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    missing = [k for k in expected if k not in params]
    if missing:
        raise LoadError(f"{missing[0]}: missing from checkpoint (truncated?)")
    return Checkpoint({k: params[k] for k in expected}, cfg, src_vocab, tgt_vocab)


# ---------------------------------------------------------------- decoding

class CombinationModel:
    """A loaded model ready for decoding."""

    def __init__(self, params, cfg: ModelConfig, tgt_vocab: Vocabulary, src_vocab: Vocabulary | None = None):
        self.params, self.cfg = params, cfg
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        self.net = Network(cfg, params)

    @classmethod
    def load(cls, path) -> "CombinationModel":
        ck = load_checkpoint(path)
        return cls(ck.params, ck.cfg, ck.tgt_vocab, ck.src_vocab)

    def example(self, src_tokens, sys_tokens, ref_tokens=None) -> CombinationExample:
        src_vocab = self.src_vocab or Vocabulary([])
        return make_example(src_tokens or [], sys_tokens, ref_tokens, src_vocab, self.tgt_vocab)

    def encode(self, ex: CombinationExample) -> list[AnnotationMatrix]:
        with nx.no_grad():
            return self.net.encode([ex])

    def beam(self, ex: CombinationExample, cfg: DecodeConfig):
        return ensemble_decode([self.net.decoder], [self.encode(ex)], cfg)

    def greedy(self, ex: CombinationExample, max_len: int | None = None):
        return greedy_decode(self.net.decoder, self.encode(ex), max_len)


def ensemble(models: Sequence[CombinationModel], ex_per_model: Sequence[CombinationExample], cfg: DecodeConfig):
    vocabs = {tuple(m.tgt_vocab.itos) for m in models}
    if len(vocabs) != 1:
        raise ConfigurationError("ensemble members have different target vocabularies")
    return ensemble_decode([m.net.decoder for m in models], [m.encode(e) for m, e in zip(models, ex_per_model)], cfg)
