"""``nsc`` command line: gen, simulate, train, translate, combine, ensemble,
eval and gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .baselines import SelectionPolicy, select_corpus
from .datasim import (PROFILES, TASKS, ChannelContext, ParallelCorpus, corrupt_corpus, crossfold_simulate,
                      format_corpus, profile, read_corpus, synthetic_task_generate, write_provenance)
from .decoder import DecodeConfig
from .errors import ConfigurationError, DataError, NSCError
from .evaluation import bleu, corpus_ribes, count_unk
from .model import (CombinationModel, ModelConfig, atomic_write, forward_loss, init_params, load_config,
                    preset, save_checkpoint, train)
from .pipeline import SPLITS, Split, build_vocabularies, decode_split, load_split, system_files, to_examples

log = logging.getLogger("nsc")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def write_manifest(path: Path, command: str, args: argparse.Namespace, started: float,
                   config: dict | None = None, outputs: list[str] = ()) -> None:
    manifest = {
        "command": command,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                      if k != "func"},
        "config": config or {},
        "seed": getattr(args, "seed", None),
        "outputs": [str(o) for o in outputs],
        "versions": {"nsc": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "duration_seconds": round(time.time() - started, 3),
    }
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve_config(args, discovered_systems: int | None = None) -> ModelConfig:
    cfg = preset(args.preset)
    explicit = set()
    if getattr(args, "config", None):
        from .model import parse_kv_text
        try:
            pairs = parse_kv_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc.strerror}") from None
        explicit = set(pairs)
        cfg = ModelConfig.from_pairs(pairs, cfg)
    overrides = {}
    if discovered_systems is not None and "num_system_inputs" not in explicit:
        overrides["num_system_inputs"] = discovered_systems
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "use_source", None) is not None:
        overrides["use_source"] = args.use_source
    if getattr(args, "epochs", None) is not None:
        overrides["max_epochs"] = args.epochs
    if getattr(args, "beam", None) is not None:
        overrides["beam"] = args.beam
    return ModelConfig.from_pairs(overrides, cfg) if overrides else cfg


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> None:
    started = time.time()
    out = Path(args.out)
    total = args.count + args.dev + args.test
    corpus = synthetic_task_generate(args.task, args.vocab, (args.min_len, args.max_len), total, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    bounds = {"train": (0, args.count), "dev": (args.count, args.count + args.dev),
              "test": (args.count + args.dev, total)}
    written = []
    for split, (a, b) in bounds.items():
        if b <= a and split != "train":
            continue
        for side, lines in (("src", corpus.sources[a:b]), ("ref", corpus.targets[a:b])):
            path = out / f"{split}.{side}"
            _write_text(path, format_corpus(lines))
            written.append(path)
    if corpus.mapping:
        path = out / "lexmap.tsv"
        _write_text(path, "".join(f"{k}\t{v}\n" for k, v in corpus.mapping.items()))
        written.append(path)
    write_manifest(out / "manifest.json", "gen", args, started, outputs=written)


def _toy_nmt_config(args) -> ModelConfig:
    return preset("desk", num_system_inputs=0, use_source=True, seed=args.seed, max_epochs=args.nmt_epochs)


def cmd_simulate(args) -> None:
    started = time.time()
    names = [p for p in (args.profiles or "").split(",") if p]
    if not names and not args.crossfold:
        raise ConfigurationError("simulate needs --profiles and/or --crossfold")
    for name in names:
        if name not in PROFILES:
            raise ConfigurationError(f"unknown profile {name!r}; valid: {', '.join(PROFILES)}")
    data, out = Path(args.data), Path(args.out)
    train_split = load_split(data, "train", num_systems=0)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": train_split}
    for split in ("dev", "test"):
        if (data / f"{split}.src").exists():
            splits[split] = load_split(data, split, num_systems=0)
    ctx = ChannelContext.from_corpus(train_split.reference)
    written = []

    crossfold_outputs: dict[str, tuple[list, list]] = {}
    if args.crossfold:
        crossfold_outputs = _crossfold(args, splits)

    offset = 0
    for split, sp in splits.items():
        for side, lines in (("src", sp.source), ("ref", sp.reference)):
            path = out / f"{split}.{side}"
            _write_text(path, format_corpus(lines))
            written.append(path)
        k = 0
        if args.crossfold:
            lines, prov = crossfold_outputs[split]
            _write_text(out / f"{split}.sys{k}", format_corpus(lines))
            _write_text(out / f"{split}.sys{k}.prov", "".join(f"{i}\t{f}\t{t}\n" for i, f, t in prov))
            written += [out / f"{split}.sys{k}", out / f"{split}.sys{k}.prov"]
            k += 1
        ids = range(offset, offset + len(sp))
        for name in names:
            lines = corrupt_corpus(sp.reference, profile(name, args.seed), ctx, ids=ids)
            _write_text(out / f"{split}.sys{k}", format_corpus(lines))
            _write_text(out / f"{split}.sys{k}.prov", "".join(f"{i}\t-\tprofile:{name}\n" for i in ids))
            written += [out / f"{split}.sys{k}", out / f"{split}.sys{k}.prov"]
            k += 1
        offset += len(sp)
    write_manifest(out / "manifest.json", "simulate", args, started, outputs=written)


def _crossfold(args, splits: dict[str, Split]) -> dict[str, tuple[list, list]]:
    cfg = _toy_nmt_config(args)
    tr = splits["train"]

    def train_fn(sources, targets):
        sp = Split(sources, [], targets)
        src_vocab, tgt_vocab = build_vocabularies(sp, cfg)
        result = train(to_examples(sp, cfg, src_vocab, tgt_vocab), cfg, tgt_vocab, src_vocab)
        return CombinationModel(result.params, cfg, tgt_vocab, src_vocab)

    def translate_fn(model, sources):
        dc = DecodeConfig(beam=cfg.beam, length_norm=cfg.length_norm)
        return decode_split([model], Split(sources, [], None), dc, threads=args.threads)

    records, systems = crossfold_simulate(ParallelCorpus(tr.source, tr.reference), train_fn, translate_fn,
                                          args.seed, min_fold_size=2)
    out = {"train": ([r.translation for r in records], [(r.id, r.fold, r.translated_by) for r in records])}
    offset = len(tr)
    for split in ("dev", "test"):
        if split in splits:
            lines = translate_fn(systems["A"], splits[split].source)
            out[split] = (lines, [(offset + i, "-", "nmt:A") for i in range(len(lines))])
            offset += len(lines)
    return out


def cmd_train(args) -> None:
    started = time.time()
    data = Path(args.data)
    discovered = len(system_files(data, "train"))
    cfg = _resolve_config(args, discovered)
    train_split = load_split(data, "train", num_systems=cfg.num_system_inputs, need_source=cfg.use_source)
    dev_split = None
    if (data / "dev.ref").exists():
        dev_split = load_split(data, "dev", num_systems=cfg.num_system_inputs, need_source=cfg.use_source)
    src_vocab, tgt_vocab = build_vocabularies(train_split, cfg)
    examples = to_examples(train_split, cfg, src_vocab, tgt_vocab)
    dev = to_examples(dev_split, cfg, src_vocab, tgt_vocab) if dev_split is not None else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = []

    def on_epoch(rec):
        dev_txt = "-" if rec.dev_bleu is None else f"{rec.dev_bleu:.4f}"
        lines.append(f"epoch={rec.epoch} loss={rec.loss_per_token:.6f} updates={rec.updates} dev_bleu={dev_txt}")

    result = train(examples, cfg, tgt_vocab, src_vocab, dev=dev, on_epoch=on_epoch)
    save_checkpoint(result.params, cfg, out, tgt_vocab, src_vocab)
    log_path = out.with_name(out.name + ".log")
    _write_text(log_path, "\n".join(lines) + "\n")
    write_manifest(out.with_name(out.name + ".manifest.json"), "train", args, started,
                   config={k: str(v) for k, v in vars(cfg).items()}, outputs=[out, log_path])


def _decode_config(args, cfg: ModelConfig) -> DecodeConfig:
    beam = 1 if args.greedy else (args.beam or cfg.beam)
    return DecodeConfig(beam=beam, max_len=args.max_len, length_norm=cfg.length_norm if args.length_norm is None
                        else args.length_norm)


def _input_split(args, num_systems: int, need_source: bool) -> Split:
    src = read_corpus(_exists(args.source)) if args.source and need_source else None
    systems = [read_corpus(_exists(p)) for p in (getattr(args, "systems", None) or [])]
    if len(systems) < num_systems:
        raise DataError(f"model expects {num_systems} system files, got {len(systems)}")
    if need_source and src is None:
        raise DataError("model uses the source sentence: pass --source")
    sp = Split(src, systems[:num_systems] if num_systems else [], None)
    from .pipeline import check_aligned
    check_aligned(sp, "inputs")
    return sp


def _exists(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing input file: {p}")
    return p


def _decode_command(args, name: str, checkpoints: list[str]) -> None:
    started = time.time()
    models = [CombinationModel.load(_exists(c)) for c in checkpoints]
    cfg = models[0].cfg
    for m in models[1:]:
        if m.cfg.num_system_inputs != cfg.num_system_inputs or m.cfg.use_source != cfg.use_source:
            raise ConfigurationError("ensemble members must take the same inputs")
    split = _input_split(args, cfg.num_system_inputs, cfg.use_source)
    dc = _decode_config(args, cfg)
    greedy = args.greedy and len(models) == 1
    lines = decode_split(models, split, dc, greedy=greedy, threads=args.threads)
    out = Path(args.out)
    _write_text(out, format_corpus(lines))
    write_manifest(out.with_name(out.name + ".manifest.json"), name, args, started, outputs=[out])


def cmd_translate(args) -> None:
    args.systems = []
    _decode_command(args, "translate", [args.model])


def cmd_combine(args) -> None:
    if args.policy:
        started = time.time()
        policy = SelectionPolicy.parse(args.policy)
        systems = [read_corpus(_exists(p)) for p in args.systems]
        if not systems:
            raise DataError("combine --policy needs --systems")
        refs = read_corpus(_exists(args.reference)) if args.reference else None
        lines = select_corpus(systems, policy, refs)
        out = Path(args.out)
        _write_text(out, format_corpus(lines))
        write_manifest(out.with_name(out.name + ".manifest.json"), "combine", args, started, outputs=[out])
        return
    if not args.model:
        raise ConfigurationError("combine needs --model or --policy")
    _decode_command(args, "combine", [args.model])


def cmd_ensemble(args) -> None:
    _decode_command(args, "ensemble", args.models)


def cmd_eval(args) -> None:
    started = time.time()
    metrics = [m for m in args.metrics.split(",") if m]
    valid = {"bleu", "ribes", "unk"}
    bad = [m for m in metrics if m not in valid]
    if bad:
        raise ConfigurationError(f"unknown metrics {bad}; valid: {sorted(valid)}")
    hyp = read_corpus(_exists(args.hyp))
    ref = read_corpus(_exists(args.ref)) if args.ref else None
    if ref is None and set(metrics) - {"unk"}:
        raise ConfigurationError("bleu and ribes need --ref")
    report: list[tuple[str, str]] = []
    if "bleu" in metrics:
        b = bleu(hyp, ref, smooth_add1=args.smooth_add1)
        report.append(("bleu", f"{b.score:.4f}"))
        report += [(f"p{i + 1}", f"{p:.6f}") for i, p in enumerate(b.precisions)]
        report += [("bp", f"{b.bp:.6f}"), ("hyp_len", str(b.hyp_len)), ("ref_len", str(b.ref_len))]
    if "ribes" in metrics:
        report.append(("ribes", f"{corpus_ribes(hyp, ref):.6f}"))
    if "unk" in metrics:
        report.append(("unk", str(count_unk({"hyp": hyp}, args.unk_token).total)))
    text = "".join(f"{k}={v}\n" for k, v in report)
    if args.out:
        out = Path(args.out)
        _write_text(out, text)
        write_manifest(out.with_name(out.name + ".manifest.json"), "eval", args, started, outputs=[out])
    else:
        sys.stdout.write(text)
    width = max(len(k) for k, _ in report)
    table = "\n".join(f"{k.ljust(width)}  {v}" for k, v in report)
    print(table, file=sys.stderr if not args.out else sys.stdout)


def gradcheck_setup(cfg: ModelConfig, seed: int, sentences: int = 2):
    """Random batch and a parameter point for checking the full model."""
    from .model import CombinationExample
    rng = np.random.default_rng(seed)
    vocab = 20

    def seq(lo=4):
        return [int(t) for t in rng.integers(lo, vocab, size=int(rng.integers(2, 6)))]

    batch = [CombinationExample(seq(), [seq(3) for _ in range(cfg.num_system_inputs)], seq())
             for _ in range(sentences)]
    return batch, init_params(cfg, vocab, vocab, seed=seed)


def cmd_gradcheck(args) -> None:
    started = time.time()
    base = ModelConfig(num_system_inputs=3, use_source=True, hidden=8, embedding=6, dtype="float64",
                       init_scale=1.0)
    if args.config:
        base = load_config(args.config, base)
    cfg = ModelConfig.from_pairs({"seed": args.seed}, base) if args.seed is not None else base
    batch, params = gradcheck_setup(cfg, cfg.seed)
    loss_fn = lambda P: forward_loss(batch, P, cfg)  # noqa: E731
    if args.inject_fault:
        with nx.inject_fault("tanh"):
            res = nx.grad_check(loss_fn, params, eps=args.eps, max_entries=args.entries, seed=cfg.seed)
    else:
        res = nx.grad_check(loss_fn, params, eps=args.eps, max_entries=args.entries, seed=cfg.seed)
    ok = res.max_relative_error < args.threshold
    print(f"max_relative_error={res.max_relative_error:.3e}")
    print(f"worst_param={res.worst_param}")
    print(f"worst_index={tuple(int(i) for i in res.worst_index)}")
    print(f"checked={res.checked}")
    print(f"seconds={time.time() - started:.2f}")
    print(f"status={'pass' if ok else 'fail'}")
    if not ok:
        raise SystemExit(1)


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"nsc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, default=None, help="master seed for every random sub-stream")
        p.add_argument("--threads", type=int, default=1, help="worker threads (1 = deterministic CI mode)")
        return p

    p = common(sub.add_parser("gen", help="generate a synthetic parallel corpus"))
    p.add_argument("--task", required=True)
    p.add_argument("--vocab", type=int, default=100)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--count", type=int, required=True, help="training sentences")
    p.add_argument("--dev", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("simulate", help="produce system outputs for combination training"))
    p.add_argument("--data", required=True)
    p.add_argument("--profiles", default=None, help=f"comma list of {', '.join(PROFILES)}")
    p.add_argument("--crossfold", action="store_true", help="cross-fold toy NMT as an extra system")
    p.add_argument("--nmt-epochs", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("train", help="train a combination (or plain NMT) model"))
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use-source", type=_bool, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--beam", type=int, default=None)
    p.set_defaults(func=cmd_train)

    def decoding(p):
        p.add_argument("--beam", type=int, default=None)
        p.add_argument("--greedy", action="store_true")
        p.add_argument("--max-len", type=int, default=None)
        p.add_argument("--length-norm", type=_bool, default=None)
        p.add_argument("--out", required=True)

    p = common(sub.add_parser("translate", help="decode with a single-input NMT checkpoint"))
    p.add_argument("--model", required=True)
    p.add_argument("--source", "--input", dest="source", required=True)
    decoding(p)
    p.set_defaults(func=cmd_translate)

    p = common(sub.add_parser("combine", help="combine system outputs with a model or a selection policy"))
    p.add_argument("--model", default=None)
    p.add_argument("--policy", default=None, help="fixed:K, oracle or heuristic")
    p.add_argument("--source", default=None)
    p.add_argument("--systems", nargs="+", default=[])
    p.add_argument("--reference", default=None, help="needed by the oracle policy")
    decoding(p)
    p.set_defaults(func=cmd_combine)

    p = common(sub.add_parser("ensemble", help="combine with several checkpoints (averaged distributions)"))
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--source", default=None)
    p.add_argument("--systems", nargs="+", default=[])
    decoding(p)
    p.set_defaults(func=cmd_ensemble)

    p = common(sub.add_parser("eval", help="BLEU / RIBES / UNK report"), seed=False)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--metrics", default="bleu,ribes,unk")
    p.add_argument("--unk-token", default="UNK")
    p.add_argument("--smooth-add1", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the full model"))
    p.add_argument("--config", default=None)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--entries", type=int, default=400)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--inject-fault", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    logging.basicConfig(level=getattr(logging, os.environ.get("NSC_LOG", "error").upper(), logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen" and args.task not in TASKS:
        print(f"nsc gen: error: unknown task {args.task!r}; valid tasks: {', '.join(TASKS)}", file=sys.stderr)
        return 2
    if args.command != "eval" and args.seed is None:
        args.seed = 0
    limiter = _limit_threads(args.threads)
    try:
        args.func(args)
    except NSCError as exc:
        print(f"nsc {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"nsc {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 4
    finally:
        if limiter is not None:
            limiter.unregister() if hasattr(limiter, "unregister") else None
    return 0


if __name__ == "__main__":
    sys.exit(main())
