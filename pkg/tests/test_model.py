import math
import statistics
import struct
from collections import Counter

import numpy as np
import pytest

from nsc import model as model_module
from nsc import numerics as nx
from nsc.decoder import EOS, DecodeConfig, DecoderState, beam_search, greedy_decode
from nsc.errors import ConfigurationError, DataError, InputError, LoadError
from nsc.model import (CombinationExample, CombinationModel, ModelConfig, Network, Vocabulary, build_vocab,
                       checkpoint_bytes, count_params, dev_score, forward_loss, init_params, load_checkpoint,
                       load_config, param_shapes, preset, save_checkpoint, train)

from toy import oracle_gru, oracle_step, softmax, toy_config, toy_example, toy_params


def words(n, prefix="w"):
    return Vocabulary([f"{prefix}{i}" for i in range(n)])


# ------------------------------------------------------------------ config

def test_presets():
    desk, paper = preset("desk"), preset("paper")
    assert (desk.hidden, desk.embedding, desk.beam, desk.tgt_vocab_limit) == (32, 16, 4, 200)
    assert (paper.hidden, paper.embedding, paper.beam, paper.src_vocab_limit) == (1000, 500, 10, 30000)
    with pytest.raises(ConfigurationError):
        preset("huge")


@pytest.mark.parametrize("bad", [dict(hidden=0), dict(embedding=0), dict(num_system_inputs=-1),
                                 dict(num_system_inputs=0, use_source=False), dict(dtype="int8"),
                                 dict(gru_convention="reset-after")])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        ModelConfig(**bad)


def test_config_file_round_trip(tmp_path):
    cfg = preset("desk", num_system_inputs=2, use_source=False, seed=9)
    path = tmp_path / "model.cfg"
    path.write_text("# desk run\n" + cfg.to_text())
    assert load_config(path) == cfg
    path.write_text("hidden = 7\n")
    assert load_config(path).hidden == 7
    path.write_text("no_such_key=1\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


# -------------------------------------------------------------- vocabulary

def test_build_vocab_frequency_order():
    v = build_vocab([["a", "a", "b"]], 2)
    assert v.words == ["a", "b"]
    assert v.lookup("a") == 4 and v.lookup("zzz") == 3


def test_build_vocab_ties_are_lexicographic():
    assert build_vocab([["c", "b", "a", "c"]], 3).words == ["c", "a", "b"]


def test_build_vocab_matches_counting_oracle():
    rng = np.random.default_rng(0)
    corpus = [[f"t{int(x)}" for x in rng.zipf(1.5, size=10) % 60] for _ in range(100)]
    counts = Counter(t for s in corpus for t in s)
    expected = sorted(counts, key=lambda t: (-counts[t], t))[:25]
    assert build_vocab(corpus, 25).words == expected


def test_build_vocab_errors():
    with pytest.raises(ConfigurationError):
        build_vocab([["a"]], 0)
    with pytest.raises(InputError):
        build_vocab([], 5)


def test_vocabulary_is_bijective():
    v = words(20)
    ids = v.encode(v.words)
    assert len(set(ids)) == 20 and v.decode(ids) == v.words


# -------------------------------------------------------------- parameters

def test_init_is_deterministic_and_well_formed():
    cfg = preset("desk", seed=5)
    a, b = init_params(cfg, 30, 40), init_params(cfg, 30, 40)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.all(v == 0) for k, v in a.items() if k.rsplit(".", 1)[-1].startswith("b_"))
    for k, v in a.items():
        if k.rsplit(".", 1)[-1] in ("U_z", "U_r", "U_h"):
            np.testing.assert_allclose(v.T.astype(np.float64) @ v, np.eye(v.shape[0]), atol=1e-5)
        elif not k.rsplit(".", 1)[-1].startswith("b_"):
            assert np.abs(v).max() <= cfg.init_scale
    assert sum(v.size for v in a.values()) == count_params(cfg, 30, 40)


def test_parameter_layout_follows_sharing_flags():
    sep = param_shapes(ModelConfig(num_system_inputs=3), 10, 10)
    shared = param_shapes(ModelConfig(num_system_inputs=3, share_system_encoders=True, share_word_attention=True),
                          10, 10)
    assert "enc.sys2.fwd.W_z" in sep and "att.sys2.W_a" in sep
    assert "enc.sys.fwd.W_z" in shared and "att.shared.W_a" in shared and "enc.sys2.fwd.W_z" not in shared
    assert len(shared) < len(sep)


# -------------------------------------------------------------------- loss

def test_uniform_model_loss_is_tokens_times_log_vocab():
    cfg = toy_config(K=2)
    params = toy_params(cfg, 9, 0)
    params["out.W_vocab"][...] = 0
    params["out.b_vocab"][...] = 0
    rng = np.random.default_rng(0)
    batch = [toy_example(rng, cfg, 9) for _ in range(3)]
    tokens = sum(len(ex.reference) + 1 for ex in batch)
    assert abs(forward_loss(batch, params, cfg).item() - tokens * math.log(9)) < 1e-9


def test_batch_loss_is_sum_of_single_losses():
    cfg = toy_config(K=3, use_source=True)
    params = toy_params(cfg, 11, 1)
    rng = np.random.default_rng(1)
    a, b = toy_example(rng, cfg, 11, 1, 6), toy_example(rng, cfg, 11, 1, 6)
    both = forward_loss([a, b], params, cfg).item()
    assert both >= 0
    assert abs(both - forward_loss([a], params, cfg).item() - forward_loss([b], params, cfg).item()) < 1e-5


def test_loss_rejects_pad_in_reference():
    cfg = toy_config(K=1)
    params = toy_params(cfg, 9, 0)
    with pytest.raises(DataError):
        forward_loss([CombinationExample([4], [[4]], [5, 0, 6])], params, cfg)


def test_loss_matches_teacher_forced_oracle():
    cfg = toy_config(K=2, use_source=True)
    params = toy_params(cfg, 8, 2)
    ex = toy_example(np.random.default_rng(2), cfg, 8)
    net = Network(cfg, params)
    with nx.no_grad():
        Hs = [A.H.data[0] for A in net.encode([ex])]
    s = np.tanh(params["dec.W_init"] @ Hs[0].mean(axis=0))
    total, prev = 0.0, 2
    for y in ex.reference + [EOS]:
        p, s = oracle_step(params, Hs, cfg.input_names, s, prev)
        total -= math.log(p[y])
        prev = y
    assert abs(forward_loss([ex], params, cfg).item() - total) < 1e-9


def test_permuting_systems_with_their_parameters_keeps_loss():
    cfg = toy_config(K=3, use_source=True)
    params = toy_params(cfg, 10, 3)
    rng = np.random.default_rng(3)
    batch = [toy_example(rng, cfg, 10) for _ in range(2)]
    perm = [2, 0, 1]
    moved = dict(params)
    for new, old in enumerate(perm):
        for k, v in params.items():
            for stem in (f"enc.sys{old}.", f"att.sys{old}."):
                if k.startswith(stem):
                    moved[k.replace(f"sys{old}.", f"sys{new}.", 1)] = v
    permuted = [CombinationExample(ex.source, [ex.systems[o] for o in perm], ex.reference) for ex in batch]
    assert abs(forward_loss(batch, params, cfg).item() - forward_loss(permuted, moved, cfg).item()) < 1e-6


def test_full_model_gradient_check():
    from nsc.cli import gradcheck_setup
    cfg = ModelConfig(num_system_inputs=2, use_source=True, hidden=4, embedding=3, dtype="float64", init_scale=1.0)
    batch, params = gradcheck_setup(cfg, 0)
    res = nx.grad_check(lambda P: forward_loss(batch, P, cfg), params, eps=1e-5, max_entries=150)
    assert res.max_relative_error < 1e-6


# ----------------------------------------------------- single-input baseline

def baseline_greedy(P, H, max_len):
    """Separately wired encoder-decoder with one attention and no fusion layer."""
    s = np.tanh(P["dec.W_init"] @ H.mean(axis=0))
    prev, out = 2, []
    Wa, Ua, va = (P[f"att.sys0.{f}"] for f in ("W_a", "U_a", "v_a"))
    for _ in range(max_len):
        e = P["emb.tgt"][prev]
        s_t = oracle_gru(P, "dec.gru1", e, s)
        alpha = softmax(np.array([va @ np.tanh(Wa @ s_t + Ua @ h) for h in H]))
        c = alpha @ H
        s = oracle_gru(P, "dec.gru2", c, s_t)
        t = np.tanh(P["out.W_o1"] @ s + P["out.W_o2"] @ e + P["out.W_o3"] @ c + P["out.b_o"])
        p = softmax(P["out.W_vocab"] @ t + P["out.b_vocab"])
        p[[0, 2]] = 0
        prev = int(np.argmax(p))
        out.append(prev)
        if prev == EOS:
            break
    return out


def test_single_system_reduces_to_plain_attention_model():
    for seed in range(10):
        cfg = toy_config(K=1, use_source=False, n=5, e=4)
        params = toy_params(cfg, 12, seed)
        ex = toy_example(np.random.default_rng(seed), cfg, 12)
        net = Network(cfg, params)
        with nx.no_grad():
            inputs = net.encode([ex])
            logits, _, att = net.decoder.step(net.decoder.init_state(inputs), inputs)
        assert np.all(att.beta.data == 1.0)
        ours = greedy_decode(net.decoder, inputs, 10).tokens
        assert ours == beam_search(net.decoder, inputs, DecodeConfig(beam=1, max_len=10)).tokens
        assert ours == baseline_greedy(params, inputs[0].H.data[0], 10)


# ----------------------------------------------------------------- training

def copy_examples(n, vocab, seed, K=1, lo=2, hi=5):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ref = [int(t) for t in rng.integers(4, vocab, size=int(rng.integers(lo, hi + 1)))]
        out.append(CombinationExample(list(ref), [list(ref) for _ in range(K)], ref))
    return out


def test_overfits_single_example():
    cfg = preset("desk", num_system_inputs=1, use_source=False, batch_size=1, max_epochs=500, seed=3)
    ex = copy_examples(1, 12, 0, lo=5, hi=5)
    result = train(ex, cfg, words(8))
    per_token = forward_loss(ex, result.params, cfg).item() / (len(ex[0].reference) + 1)
    assert result.updates <= 500
    assert per_token < 0.05


def test_training_is_deterministic_and_loss_trends_down():
    cfg = preset("desk", num_system_inputs=2, use_source=False, batch_size=8, max_epochs=6, seed=1)
    data = copy_examples(64, 14, 1, K=2)
    a = train(data, cfg, words(10))
    b = train(data, cfg, words(10))
    losses = [r.loss_per_token for r in a.history]
    assert losses == [r.loss_per_token for r in b.history]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    medians = [statistics.median(losses[max(0, i - 1):i + 2]) for i in range(5)]
    assert all(x >= y for x, y in zip(medians, medians[1:]))


def test_best_dev_parameters_are_kept():
    cfg = preset("desk", num_system_inputs=1, use_source=False, batch_size=8, max_epochs=4, seed=2)
    data = copy_examples(40, 12, 2)
    seen = []
    result = train(data, cfg, words(8), dev=data[:10], on_epoch=seen.append)
    assert len(seen) == 4
    assert result.best_dev_bleu == max(r.dev_bleu for r in seen)
    assert abs(dev_score(result.params, cfg, data[:10]) - result.best_dev_bleu) < 1e-9


def test_patience_waits_for_a_nonzero_dev_score(monkeypatch):
    scores = iter([0.0] * 5 + [5.0, 5.0, 4.0] + [1.0] * 10)
    monkeypatch.setattr(model_module, "dev_score", lambda *a, **k: next(scores))
    cfg = preset("desk", num_system_inputs=1, use_source=False, batch_size=8, max_epochs=18, seed=2, patience=2)
    data = copy_examples(16, 8, 2)
    seen = []
    result = train(data, cfg, words(6), dev=data[:4], on_epoch=seen.append)
    # zeros never trigger the stop; the tie at epoch 7 and the drop at epoch 8 are the two stale evaluations
    assert [r.dev_bleu for r in seen] == [0.0] * 5 + [5.0, 5.0, 4.0]
    assert result.best_dev_bleu == 5.0


def test_empty_training_set():
    with pytest.raises(InputError):
        train([], preset("desk"), words(3))


# -------------------------------------------------------------- checkpoints

def small_checkpoint(tmp_path, use_source=True):
    cfg = preset("desk", num_system_inputs=2, use_source=use_source, hidden=6, embedding=5)
    src, tgt = (words(9, "s") if use_source else None), words(11, "t")
    params = init_params(cfg, len(src) if src else 0, len(tgt))
    path = tmp_path / "m.nsc"
    save_checkpoint(params, cfg, path, tgt, src)
    return path, params, cfg, src, tgt


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    path, params, cfg, src, tgt = small_checkpoint(tmp_path)
    ck = load_checkpoint(path)
    assert ck.cfg == cfg and ck.src_vocab == src and ck.tgt_vocab == tgt
    assert all(np.array_equal(ck.params[k], params[k]) for k in params)
    assert checkpoint_bytes(ck.params, ck.cfg, ck.tgt_vocab, ck.src_vocab) == path.read_bytes()
    raw = path.read_bytes()
    assert raw[:4] == b"NSC1" and struct.unpack("<I", raw[4:8]) == (1,)


def test_checkpoint_without_source(tmp_path):
    path, _, cfg, _, tgt = small_checkpoint(tmp_path, use_source=False)
    ck = load_checkpoint(path)
    assert ck.src_vocab is None and not ck.cfg.use_source


def test_truncated_checkpoint(tmp_path):
    path, *_ = small_checkpoint(tmp_path)
    raw = path.read_bytes()
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(LoadError):
            load_checkpoint(path)


def test_bad_magic_and_version(tmp_path):
    path, *_ = small_checkpoint(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(LoadError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(LoadError, match="version"):
        load_checkpoint(path)


def test_dimension_mismatch_names_field(tmp_path):
    path, *_ = small_checkpoint(tmp_path)
    raw = path.read_bytes()
    # declare a larger hidden size than the stored tensors carry
    path.write_bytes(raw.replace(b"hidden=6\n", b"hidden=7\n"))
    with pytest.raises(LoadError, match=r"enc\.src\.fwd\.W_z: dims"):
        load_checkpoint(path)


def test_reloaded_model_decodes_identically(tmp_path):
    cfg = preset("desk", num_system_inputs=1, use_source=True, batch_size=8, max_epochs=3, seed=4)
    data = copy_examples(30, 12, 4)
    tgt, src = words(8), words(8)
    result = train(data, cfg, tgt, src)
    path = tmp_path / "m.nsc"
    save_checkpoint(result.params, cfg, path, tgt, src)
    a = CombinationModel(result.params, cfg, tgt, src)
    b = CombinationModel.load(path)
    assert dev_score(a.params, cfg, data) == dev_score(b.params, b.cfg, data)
    for ex in data[:5]:
        assert a.beam(ex, DecodeConfig(beam=3)).tokens == b.beam(ex, DecodeConfig(beam=3)).tokens


def test_zero_systems_is_plain_translation():
    cfg = ModelConfig(num_system_inputs=0, use_source=True, hidden=4, embedding=3)
    assert cfg.input_names == ["src"]
    net = Network(cfg, init_params(cfg, 9, 9))
    with nx.no_grad():
        inputs = net.encode([CombinationExample([4, 5], [], [6])])
    assert len(inputs) == 1
    state = net.decoder.init_state(inputs)
    assert isinstance(state, DecoderState)
