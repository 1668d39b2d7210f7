"""Connector contracts, LoRA identities, decoder scoring, full-model grad check."""

import math

import numpy as np
import pytest

from bridgest import model as md
from bridgest import numerics as nm
from bridgest.errors import CapacityError, ConfigError, DimensionError
from bridgest.textkit import EOS_ID, Vocab


def tiny_model(vocab_words=8, d=8, enc_layers=1, dec_layers=2, lora_targets=("wq", "wv"),
               rank=2, window=2, heads=1, feature_dim=5, seed=0):
    vocab = Vocab([f"w{i:02d}" for i in range(vocab_words)])
    cfg = md.ModelConfig(
        encoder=md.EncoderConfig(feature_dim_in=feature_dim, d_model=d - 2, n_layers=enc_layers,
                                 seed=seed, hop=2),
        qformer=md.QFormerConfig(window_len_frames=window, queries_per_window=1,
                                 d_model=d, n_layers=1, n_heads=heads),
        decoder=md.DecoderConfig(vocab_size=len(vocab), d_model=d, n_layers=dec_layers,
                                 n_heads=heads, max_seq_len=64, seed=seed + 1),
        lora=md.LoRAConfig(rank=rank, alpha=4.0 * rank, targets=tuple(lora_targets),
                           init_seed=seed + 2),
    )
    return md.BridgeModel.build(cfg, vocab, connector_seed=seed + 3)


# ---------------------------------------------------------------------------
# speech encoder
# ---------------------------------------------------------------------------


def test_encode_speech_output_frames():
    cfg = md.EncoderConfig(feature_dim_in=4, d_model=6, n_layers=1, seed=3, hop=2)
    rng = np.random.default_rng(0)
    assert md.encode_speech(rng.normal(size=(10, 4)), cfg).shape == (5, 6)
    assert md.encode_speech(rng.normal(size=(1, 4)), cfg).shape == (1, 6)
    assert md.encode_speech(rng.normal(size=(11, 4)), cfg).shape == (6, 6)


def test_encode_speech_deterministic():
    cfg = md.EncoderConfig(feature_dim_in=4, d_model=6, seed=3)
    x = np.random.default_rng(1).normal(size=(7, 4))
    assert np.array_equal(md.encode_speech(x, cfg), md.encode_speech(x, cfg))


def test_encode_speech_dim_mismatch():
    cfg = md.EncoderConfig(feature_dim_in=4, d_model=6)
    with pytest.raises(DimensionError):
        md.encode_speech(np.zeros((5, 3)), cfg)


# ---------------------------------------------------------------------------
# fusion and windowing
# ---------------------------------------------------------------------------


def test_fuse_speech_only_passthrough():
    x = np.random.default_rng(2).normal(size=(6, 8))
    assert np.array_equal(md.fuse_features(x), x)


def test_fuse_shapes_and_truncation():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(6, 8))
    e = rng.normal(size=(6, 4))
    assert md.fuse_features(s, e).shape == (6, 12)
    out = md.fuse_features(rng.normal(size=(7, 8)), rng.normal(size=(5, 4)))
    assert out.shape == (5, 12)
    out2 = md.fuse_features(rng.normal(size=(5, 8)), rng.normal(size=(7, 4)))
    assert out2.shape == (5, 12)


def test_fuse_zero_length_stream_errors():
    with pytest.raises(DimensionError):
        md.fuse_features(np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        md.fuse_features(np.zeros((4, 3)), np.zeros((0, 2)))


def test_window_partition_counts():
    frames = np.arange(100 * 3, dtype=float).reshape(100, 3)
    wins = md.window_partition(frames, 17)
    assert len(wins) == 6
    assert [w.shape[0] for w in wins] == [17, 17, 17, 17, 17, 15]
    assert len(md.window_partition(np.zeros((17, 2)), 17)) == 1
    assert len(md.window_partition(np.zeros((1, 2)), 17)) == 1
    with pytest.raises(DimensionError):
        md.window_partition(np.zeros((0, 2)), 17)


# ---------------------------------------------------------------------------
# connector
# ---------------------------------------------------------------------------


def qf_store(cfg, d_in, seed=5):
    store = nm.ParameterStore()
    md.init_qformer(store, cfg, d_in, seed=seed)
    return store


def test_qformer_token_count():
    cfg = md.QFormerConfig(window_len_frames=17, queries_per_window=1, d_model=8,
                           n_layers=1, n_heads=2)
    store = qf_store(cfg, d_in=6)
    fused = np.random.default_rng(4).normal(size=(100, 6))
    assert md.qformer_forward(fused, cfg, store).shape == (6, 8)
    cfg2 = md.QFormerConfig(window_len_frames=4, queries_per_window=3, d_model=8)
    store2 = qf_store(cfg2, d_in=6)
    assert md.qformer_forward(fused, cfg2, store2).shape == (25 * 3, 8)


def test_qformer_intra_window_permutation_invariance():
    cfg = md.QFormerConfig(window_len_frames=5, queries_per_window=2, d_model=8,
                           n_layers=2, n_heads=2)
    store = qf_store(cfg, d_in=6)
    rng = np.random.default_rng(6)
    fused = rng.normal(size=(12, 6))
    base = md.qformer_forward(fused, cfg, store)
    perm = fused.copy()
    perm[0:5] = perm[rng.permutation(5)]  # shuffle inside window 0 only
    out = md.qformer_forward(perm, cfg, store)
    assert np.max(np.abs(out - base)) < 1e-9


def test_qformer_window_locality():
    cfg = md.QFormerConfig(window_len_frames=4, queries_per_window=1, d_model=8,
                           n_layers=1, n_heads=1)
    store = qf_store(cfg, d_in=6)
    rng = np.random.default_rng(7)
    fused = rng.normal(size=(12, 6))  # 3 windows
    base = md.qformer_forward(fused, cfg, store)
    bumped = fused.copy()
    bumped[4:8] += rng.normal(size=(4, 6))  # perturb window 1 only
    out = md.qformer_forward(bumped, cfg, store)
    assert np.max(np.abs(out[0] - base[0])) <= 1e-12
    assert np.max(np.abs(out[2] - base[2])) <= 1e-12
    assert np.max(np.abs(out[1] - base[1])) > 1e-6


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


def make_lora(rank=8, alpha=32.0, d_in=6, d_out=4, seed=0, zero_b=True):
    rng = np.random.default_rng(seed)
    layer = md.LoRALayer(
        w=nm.Tensor(rng.normal(size=(d_in, d_out))),
        a=nm.Tensor(rng.normal(size=(rank, d_in))),
        b=nm.Tensor(np.zeros((d_out, rank)) if zero_b else rng.normal(size=(d_out, rank))),
        scaling=alpha / rank,
    )
    return layer


def test_lora_zero_init_is_exact_base_path():
    layer = make_lora()
    x = np.random.default_rng(1).normal(size=(3, 6))
    assert np.array_equal(md.lora_forward(x, layer), x @ layer.w.data)


def test_lora_scaling_value():
    assert md.LoRAConfig(rank=8, alpha=32.0).scaling == 4.0


def test_lora_alpha_linearity():
    l1 = make_lora(rank=4, alpha=8.0, zero_b=False, seed=2)
    l2 = make_lora(rank=4, alpha=16.0, zero_b=False, seed=2)
    x = np.random.default_rng(3).normal(size=(5, 6))
    base = x @ l1.w.data
    d1 = md.lora_forward(x, l1) - base
    d2 = md.lora_forward(x, l2) - base
    assert np.max(np.abs(d2 - 2.0 * d1)) < 1e-12


def test_lora_backward_matches_finite_differences():
    layer = make_lora(rank=3, alpha=6.0, zero_b=False, seed=4)
    store = nm.ParameterStore()
    store.add("a", layer.a.data)
    store.add("b", layer.b.data)
    layer.a = store["a"]
    layer.b = store["b"]
    x = np.random.default_rng(5).normal(size=(4, 6))
    dummy = np.random.default_rng(6).normal(size=(4, 4))

    def f():
        y = md.lora_forward(x, layer)
        _, da, db = md.lora_backward(dummy, x, layer)
        store.accumulate("a", da)
        store.accumulate("b", db)
        return float((y * dummy).sum())

    assert nm.grad_check(f, store) < 1e-6


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def test_decoder_empty_target_errors():
    m = tiny_model()
    toks = np.zeros((2, 8))
    with pytest.raises(DimensionError, match="nothing to score"):
        md.decoder_forward(toks, [1], [], m.cfg.decoder, m.store, m.cfg.lora)


def test_decoder_capacity_error():
    m = tiny_model()
    toks = np.zeros((60, 8))
    with pytest.raises(CapacityError):
        md.decoder_forward(toks, [1], [4, 5, 6, 7, 2], m.cfg.decoder, m.store, m.cfg.lora)


def test_untrained_decoder_loss_near_log_vocab():
    losses = []
    for seed in range(8):
        m = tiny_model(vocab_words=46, d=8, seed=seed)
        rng = np.random.default_rng(seed + 100)
        toks = rng.normal(size=(4, 8))
        targets = rng.integers(4, len(m.vocab), size=6).tolist()
        loss, _, _ = md.decoder_forward(toks, [1], targets, m.cfg.decoder, m.store, m.cfg.lora)
        losses.append(loss)
    mean = sum(losses) / len(losses)
    assert abs(mean - math.log(50)) / math.log(50) < 0.10


def test_lora_zero_init_model_equivalence_bitexact():
    m_lora = tiny_model(lora_targets=("wq", "wv"))
    m_bare = tiny_model(lora_targets=())
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(8, 5))
    targets = [4, 5, 2]
    l1 = m_lora.example_loss(feats, targets)
    l2 = m_bare.example_loss(feats, targets)
    assert l1 == l2
    assert m_lora.generate_ids(feats, 6) == m_bare.generate_ids(feats, 6)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def rig_constant_logits(m, row):
    """Force every position's logits to a fixed row via the final norm."""
    m.store["decoder.ln_f.gamma"].data[:] = 0.0
    beta = np.zeros(m.cfg.decoder.d_model)
    beta[0] = 1.0
    m.store["decoder.ln_f.beta"].data[:] = beta
    w = np.zeros_like(m.store["decoder.out_proj.w"].data)
    w[0, :] = row
    m.store["decoder.out_proj.w"].data[:] = w


def test_generate_eos_favoring_model_emits_nothing():
    m = tiny_model()
    row = np.zeros(len(m.vocab))
    row[EOS_ID] = 10.0
    rig_constant_logits(m, row)
    feats = np.random.default_rng(12).normal(size=(6, 5))
    assert m.generate_ids(feats, 8) == []


def test_generate_tie_breaks_to_lowest_id():
    m = tiny_model()
    rig_constant_logits(m, np.zeros(len(m.vocab)))  # all logits equal
    feats = np.random.default_rng(13).normal(size=(6, 5))
    out = m.generate_ids(feats, 3)
    assert out == [0, 0, 0]


def test_generate_deterministic():
    m = tiny_model(seed=21)
    feats = np.random.default_rng(14).normal(size=(9, 5))
    assert m.generate_ids(feats, 6) == m.generate_ids(feats, 6)


def test_generate_argmax_invariant_under_positive_logit_rescale():
    m = tiny_model(seed=31)
    feats = np.random.default_rng(15).normal(size=(9, 5))
    base = m.generate_ids(feats, 6)
    m.store["decoder.out_proj.w"].data *= 3.7  # positive rescale of final logits
    assert m.generate_ids(feats, 6) == base


def test_generate_respects_max_new_tokens_and_capacity():
    m = tiny_model()
    rig_constant_logits(m, np.eye(1, len(m.vocab), 5)[0] * 4.0)  # always emit id 5
    feats = np.random.default_rng(16).normal(size=(6, 5))
    assert len(m.generate_ids(feats, 4)) == 4
    with pytest.raises(ConfigError):
        m.generate_ids(feats, 0)


# ---------------------------------------------------------------------------
# full-model gradient check
# ---------------------------------------------------------------------------


def test_full_model_grad_check_tiny_config():
    m = tiny_model(vocab_words=6, d=8, enc_layers=1, dec_layers=2, rank=2, seed=7)
    # exercise the encoder backward too, as the unfreezing profile does
    m.store.set_trainable("speech_encoder.*", True)
    rng = np.random.default_rng(17)
    examples = [
        (rng.normal(size=(6, 5)), [4, 5, 2]),
        (rng.normal(size=(5, 5)), [5, 2]),
    ]

    def f():
        total = 0.0
        for feats, targets in examples:
            total += m.example_loss(feats, targets, backward=True, scale=0.5)
        return 0.5 * total

    assert nm.grad_check(f, m.store) < 1e-4


def test_default_freeze_flags():
    m = tiny_model()
    trainable = set(m.store.trainable_names())
    assert all(n.startswith("qformer.") or ".lora." in n for n in trainable)
    assert any(n.startswith("qformer.") for n in trainable)
    assert any(".lora." in n for n in trainable)
    frozen = set(m.store.names()) - trainable
    assert "decoder.tok_emb" in frozen
    assert any(n.startswith("speech_encoder.") for n in frozen)
