"""Shared builders for tiny end-to-end setups."""

import numpy as np
import pytest

from bridgest import datakit as dk
from bridgest import model as md
from bridgest.textkit import Vocab


def build_vocab(spec: dk.SynthSpec, cot: bool = False) -> Vocab:
    tokens = set(spec.source_tokens())
    if cot:
        tokens.update(["Transcription:", "Translation:"])
    return Vocab(sorted(tokens))


def build_model(spec: dk.SynthSpec, d_model=8, enc_layers=1, qf_layers=1, dec_layers=2,
                n_heads=1, window=None, rank=2, seed=0, cot=False) -> md.BridgeModel:
    vocab = build_vocab(spec, cot=cot)
    hop = 2
    window = window if window is not None else max(1, spec.frames_per_token // hop)
    cfg = md.ModelConfig(
        encoder=md.EncoderConfig(feature_dim_in=spec.feature_dim, d_model=d_model,
                                 n_layers=enc_layers, seed=seed, hop=hop),
        qformer=md.QFormerConfig(window_len_frames=window, queries_per_window=1,
                                 d_model=d_model, n_layers=qf_layers, n_heads=n_heads),
        decoder=md.DecoderConfig(vocab_size=len(vocab), d_model=d_model,
                                 n_layers=dec_layers, n_heads=n_heads,
                                 max_seq_len=256, seed=seed + 1),
        lora=md.LoRAConfig(rank=rank, alpha=4.0 * rank, init_seed=seed + 2),
    )
    return md.BridgeModel.build(cfg, vocab, connector_seed=seed + 3)


def tiny_spec(seed=0, vocab_size=10, lengths=(2, 4), feature_dim=5, noise=0.05):
    return dk.SynthSpec(seed=seed, vocab_size=vocab_size, sentence_length_range=lengths,
                        mapping_rule="shift:1", frames_per_token=4, feature_dim=feature_dim,
                        noise_std=noise)


@pytest.fixture
def tiny_setup():
    spec = tiny_spec()
    model = build_model(spec)
    train = dk.synth_generate(spec, 8)
    dev = dk.synth_generate(spec, 4, start_index=100)
    return spec, model, train, dev
