"""Batch command-line surface: synth, train, eval, cot-eval, lr-dump,
grad-check. JSON configs with --set overrides; every run writes its fully
resolved config next to its outputs under out_dir/run_id/."""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import datakit as dk
from . import numerics as nm
from . import textkit as tk
from . import training as tr
from .errors import BridgestError, ConfigError
from .model import (
    BridgeModel,
    DecoderConfig,
    EncoderConfig,
    LoRAConfig,
    LoRALayer,
    ModelConfig,
    QFormerConfig,
    lora_backward,
    lora_forward,
)

SEED_ENV_VAR = "BRIDGEST_SEED"
GRAD_CHECK_TOLERANCE = 1e-4


def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown config key(s) {sorted(unknown)}")


def _resolve_seed(cfg: dict) -> int:
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from exc
    return 0


def _run_dir(cfg: dict, command: str, seed: int) -> Path:
    run_id = str(cfg.get("run_id") or f"{command}-{seed}")
    out = Path(cfg.get("out_dir", "runs")) / run_id
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved_config(out: Path, resolved: dict) -> None:
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _synth_spec(block: dict, seed: int) -> dk.SynthSpec:
    _check_keys(block, ["vocab_size", "sentence_length_range", "mapping_rule",
                        "frames_per_token", "feature_dim", "noise_std"], "synth")
    kwargs = dict(block)
    if "sentence_length_range" in kwargs:
        kwargs["sentence_length_range"] = tuple(kwargs["sentence_length_range"])
    return dk.SynthSpec(seed=seed, **kwargs)


def _spec_dict(spec: dk.SynthSpec) -> dict:
    return {
        "seed": spec.seed,
        "vocab_size": spec.vocab_size,
        "sentence_length_range": list(spec.sentence_length_range),
        "mapping_rule": spec.mapping_rule,
        "frames_per_token": spec.frames_per_token,
        "feature_dim": spec.feature_dim,
        "noise_std": spec.noise_std,
    }


def _build_vocab(records, cot: bool) -> tk.Vocab:
    texts = []
    for rec in records:
        texts.append(rec.transcript)
        texts.append(rec.translation)
    if cot:
        texts.append(f"{tk.TRANSCRIPTION_MARKER} {tk.TRANSLATION_MARKER}")
    return tk.Vocab.from_texts(texts)


def _model_config(block: dict, vocab_size: int, seed: int) -> ModelConfig:
    _check_keys(block, ["encoder", "qformer", "decoder", "lora", "audio_encoder",
                        "prompt"], "model")
    enc_block = dict(block.get("encoder", {}))
    _check_keys(enc_block, ["feature_dim_in", "d_model", "n_layers", "seed", "hop"],
                "model.encoder")
    enc_block.setdefault("seed", seed + 11)
    qf_block = dict(block.get("qformer", {}))
    _check_keys(qf_block, ["window_len_frames", "queries_per_window", "d_model",
                           "n_layers", "n_heads"], "model.qformer")
    dec_block = dict(block.get("decoder", {}))
    _check_keys(dec_block, ["vocab_size", "d_model", "n_layers", "n_heads",
                            "max_seq_len", "seed"], "model.decoder")
    dec_block.setdefault("vocab_size", vocab_size)
    dec_block.setdefault("seed", seed + 13)
    lora_block = dict(block.get("lora", {}))
    _check_keys(lora_block, ["rank", "alpha", "targets", "init_seed"], "model.lora")
    if "targets" in lora_block:
        lora_block["targets"] = tuple(lora_block["targets"])
    lora_block.setdefault("init_seed", seed + 17)
    audio_block = block.get("audio_encoder")
    audio = None
    if audio_block:
        _check_keys(audio_block, ["feature_dim_in", "d_model", "n_layers", "seed", "hop"],
                    "model.audio_encoder")
        audio_block = dict(audio_block)
        audio_block.setdefault("seed", seed + 19)
        audio = EncoderConfig(**audio_block)
    return ModelConfig(
        encoder=EncoderConfig(**enc_block),
        qformer=QFormerConfig(**qf_block),
        decoder=DecoderConfig(**dec_block),
        lora=LoRAConfig(**lora_block),
        audio_encoder=audio,
        prompt=str(block.get("prompt", "")),
    )


def _load_records(manifest_path: str, feature_store: str) -> list:
    records = dk.load_manifest(manifest_path)
    if feature_store:
        dk.attach_features(records, dk.load_feature_store(feature_store))
    return records


def _generate_many(model: BridgeModel, records, max_new_tokens: int, threads: int):
    """Greedy generations per record, in input order regardless of threads."""
    def gen(rec):
        return model.generate_text(rec.features, max_new_tokens)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(gen, records))
    return [gen(rec) for rec in records]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict, threads: int = 1) -> int:
    _check_keys(cfg, ["run_id", "out_dir", "seed", "synth", "counts", "direction",
                      "inline_features"], "synth config")
    seed = _resolve_seed(cfg)
    out = _run_dir(cfg, "synth", seed)
    spec = _synth_spec(dict(cfg.get("synth", {})), seed)
    counts_block = dict(cfg.get("counts", {}))
    _check_keys(counts_block, ["train", "dev", "test"], "counts")
    counts = {s: int(counts_block.get(s, 0)) for s in dk.SPLIT_ORDER}
    direction = str(cfg.get("direction", "en-xx"))
    inline = bool(cfg.get("inline_features", False))

    start = 0
    by_split = {}
    for split in dk.SPLIT_ORDER:
        by_split[split] = dk.synth_generate(spec, counts[split], direction=direction,
                                            id_prefix=split, start_index=start)
        start += counts[split]

    for split in dk.SPLIT_ORDER:
        records = by_split[split]
        if not inline:
            store_name = f"features_{split}.json"
            dk.save_feature_store(out / store_name, records)
            slim = []
            for rec in records:
                slim.append(dk.UtteranceRecord(
                    id=rec.id, audio_source=store_name, offset_s=rec.offset_s,
                    duration_s=rec.duration_s, transcript=rec.transcript,
                    translation=rec.translation, direction=rec.direction))
            dk.save_manifest(out / f"{split}.jsonl", slim)
        else:
            dk.save_manifest(out / f"{split}.jsonl", records)

    stats = dk.dataset_stats(by_split)
    (out / "stats.json").write_text(
        json.dumps(stats.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "stats.txt").write_text(stats.render() + "\n", encoding="utf-8")
    print(stats.render())
    _write_resolved_config(out, {
        "command": "synth", "run_id": out.name, "out_dir": str(out.parent),
        "seed": seed, "synth": _spec_dict(spec), "counts": counts,
        "direction": direction, "inline_features": inline,
    })
    print(f"wrote {sum(counts.values())} records under {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict, threads: int = 1) -> int:
    _check_keys(cfg, ["run_id", "out_dir", "seed", "data", "model", "schedule",
                      "profile", "freeze", "two_stage", "length_threshold_chars",
                      "max_new_tokens"], "train config")
    seed = _resolve_seed(cfg)
    out = _run_dir(cfg, "train", seed)

    data_block = dict(cfg.get("data", {}))
    _check_keys(data_block, ["train_manifest", "dev_manifest", "train_feature_store",
                             "dev_feature_store"], "data")
    for key in ("train_manifest", "dev_manifest"):
        if not data_block.get(key):
            raise ConfigError(f"data.{key} is required")
    train_records = _load_records(data_block["train_manifest"],
                                  data_block.get("train_feature_store", ""))
    dev_records = _load_records(data_block["dev_manifest"],
                                data_block.get("dev_feature_store", ""))
    if not train_records:
        raise ConfigError("training manifest is empty")

    profile_block = dict(cfg.get("profile", {}))
    _check_keys(profile_block, ["direction", "batch_size", "grad_accum_steps",
                                "epochs_per_stage", "seed", "cot_targets"], "profile")
    profile_block.setdefault("seed", seed)
    profile = tr.TrainProfile(**profile_block)

    freeze_block = dict(cfg.get("freeze", {}))
    _check_keys(freeze_block, ["trainable_patterns", "speech_encoder_trainable_first_epoch"],
                "freeze")
    if "trainable_patterns" in freeze_block:
        freeze_block["trainable_patterns"] = tuple(freeze_block["trainable_patterns"])
    policy = tr.FreezePolicy(**freeze_block)

    schedule_block = dict(cfg.get("schedule", {}))
    _check_keys(schedule_block, ["total_steps", "warmup_steps", "lr_base", "lr_peak",
                                 "lr_min", "n_cycles"], "schedule")
    two_stage = bool(cfg.get("two_stage", True))
    threshold = int(cfg.get("length_threshold_chars", 400))
    max_new_tokens = int(cfg.get("max_new_tokens", 24))

    if two_stage:
        short, long = dk.split_by_transcript_length(train_records, threshold)
    else:
        short, long = dk.Bucket("short", list(train_records)), dk.Bucket("long")

    if "total_steps" not in schedule_block:
        per_stage = -(-len(short.records) // (profile.batch_size * profile.grad_accum_steps))
        per_stage_long = -(-max(len(long.records), 1)
                           // (profile.batch_size * profile.grad_accum_steps))
        schedule_block["total_steps"] = profile.epochs_per_stage * (per_stage + per_stage_long)
    schedule = tr.ScheduleConfig(**schedule_block)

    vocab = _build_vocab(train_records, profile.cot_targets)
    model_cfg = _model_config(dict(cfg.get("model", {})), len(vocab), seed)
    model = BridgeModel.build(model_cfg, vocab, connector_seed=seed + 23)

    result = tr.run_curriculum(model, short, long, dev_records, profile, schedule,
                               policy, out, max_new_tokens=max_new_tokens)
    tr.write_stage_log(out / "stage_log.jsonl", result.log_rows)

    _write_resolved_config(out, {
        "command": "train", "run_id": out.name, "out_dir": str(out.parent), "seed": seed,
        "data": data_block,
        "model": tr._model_config_to_dict(model_cfg),
        "schedule": {k: getattr(schedule, k) for k in
                     ("total_steps", "warmup_steps", "lr_base", "lr_peak", "lr_min",
                      "n_cycles")},
        "profile": {k: getattr(profile, k) for k in
                    ("direction", "batch_size", "grad_accum_steps", "epochs_per_stage",
                     "seed", "cot_targets")},
        "freeze": {"trainable_patterns": list(policy.trainable_patterns),
                   "speech_encoder_trainable_first_epoch":
                       policy.speech_encoder_trainable_first_epoch},
        "two_stage": two_stage, "length_threshold_chars": threshold,
        "max_new_tokens": max_new_tokens,
    })
    for stage in result.stages:
        print(f"stage {stage.stage}: best dev BLEU {stage.best_dev_bleu:.3f} "
              f"at step {stage.best_step}")
    print(f"best checkpoint: {result.best_path}")
    print(f"final checkpoint: {result.final_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(cfg: dict, threads: int = 1) -> int:
    _check_keys(cfg, ["run_id", "out_dir", "seed", "checkpoint", "manifests",
                      "feature_stores", "max_new_tokens"], "eval config")
    seed = _resolve_seed(cfg)
    out = _run_dir(cfg, "eval", seed)
    ckpt = cfg.get("checkpoint")
    if not ckpt or not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt!r}")
    manifests = dict(cfg.get("manifests", {}))
    if not manifests:
        raise ConfigError("eval: no manifests given")
    _check_keys(manifests, ["dev", "test"], "manifests")
    stores = dict(cfg.get("feature_stores", {}))
    _check_keys(stores, ["dev", "test"], "feature_stores")
    max_new_tokens = int(cfg.get("max_new_tokens", 24))

    model, _ = tr.load_checkpoint(ckpt)
    rows = []
    for split in ("dev", "test"):
        if split not in manifests:
            continue
        records = _load_records(manifests[split], stores.get(split, ""))
        if not records:
            raise ConfigError(f"eval: manifest for {split!r} is empty")
        by_direction: dict[str, list] = {}
        for rec in records:
            by_direction.setdefault(rec.direction, []).append(rec)
        for direction in sorted(by_direction):
            recs = by_direction[direction]
            hyps = [tk.tokenize(t) for t in
                    _generate_many(model, recs, max_new_tokens, threads)]
            refs = [tk.tokenize(r.translation) for r in recs]
            report = tk.bleu_corpus(hyps, refs)
            rows.append({"direction": direction, "split": split,
                         "bleu": report.score, "n_utterances": len(recs)})
    payload = {"rows": rows}
    (out / "eval_report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_resolved_config(out, {
        "command": "eval", "run_id": out.name, "out_dir": str(out.parent), "seed": seed,
        "checkpoint": str(ckpt), "manifests": manifests, "feature_stores": stores,
        "max_new_tokens": max_new_tokens,
    })
    for row in rows:
        print(f"{row['direction']} {row['split']}: BLEU {row['bleu']:.2f} "
              f"({row['n_utterances']} utterances)")
    return 0


# ---------------------------------------------------------------------------
# cot-eval
# ---------------------------------------------------------------------------


def cmd_cot_eval(cfg: dict, threads: int = 1) -> int:
    _check_keys(cfg, ["run_id", "out_dir", "seed", "checkpoint", "manifest",
                      "feature_store", "baseline_hypotheses", "baseline_checkpoint",
                      "max_new_tokens", "inject_malformed_every"], "cot-eval config")
    seed = _resolve_seed(cfg)
    out = _run_dir(cfg, "cot-eval", seed)
    ckpt = cfg.get("checkpoint")
    if not ckpt or not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt!r}")
    manifest = cfg.get("manifest")
    if not manifest:
        raise ConfigError("cot-eval: manifest is required")
    records = _load_records(manifest, cfg.get("feature_store", ""))
    if not records:
        raise ConfigError("cot-eval: manifest is empty")
    max_new_tokens = int(cfg.get("max_new_tokens", 48))
    inject_every = int(cfg.get("inject_malformed_every", 0))

    model, _ = tr.load_checkpoint(ckpt)
    raw_texts = _generate_many(model, records, max_new_tokens, threads)
    if inject_every > 0:
        raw_texts = [
            "output withheld" if (i % inject_every) == inject_every - 1 else t
            for i, t in enumerate(raw_texts)
        ]
    responses = [tk.parse_cot_response(t) for t in raw_texts]

    baseline_file = cfg.get("baseline_hypotheses")
    baseline_ckpt = cfg.get("baseline_checkpoint")
    if baseline_file:
        lines = Path(baseline_file).read_text(encoding="utf-8").splitlines()
        if len(lines) != len(records):
            raise ConfigError(
                f"baseline has {len(lines)} lines for {len(records)} utterances")
        baseline = lines
    elif baseline_ckpt:
        base_model, _ = tr.load_checkpoint(baseline_ckpt)
        baseline = _generate_many(base_model, records, max_new_tokens, threads)
    else:
        raise ConfigError("cot-eval: need baseline_hypotheses or baseline_checkpoint")

    rows = []
    by_direction: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_direction.setdefault(rec.direction, []).append(i)
    for direction in sorted(by_direction):
        idx = by_direction[direction]
        metrics = tk.cot_metrics([responses[i] for i in idx],
                                 [records[i].translation for i in idx],
                                 [baseline[i] for i in idx])
        rows.append(tk.cot_report_dict(direction, metrics))
    payload = {"rows": rows}
    (out / "cot_report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_resolved_config(out, {
        "command": "cot-eval", "run_id": out.name, "out_dir": str(out.parent),
        "seed": seed, "checkpoint": str(ckpt), "manifest": str(manifest),
        "feature_store": cfg.get("feature_store", ""),
        "baseline_hypotheses": baseline_file or "",
        "baseline_checkpoint": baseline_ckpt or "",
        "max_new_tokens": max_new_tokens, "inject_malformed_every": inject_every,
    })
    for row in rows:
        parsed_bleu = "n/a" if row["bleu_parsed"] is None else f"{row['bleu_parsed']:.2f}"
        print(f"{row['direction']}: parse success {row['success_rate_pct']:.2f}% "
              f"({row['parsed']}/{row['total']}), parsed BLEU {parsed_bleu}")
    return 0


# ---------------------------------------------------------------------------
# lr-dump
# ---------------------------------------------------------------------------


def cmd_lr_dump(cfg: dict, threads: int = 1) -> int:
    _check_keys(cfg, ["run_id", "out_dir", "seed", "schedule", "every"], "lr-dump config")
    seed = _resolve_seed(cfg)
    out = _run_dir(cfg, "lr-dump", seed)
    schedule_block = dict(cfg.get("schedule", {}))
    _check_keys(schedule_block, ["total_steps", "warmup_steps", "lr_base", "lr_peak",
                                 "lr_min", "n_cycles"], "schedule")
    if "total_steps" not in schedule_block:
        raise ConfigError("lr-dump: schedule.total_steps is required")
    schedule = tr.ScheduleConfig(**schedule_block)
    every = int(cfg.get("every", 1))
    if every < 1:
        raise ConfigError(f"every must be >= 1, got {every}")
    steps = list(range(0, schedule.total_steps + 1, every))
    if steps[-1] != schedule.total_steps:
        steps.append(schedule.total_steps)
    with open(out / "schedule.csv", "w", encoding="utf-8") as f:
        f.write("step,lr\n")
        for step in steps:
            f.write(f"{step},{tr.lr_at(step, schedule):.12e}\n")
    _write_resolved_config(out, {
        "command": "lr-dump", "run_id": out.name, "out_dir": str(out.parent),
        "seed": seed, "every": every,
        "schedule": {k: getattr(schedule, k) for k in
                     ("total_steps", "warmup_steps", "lr_base", "lr_peak", "lr_min",
                      "n_cycles")},
    })
    print(f"wrote {len(steps)} rows to {out / 'schedule.csv'}")
    return 0


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------


def _grad_check_cases(corrupt: str | None):
    """Per-layer finite-difference checks; `corrupt` skews one analytic grad."""

    def corruption(name):
        return 1.01 if corrupt == name else 1.0

    cases = []

    def case_linear():
        rng = np.random.default_rng(0)
        store = nm.ParameterStore()
        w = store.add("w", rng.normal(size=(5, 4)))
        b = store.add("b", rng.normal(size=4) * 0.1)
        x = rng.normal(size=(3, 5))
        dummy = rng.normal(size=(3, 4))

        def f():
            y = nm.linear(x, w.data, b.data)
            _, dw, db = nm.linear_backward(dummy, x, w.data)
            store.accumulate("w", dw * corruption("linear"))
            store.accumulate("b", db)
            return float((y * dummy).sum())

        return nm.grad_check(f, store)

    cases.append(("linear", case_linear))

    def case_layer_norm():
        rng = np.random.default_rng(1)
        store = nm.ParameterStore()
        x = store.add("x", rng.normal(size=(3, 6)))
        g = store.add("gamma", rng.normal(size=6) + 1.0)
        b = store.add("beta", rng.normal(size=6) * 0.1)
        dummy = rng.normal(size=(3, 6))

        def f():
            y = nm.layer_norm(x.data, g.data, b.data)
            dx, dg, db = nm.layer_norm_backward(dummy, x.data, g.data)
            store.accumulate("x", dx * corruption("layer_norm"))
            store.accumulate("gamma", dg)
            store.accumulate("beta", db)
            return float((y * dummy).sum())

        return nm.grad_check(f, store)

    cases.append(("layer_norm", case_layer_norm))

    def case_softmax_cross_entropy():
        rng = np.random.default_rng(2)
        store = nm.ParameterStore()
        logits = store.add("logits", rng.normal(size=(4, 7)))
        targets = rng.integers(0, 7, size=4)

        def f():
            loss = nm.cross_entropy(logits.data, targets)
            d = nm.cross_entropy_backward(logits.data, targets)
            store.accumulate("logits", d * corruption("softmax_cross_entropy"))
            return loss

        return nm.grad_check(f, store)

    cases.append(("softmax_cross_entropy", case_softmax_cross_entropy))

    def case_attention():
        rng = np.random.default_rng(3)
        store = nm.ParameterStore()
        q = store.add("q", rng.normal(size=(3, 4)))
        k = store.add("k", rng.normal(size=(5, 4)))
        v = store.add("v", rng.normal(size=(5, 4)))
        dummy = rng.normal(size=(3, 4))

        def f():
            out = nm.attention(q.data, k.data, v.data)
            dq, dkk, dv = nm.attention_backward(dummy, q.data, k.data, v.data)
            store.accumulate("q", dq * corruption("attention"))
            store.accumulate("k", dkk)
            store.accumulate("v", dv)
            return float((out * dummy).sum())

        return nm.grad_check(f, store)

    cases.append(("attention", case_attention))

    def case_lora():
        rng = np.random.default_rng(4)
        store = nm.ParameterStore()
        layer = LoRALayer(
            w=nm.Tensor(rng.normal(size=(6, 4))),
            a=store.add("a", rng.normal(size=(3, 6))),
            b=store.add("b", rng.normal(size=(4, 3))),
            scaling=2.0,
        )
        x = rng.normal(size=(4, 6))
        dummy = rng.normal(size=(4, 4))

        def f():
            y = lora_forward(x, layer)
            _, da, db = lora_backward(dummy, x, layer)
            store.accumulate("a", da * corruption("lora"))
            store.accumulate("b", db)
            return float((y * dummy).sum())

        return nm.grad_check(f, store)

    cases.append(("lora", case_lora))

    def case_qformer_block():
        from .model import QFormerConfig, _qformer_apply, init_qformer

        rng = np.random.default_rng(5)
        qcfg = QFormerConfig(window_len_frames=3, queries_per_window=2, d_model=8,
                             n_layers=1, n_heads=2)
        store = nm.ParameterStore()
        init_qformer(store, qcfg, d_in=6, seed=6)
        fused = rng.normal(size=(7, 6))
        dummy = rng.normal(size=(6, 8))

        def f():
            out, bwd = _qformer_apply(store, qcfg, fused)
            bwd(dummy * corruption("qformer_block"))
            return float((out * dummy).sum())

        return nm.grad_check(f, store)

    cases.append(("qformer_block", case_qformer_block))

    def case_full_model():
        from .datakit import SynthSpec, synth_generate
        from .textkit import Vocab

        # windows span token boundaries and noise keeps frames distinct, so
        # every attention weight carries a measurably nonzero gradient
        spec = SynthSpec(seed=8, vocab_size=6, sentence_length_range=(2, 3),
                         frames_per_token=2, feature_dim=5, noise_std=1.0)
        vocab = Vocab(sorted(spec.source_tokens()))
        cfg = ModelConfig(
            encoder=EncoderConfig(feature_dim_in=5, d_model=6, n_layers=1, seed=8, hop=1),
            qformer=QFormerConfig(window_len_frames=4, queries_per_window=2, d_model=8,
                                  n_layers=1, n_heads=2),
            decoder=DecoderConfig(vocab_size=len(vocab), d_model=8, n_layers=2,
                                  n_heads=2, max_seq_len=64, seed=9),
            lora=LoRAConfig(rank=2, alpha=8.0, init_seed=10),
        )
        model = BridgeModel.build(cfg, vocab, connector_seed=11)
        model.store.set_trainable("speech_encoder.*", True)
        records = synth_generate(spec, 2)
        examples = [(r.features, model.target_ids(r.translation)) for r in records]

        def f():
            total = 0.0
            for feats, targets in examples:
                total += model.example_loss(feats, targets, backward=True,
                                            scale=corruption("full_model") / len(examples))
            return total / len(examples)

        return nm.grad_check(f, model.store)

    cases.append(("full_model", case_full_model))
    return cases


def cmd_grad_check(cfg: dict, threads: int = 1) -> int:
    _check_keys(cfg, ["run_id", "out_dir", "seed", "corrupt"], "grad-check config")
    seed = _resolve_seed(cfg)
    out = _run_dir(cfg, "grad-check", seed)
    corrupt = cfg.get("corrupt")
    known = [name for name, _ in _grad_check_cases(None)]
    if corrupt is not None and corrupt not in known:
        raise ConfigError(f"corrupt target {corrupt!r} not one of {known}")
    rows = []
    worst = 0.0
    for name, runner in _grad_check_cases(corrupt):
        err = float(runner())
        ok = err <= GRAD_CHECK_TOLERANCE
        worst = max(worst, err)
        rows.append({"layer": name, "max_rel_err": err, "pass": ok})
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e}")
    payload = {"tolerance": GRAD_CHECK_TOLERANCE, "rows": rows}
    (out / "grad_check.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_resolved_config(out, {
        "command": "grad-check", "run_id": out.name, "out_dir": str(out.parent),
        "seed": seed, "corrupt": corrupt,
    })
    return 0 if all(r["pass"] for r in rows) else 2


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "cot-eval": cmd_cot_eval,
    "lr-dump": cmd_lr_dump,
    "grad-check": cmd_grad_check,
}


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_override(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {part!r} is not an object")
    node[parts[-1]] = value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgest",
        description="Desk-scale speech-translation pipeline: synthesize data, "
                    "train the bridged model, evaluate BLEU and structured "
                    "responses, dump the LR schedule, run gradient checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="dotted-path config override")
        p.add_argument("--threads", type=int, default=1,
                       help="evaluation parallelism (results stay ordered)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg: dict = {}
        if args.config:
            try:
                cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {args.config}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
            if not isinstance(cfg, dict):
                raise ConfigError(f"{args.config}: top level must be an object")
        for item in args.overrides:
            key, value = _parse_override(item)
            _apply_override(cfg, key, value)
        return COMMANDS[args.command](cfg, threads=args.threads)
    except BridgestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, IndexError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
