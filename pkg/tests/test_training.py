"""Schedule anchors, freeze policies, accumulation semantics, checkpoints,
and the two-stage curriculum."""

import json
import math

import numpy as np
import pytest

from bridgest import datakit as dk
from bridgest import training as tr
from bridgest.errors import CheckpointError, ConfigError, NumericError
from conftest import build_model, tiny_spec


def sched(total=10000, **kw):
    return tr.ScheduleConfig(total_steps=total, **kw)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_lr_anchors_exact():
    cfg = sched()
    assert abs(tr.lr_at(0, cfg) - 1e-6) / 1e-6 < 1e-12
    assert abs(tr.lr_at(3000, cfg) - 3e-5) / 3e-5 < 1e-12
    assert abs(tr.lr_at(10000, cfg) - 1e-5) / 1e-5 < 1e-12
    assert abs(tr.lr_at(1500, cfg) - 1.55e-5) / 1.55e-5 < 1e-12


def test_lr_continuous_at_warmup_boundary():
    cfg = sched()
    left = tr.lr_at(3000, cfg)
    right = tr.lr_at(3001, cfg)
    assert abs(left - 3e-5) / 3e-5 < 1e-12
    assert abs(right - left) < 1e-8  # one-step drop of a smooth cosine


def test_lr_warmup_monotone_and_postwarmup_bounded():
    cfg = sched()
    prev = -1.0
    for step in range(0, 3001, 50):
        lr = tr.lr_at(step, cfg)
        assert lr >= prev
        prev = lr
    for step in range(3000, 10001, 25):
        lr = tr.lr_at(step, cfg)
        assert 1e-5 - 1e-18 <= lr <= 3e-5 + 1e-18


def test_lr_single_cycle_monotone_nonincreasing():
    cfg = sched()
    prev = tr.lr_at(3000, cfg)
    for step in range(3001, 10001, 7):
        lr = tr.lr_at(step, cfg)
        assert lr <= prev + 1e-18
        prev = lr


def test_lr_multi_cycle_restarts():
    cfg = sched(total=9000, warmup_steps=1000, n_cycles=2)
    # cycle boundary at 5000: end of arc 1 reaches lr_min, arc 2 restarts at peak
    assert abs(tr.lr_at(5000, cfg) - cfg.lr_peak) / cfg.lr_peak < 1e-9
    just_before = tr.lr_at(4999, cfg)
    assert just_before < 1.01e-5
    assert abs(tr.lr_at(9000, cfg) - cfg.lr_min) / cfg.lr_min < 1e-12
    for step in range(1000, 9001, 13):
        assert tr.lr_at(step, cfg) <= cfg.lr_peak + 1e-18


def test_lr_out_of_range():
    cfg = sched()
    with pytest.raises(ValueError):
        tr.lr_at(-1, cfg)
    with pytest.raises(ValueError):
        tr.lr_at(10001, cfg)


def test_schedule_config_validation():
    with pytest.raises(ConfigError):
        tr.ScheduleConfig(total_steps=100, warmup_steps=100)
    with pytest.raises(ConfigError):
        tr.ScheduleConfig(total_steps=100, lr_base=1e-5, lr_min=1e-6, lr_peak=3e-5)
    with pytest.raises(ConfigError):
        tr.ScheduleConfig(total_steps=100, n_cycles=0)


# ---------------------------------------------------------------------------
# freeze policy
# ---------------------------------------------------------------------------


def test_default_policy_trains_connector_and_adapters_only(tiny_setup):
    _, model, _, _ = tiny_setup
    tr.apply_freeze_policy(model.store, tr.FreezePolicy(), epoch=0)
    trainable = model.store.trainable_names()
    assert trainable
    assert all(n.startswith("qformer.") or ".lora." in n for n in trainable)


def test_first_epoch_encoder_unfreeze(tiny_setup):
    _, model, _, _ = tiny_setup
    policy = tr.FreezePolicy(speech_encoder_trainable_first_epoch=True)
    tr.apply_freeze_policy(model.store, policy, epoch=0)
    assert any(n.startswith("speech_encoder.") for n in model.store.trainable_names())
    tr.apply_freeze_policy(model.store, policy, epoch=1)
    assert not any(n.startswith("speech_encoder.") for n in model.store.trainable_names())


def test_unknown_group_pattern_is_config_error(tiny_setup):
    _, model, _, _ = tiny_setup
    policy = tr.FreezePolicy(trainable_patterns=("qformer.*", "no_such_group.*"))
    with pytest.raises(ConfigError):
        tr.apply_freeze_policy(model.store, policy, epoch=0)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def test_train_step_counts_updates_not_microbatches(tiny_setup):
    _, model, train, _ = tiny_setup
    profile = tr.TrainProfile(batch_size=1, grad_accum_steps=4, seed=0)
    state = tr.TrainState(seed=0)
    metrics = tr.train_step(model, train[:4], state, profile, sched(total=100, warmup_steps=10))
    assert state.global_step == 1
    assert metrics["step"] == 1
    assert math.isfinite(metrics["loss"])
    # all per-update gradients were consumed by exactly one adam update
    assert all(model.store[n].grad is None for n in model.store.trainable_names())


def test_accumulated_update_equals_fused_batch():
    spec = tiny_spec(seed=3)
    records = dk.synth_generate(spec, 4)
    m_accum = build_model(spec, seed=5)
    m_fused = build_model(spec, seed=5)
    schedule = sched(total=100, warmup_steps=10, lr_base=1e-4, lr_min=2e-4, lr_peak=1e-3)
    tr.train_step(m_accum, records, tr.TrainState(), tr.TrainProfile(batch_size=1, grad_accum_steps=4), schedule)
    tr.train_step(m_fused, records, tr.TrainState(), tr.TrainProfile(batch_size=4, grad_accum_steps=1), schedule)
    worst = max(
        np.max(np.abs(m_accum.store[n].data - m_fused.store[n].data))
        for n in m_accum.store.names()
    )
    assert worst <= 1e-9


def test_frozen_params_bit_identical_after_steps(tiny_setup):
    _, model, train, _ = tiny_setup
    profile = tr.TrainProfile(batch_size=2, grad_accum_steps=1, seed=0)
    schedule = sched(total=100, warmup_steps=10, lr_base=1e-4, lr_min=2e-4, lr_peak=1e-3)
    tr.apply_freeze_policy(model.store, tr.FreezePolicy(), epoch=0)
    frozen_before = {
        n: model.store[n].data.tobytes()
        for n in model.store.names() if not model.store.is_trainable(n)
    }
    state = tr.TrainState()
    for bi, batch in tr.iter_step_batches(train, profile, "short", 0):
        tr.train_step(model, batch, state, profile, schedule)
    for n, blob in frozen_before.items():
        assert model.store[n].data.tobytes() == blob


def test_nonfinite_loss_aborts_with_utterance_id(tiny_setup):
    _, model, train, _ = tiny_setup
    model.store["qformer.queries"].data[:] = np.nan
    profile = tr.TrainProfile(batch_size=1)
    with pytest.raises(NumericError, match=train[0].id):
        tr.train_step(model, train[:1], tr.TrainState(), profile, sched(total=10, warmup_steps=1))


def test_iter_step_batches_partitions_everything(tiny_setup):
    _, _, train, _ = tiny_setup
    profile = tr.TrainProfile(batch_size=3, grad_accum_steps=1, seed=1)
    seen = []
    for _, batch in tr.iter_step_batches(train, profile, "short", 0):
        seen.extend(r.id for r in batch)
    assert sorted(seen) == sorted(r.id for r in train)
    # same epoch twice -> same order; next epoch -> different permutation
    order_a = [r.id for _, b in tr.iter_step_batches(train, profile, "short", 0) for r in b]
    order_b = [r.id for _, b in tr.iter_step_batches(train, profile, "short", 0) for r in b]
    order_c = [r.id for _, b in tr.iter_step_batches(train, profile, "short", 1) for r in b]
    assert order_a == order_b
    assert order_a != order_c


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_evaluate_dev_deterministic_and_low_for_untrained(tiny_setup):
    _, model, _, dev = tiny_setup
    b1 = tr.evaluate_dev(model, dev, max_new_tokens=8)
    b2 = tr.evaluate_dev(model, dev, max_new_tokens=8)
    assert b1 == b2
    assert b1 < 5.0


def test_evaluate_dev_perfect_copy_scores_100(tiny_setup):
    _, _, _, dev = tiny_setup

    class Oracle:
        def generate_text(self, features, max_new_tokens):
            for rec in dev:
                if np.array_equal(rec.features, features):
                    return rec.translation
            raise AssertionError("unknown features")

    assert tr.evaluate_dev(Oracle(), dev, max_new_tokens=8) == 100.0


def test_evaluate_dev_empty_errors(tiny_setup):
    _, model, _, _ = tiny_setup
    with pytest.raises(ConfigError):
        tr.evaluate_dev(model, [], max_new_tokens=4)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tiny_setup, tmp_path):
    _, model, train, _ = tiny_setup
    profile = tr.TrainProfile(batch_size=2)
    schedule = sched(total=100, warmup_steps=10, lr_base=1e-4, lr_min=2e-4, lr_peak=1e-3)
    state = tr.TrainState(seed=7)
    tr.train_step(model, train[:2], state, profile, schedule)  # populate adam state
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(path, model, state)
    loaded, lstate = tr.load_checkpoint(path)
    assert loaded.store.names() == model.store.names()
    for n in model.store.names():
        assert loaded.store[n].data.tobytes() == model.store[n].data.tobytes()
        assert loaded.store.is_trainable(n) == model.store.is_trainable(n)
    assert sorted(loaded.store.opt_state) == sorted(model.store.opt_state)
    for n, st in model.store.opt_state.items():
        assert loaded.store.opt_state[n].m.tobytes() == st.m.tobytes()
        assert loaded.store.opt_state[n].v.tobytes() == st.v.tobytes()
        assert loaded.store.opt_state[n].t == st.t
    assert lstate == state
    # saving the loaded model reproduces the file byte for byte
    path2 = tmp_path / "m2.ckpt"
    tr.save_checkpoint(path2, loaded, lstate)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_truncated_file_errors(tiny_setup, tmp_path):
    _, model, _, _ = tiny_setup
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(path, model, tr.TrainState())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated|corrupt"):
        tr.load_checkpoint(path)


def test_checkpoint_version_mismatch(tiny_setup, tmp_path):
    _, model, _, _ = tiny_setup
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(path, model, None)
    payload = json.loads(path.read_text())
    payload["format_version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="format_version"):
        tr.load_checkpoint(path)


def test_resume_mid_stage_replays_identical_lr_and_params(tmp_path):
    spec = tiny_spec(seed=11)
    train = dk.synth_generate(spec, 8)
    profile = tr.TrainProfile(batch_size=2, seed=11)
    schedule = sched(total=50, warmup_steps=5, lr_base=1e-4, lr_min=2e-4, lr_peak=1e-3)

    # uninterrupted run over one epoch
    m_full = build_model(spec, seed=13)
    s_full = tr.TrainState(seed=11)
    lrs_full = []
    for bi, batch in tr.iter_step_batches(train, profile, "short", 0):
        lrs_full.append(tr.train_step(m_full, batch, s_full, profile, schedule)["lr"])
        s_full.batch_index = bi + 1

    # interrupted run: stop after 2 updates, checkpoint, resume
    m_half = build_model(spec, seed=13)
    s_half = tr.TrainState(seed=11)
    lrs_half = []
    for bi, batch in tr.iter_step_batches(train, profile, "short", 0):
        if bi == 2:
            break
        lrs_half.append(tr.train_step(m_half, batch, s_half, profile, schedule)["lr"])
        s_half.batch_index = bi + 1
    path = tmp_path / "resume.ckpt"
    tr.save_checkpoint(path, m_half, s_half)
    m_res, s_res = tr.load_checkpoint(path)
    for bi, batch in tr.iter_step_batches(train, profile, s_res.stage, s_res.epoch,
                                          s_res.batch_index):
        lrs_half.append(tr.train_step(m_res, batch, s_res, profile, schedule)["lr"])
        s_res.batch_index = bi + 1

    assert lrs_half == lrs_full
    for n in m_full.store.names():
        assert np.max(np.abs(m_res.store[n].data - m_full.store[n].data)) <= 1e-12


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------


def curriculum_setup(seed=0, n_short=6, n_long=4):
    spec = tiny_spec(seed=seed, lengths=(2, 5))
    records = dk.synth_generate(spec, n_short + n_long)
    dev = dk.synth_generate(spec, 3, start_index=500)
    # force a deterministic split: first n_short are "short", rest "long"
    short = dk.Bucket("short", records[:n_short])
    long = dk.Bucket("long", records[n_short:])
    model = build_model(spec, seed=seed + 1)
    profile = tr.TrainProfile(batch_size=2, epochs_per_stage=2, seed=seed)
    schedule = sched(total=200, warmup_steps=10, lr_base=1e-4, lr_min=2e-4, lr_peak=1e-3)
    return model, short, long, dev, profile, schedule


def test_curriculum_empty_long_is_single_stage(tmp_path):
    model, short, _, dev, profile, schedule = curriculum_setup()
    res = tr.run_curriculum(model, short, dk.Bucket("long"), dev, profile, schedule,
                            tr.FreezePolicy(), tmp_path, max_new_tokens=6)
    assert [s.stage for s in res.stages] == ["short"]
    assert res.best_path.endswith("best_short.ckpt")
    assert {row["stage"] for row in res.log_rows} == {"short"}


def test_curriculum_empty_short_is_config_error(tmp_path):
    model, _, long, dev, profile, schedule = curriculum_setup()
    with pytest.raises(ConfigError):
        tr.run_curriculum(model, dk.Bucket("short"), long, dev, profile, schedule,
                          tr.FreezePolicy(), tmp_path)


def test_curriculum_stage2_initializer_equals_stage1_best(tmp_path):
    model, short, long, dev, profile, schedule = curriculum_setup()
    res = tr.run_curriculum(model, short, long, dev, profile, schedule,
                            tr.FreezePolicy(), tmp_path, max_new_tokens=6)
    assert [s.stage for s in res.stages] == ["short", "long"]
    best_short, _ = tr.load_checkpoint(res.stages[0].best_path)
    init_long, _ = tr.load_checkpoint(res.stages[1].init_path)
    for n in best_short.store.names():
        assert init_long.store[n].data.tobytes() == best_short.store[n].data.tobytes()
    assert not init_long.store.opt_state  # optimizer moments reset between stages


def test_curriculum_tie_selects_earliest_checkpoint(tmp_path, monkeypatch):
    model, short, _, dev, profile, schedule = curriculum_setup()
    profile.epochs_per_stage = 3
    scores = iter([10.0, 12.0, 12.0])
    saved_steps = []
    real_save = tr.save_checkpoint

    def fake_eval(model, dev, max_new_tokens=24, cot=False):
        return next(scores)

    def spy_save(path, model, state=None):
        if str(path).endswith("best_short.ckpt"):
            saved_steps.append(state.global_step)
        return real_save(path, model, state)

    monkeypatch.setattr(tr, "evaluate_dev", fake_eval)
    monkeypatch.setattr(tr, "save_checkpoint", spy_save)
    res = tr.run_curriculum(model, short, dk.Bucket("long"), dev, profile, schedule,
                            tr.FreezePolicy(), tmp_path, max_new_tokens=6)
    # best saved at epochs 0 and 1; the tie at epoch 2 must NOT overwrite
    assert len(saved_steps) == 2
    assert res.stages[0].best_dev_bleu == 12.0
    _, best_state = tr.load_checkpoint(res.stages[0].best_path)
    assert best_state.global_step == saved_steps[-1]


def test_curriculum_seeded_rerun_identical(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    model_a, short, long, dev, profile, schedule = curriculum_setup(seed=2)
    res_a = tr.run_curriculum(model_a, short, long, dev, profile, schedule,
                              tr.FreezePolicy(), out_a, max_new_tokens=6)
    model_b, short, long, dev, profile, schedule = curriculum_setup(seed=2)
    res_b = tr.run_curriculum(model_b, short, long, dev, profile, schedule,
                              tr.FreezePolicy(), out_b, max_new_tokens=6)
    assert res_a.log_rows == res_b.log_rows
    for n in res_a.model.store.names():
        assert np.max(np.abs(res_a.model.store[n].data - res_b.model.store[n].data)) <= 1e-12


def test_curriculum_best_dev_bleu_running_max(tmp_path, monkeypatch):
    model, short, _, dev, profile, schedule = curriculum_setup()
    profile.epochs_per_stage = 3
    scores = iter([20.0, 8.0, 15.0])
    monkeypatch.setattr(tr, "evaluate_dev", lambda *a, **k: next(scores))
    res = tr.run_curriculum(model, short, dk.Bucket("long"), dev, profile, schedule,
                            tr.FreezePolicy(), tmp_path, max_new_tokens=6)
    assert res.state.best_dev_bleu == 20.0
    assert res.stages[0].best_dev_bleu == 20.0


def test_stage_log_rows_schema(tmp_path):
    model, short, _, dev, profile, schedule = curriculum_setup()
    res = tr.run_curriculum(model, short, dk.Bucket("long"), dev, profile, schedule,
                            tr.FreezePolicy(), tmp_path, max_new_tokens=6)
    step_rows = [r for r in res.log_rows if "dev_bleu" not in r]
    eval_rows = [r for r in res.log_rows if "dev_bleu" in r]
    assert step_rows and eval_rows
    for row in step_rows:
        assert set(row) == {"stage", "step", "epoch", "lr", "loss"}
    steps = [r["step"] for r in step_rows]
    assert steps == sorted(steps)
    log_path = tmp_path / "log.jsonl"
    tr.write_stage_log(log_path, res.log_rows)
    lines = log_path.read_text().strip().splitlines()
    assert len(lines) == len(res.log_rows)
    json.loads(lines[0])
