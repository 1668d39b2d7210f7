"""Training procedure: warmup+cosine LR schedule, per-stage freeze
policies (with optional first-epoch encoder unfreezing), gradient
accumulation with mean-loss semantics, the short/long two-stage
curriculum with dev-BLEU checkpoint selection, and versioned checkpoints.

Data order is derived statelessly from (seed, stage, epoch), so the tuple
(seed, stage, epoch, batch_index) stored in a checkpoint is the complete
RNG state and mid-stage resume replays the exact remaining schedule.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .datakit import Bucket, UtteranceRecord, decode_array, encode_array
from .errors import CheckpointError, ConfigError, NumericError
from .model import (
    BridgeModel,
    DecoderConfig,
    EncoderConfig,
    LoRAConfig,
    ModelConfig,
    QFormerConfig,
)
from .textkit import Vocab, bleu_corpus, format_cot_target, tokenize

CHECKPOINT_VERSION = 1
STAGE_INDEX = {"short": 0, "long": 1, "single": 0}


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass
class ScheduleConfig:
    total_steps: int
    warmup_steps: int = 3000
    lr_base: float = 1e-6
    lr_peak: float = 3e-5
    lr_min: float = 1e-5
    n_cycles: int = 1

    def __post_init__(self):
        if not (self.lr_base < self.lr_min < self.lr_peak):
            raise ConfigError(
                f"need lr_base < lr_min < lr_peak, got {self.lr_base}, {self.lr_min}, {self.lr_peak}"
            )
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )
        if self.n_cycles < 1:
            raise ConfigError(f"n_cycles must be >= 1, got {self.n_cycles}")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to the peak, then half-cosine arcs down to the minimum.

    Each cycle restarts at the peak; the final arc lands exactly on lr_min
    at total_steps. Continuous at the warmup boundary.
    """
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * (step / cfg.warmup_steps)
    span = cfg.total_steps - cfg.warmup_steps
    x = (step - cfg.warmup_steps) / span * cfg.n_cycles
    cycle = min(int(x), cfg.n_cycles - 1)
    frac = x - cycle
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# freeze policy and profiles
# ---------------------------------------------------------------------------


@dataclass
class FreezePolicy:
    trainable_patterns: tuple[str, ...] = ("qformer.*", "*.lora.*")
    speech_encoder_trainable_first_epoch: bool = False


def apply_freeze_policy(store: nm.ParameterStore, policy: FreezePolicy, epoch: int) -> None:
    """Reset trainable flags for this epoch; unknown group patterns are config errors."""
    for name in store.names():
        store.set_trainable(name, False)
    for pattern in policy.trainable_patterns:
        store.set_trainable(pattern, True)
    if policy.speech_encoder_trainable_first_epoch and epoch == 0:
        store.set_trainable("speech_encoder.*", True)


@dataclass
class TrainProfile:
    direction: str = "en-xx"
    batch_size: int = 4
    grad_accum_steps: int = 1
    epochs_per_stage: int = 2
    seed: int = 0
    cot_targets: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.epochs_per_stage < 1:
            raise ConfigError(f"profile counts must be >= 1: {self}")


@dataclass
class TrainState:
    stage: str = "short"
    global_step: int = 0
    epoch: int = 0
    batch_index: int = 0
    best_dev_bleu: Optional[float] = None
    seed: int = 0


def training_target_text(record: UtteranceRecord, cot: bool) -> str:
    if cot:
        return format_cot_target(record.transcript, record.translation)
    return record.translation


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def iter_step_batches(records: Sequence[UtteranceRecord], profile: TrainProfile,
                      stage: str, epoch: int, start_batch: int = 0):
    """Deterministic per-epoch order; yields (batch_index, records) per optimizer step."""
    rng = np.random.default_rng(
        np.random.SeedSequence([profile.seed, STAGE_INDEX[stage], epoch]))
    order = rng.permutation(len(records))
    step_size = profile.batch_size * profile.grad_accum_steps
    n_batches = -(-len(records) // step_size)
    for bi in range(start_batch, n_batches):
        idx = order[bi * step_size:(bi + 1) * step_size]
        yield bi, [records[j] for j in idx]


def train_step(model: BridgeModel, batch: Sequence[UtteranceRecord], state: TrainState,
               profile: TrainProfile, schedule: ScheduleConfig) -> dict:
    """One optimizer update from grad_accum_steps micro-batches.

    Per-micro mean losses are averaged across micro-batches, so an
    accumulated update equals the update from one fused batch of the same
    examples. A step counts parameter updates, not micro-batches.
    """
    if not batch:
        raise ConfigError("train_step: empty batch")
    micro = [list(batch[i:i + profile.batch_size])
             for i in range(0, len(batch), profile.batch_size)]
    n_micro = len(micro)
    micro_losses = []
    for mb in micro:
        mb_loss = 0.0
        for rec in mb:
            targets = model.target_ids(training_target_text(rec, profile.cot_targets))
            loss = model.example_loss(rec.features, targets, backward=True,
                                      scale=1.0 / (n_micro * len(mb)))
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at step {state.global_step}, utterance {rec.id!r}")
            mb_loss += loss
        micro_losses.append(mb_loss / len(mb))
    mean_loss = sum(micro_losses) / n_micro
    lr = lr_at(min(state.global_step, schedule.total_steps), schedule)
    nm.adam_step(model.store, lr)
    state.global_step += 1
    return {"loss": mean_loss, "lr": lr, "step": state.global_step}


def evaluate_dev(model: BridgeModel, dev: Sequence[UtteranceRecord],
                 max_new_tokens: int = 24, cot: bool = False) -> float:
    """Greedy generations scored with corpus BLEU against the training targets."""
    if not dev:
        raise ConfigError("evaluate_dev: empty dev set")
    hyps, refs = [], []
    for rec in dev:
        hyps.append(tokenize(model.generate_text(rec.features, max_new_tokens)))
        refs.append(tokenize(training_target_text(rec, cot)))
    return bleu_corpus(hyps, refs).score


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["lora"]["targets"] = list(cfg.lora.targets)
    return d


def _model_config_from_dict(d: dict) -> ModelConfig:
    try:
        enc = EncoderConfig(**d["encoder"])
        qf = QFormerConfig(**d["qformer"])
        dec = DecoderConfig(**d["decoder"])
        lora_d = dict(d["lora"])
        lora_d["targets"] = tuple(lora_d.get("targets", ()))
        lora = LoRAConfig(**lora_d)
        ae = d.get("audio_encoder")
        audio = EncoderConfig(**ae) if ae else None
        return ModelConfig(encoder=enc, qformer=qf, decoder=dec, lora=lora,
                           audio_encoder=audio, prompt=d.get("prompt", ""))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bad model_config block: {exc}") from exc


def save_checkpoint(path, model: BridgeModel, state: TrainState | None = None) -> None:
    """Write a versioned, byte-stable container: configs, parameters with
    trainable flags, optimizer state, and the training cursor."""
    params = {}
    for name, t in model.store.items():
        entry = encode_array(t.data)
        entry["trainable"] = model.store.is_trainable(name)
        params[name] = entry
    opt = {}
    for name, st in sorted(model.store.opt_state.items()):
        opt[name] = {"m": encode_array(st.m), "v": encode_array(st.v), "t": st.t}
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": _model_config_to_dict(model.cfg),
        "vocab_tokens": model.vocab.id_to_token[4:],
        "params": params,
        "opt_state": opt,
        "train_state": asdict(state) if state is not None else None,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path) -> tuple[BridgeModel, Optional[TrainState]]:
    """Rebuild the exact saved model; corruption or version drift is a load error."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path}: checkpoint is not an object")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {version!r} unsupported (expected {CHECKPOINT_VERSION})")
    for field_name in ("model_config", "vocab_tokens", "params", "opt_state"):
        if field_name not in payload:
            raise CheckpointError(f"{path}: missing field {field_name!r}")
    cfg = _model_config_from_dict(payload["model_config"])
    vocab = Vocab(payload["vocab_tokens"])
    store = nm.ParameterStore()
    for name in sorted(payload["params"]):
        entry = payload["params"][name]
        store.add(name, decode_array(entry, name), trainable=bool(entry["trainable"]))
    for name in sorted(payload["opt_state"]):
        entry = payload["opt_state"][name]
        if name not in store or not store.is_trainable(name):
            raise CheckpointError(f"{path}: optimizer state for non-trainable {name!r}")
        store.opt_state[name] = nm.AdamState(
            m=decode_array(entry["m"], f"{name}.m"),
            v=decode_array(entry["v"], f"{name}.v"),
            t=int(entry["t"]),
        )
    model = BridgeModel(cfg, vocab, store)
    st = payload.get("train_state")
    state = TrainState(**st) if st else None
    return model, state


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------


@dataclass
class StageRecord:
    stage: str
    best_dev_bleu: float
    best_step: int
    best_path: str
    init_path: Optional[str] = None


@dataclass
class CurriculumResult:
    model: BridgeModel
    state: TrainState
    log_rows: list[dict]
    stages: list[StageRecord]
    best_path: str
    final_path: str


def _run_stage(model: BridgeModel, stage: str, records, dev, profile, schedule,
               policy, state: TrainState, log_rows: list, ckpt_dir: Path,
               max_new_tokens: int) -> StageRecord:
    state.stage = stage
    best_bleu, best_step, best_path = None, None, None
    for epoch in range(profile.epochs_per_stage):
        state.epoch = epoch
        apply_freeze_policy(model.store, policy, epoch)
        for bi, batch in iter_step_batches(records, profile, stage, epoch,
                                           state.batch_index):
            metrics = train_step(model, batch, state, profile, schedule)
            state.batch_index = bi + 1
            log_rows.append({
                "stage": stage,
                "step": metrics["step"],
                "epoch": epoch,
                "lr": metrics["lr"],
                "loss": metrics["loss"],
            })
        state.batch_index = 0
        bleu = evaluate_dev(model, dev, max_new_tokens, cot=profile.cot_targets)
        state.best_dev_bleu = bleu if state.best_dev_bleu is None else max(
            state.best_dev_bleu, bleu)
        log_rows.append({
            "stage": stage,
            "step": state.global_step,
            "epoch": epoch,
            "lr": lr_at(min(state.global_step, schedule.total_steps), schedule),
            "loss": None,
            "dev_bleu": bleu,
        })
        if best_bleu is None or bleu > best_bleu:  # strict: ties keep the earliest
            best_bleu, best_step = bleu, state.global_step
            best_path = ckpt_dir / f"best_{stage}.ckpt"
            save_checkpoint(best_path, model, state)
    return StageRecord(stage=stage, best_dev_bleu=best_bleu, best_step=best_step,
                       best_path=str(best_path))


def run_curriculum(model: BridgeModel, short: Bucket, long: Bucket,
                   dev: Sequence[UtteranceRecord], profile: TrainProfile,
                   schedule: ScheduleConfig, policy: FreezePolicy, ckpt_dir,
                   max_new_tokens: int = 24,
                   reset_optimizer_between_stages: bool = True) -> CurriculumResult:
    """Stage 1 on short utterances; its best-dev checkpoint seeds stage 2 on
    long utterances. An empty long bucket skips stage 2."""
    if len(short) == 0:
        raise ConfigError("run_curriculum: short bucket is empty")
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_rows: list[dict] = []
    state = TrainState(stage="short", seed=profile.seed)
    stages = [_run_stage(model, "short", short.records, dev, profile, schedule,
                         policy, state, log_rows, ckpt_dir, max_new_tokens)]
    if len(long) > 0:
        model, best_state = load_checkpoint(stages[0].best_path)
        if reset_optimizer_between_stages:
            model.store.opt_state.clear()
        init_path = ckpt_dir / "init_long.ckpt"
        state = TrainState(stage="long", global_step=best_state.global_step,
                           best_dev_bleu=best_state.best_dev_bleu, seed=profile.seed)
        save_checkpoint(init_path, model, state)
        rec = _run_stage(model, "long", long.records, dev, profile, schedule,
                         policy, state, log_rows, ckpt_dir, max_new_tokens)
        rec.init_path = str(init_path)
        stages.append(rec)
    final_path = ckpt_dir / "final.ckpt"
    save_checkpoint(final_path, model, state)
    return CurriculumResult(model=model, state=state, log_rows=log_rows, stages=stages,
                            best_path=stages[-1].best_path, final_path=str(final_path))


def write_stage_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")
