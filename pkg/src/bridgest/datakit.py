"""Manifest ingestion, audio-segment arithmetic, transcript-length
bucketing, dataset statistics, and a seeded synthetic corpus that stands
in for the real bilingual speech data."""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import CheckpointError, ConfigError, ManifestError, ValidationError

AudioSource = Union[str, np.ndarray]

MANIFEST_FIELDS = (
    "id",
    "audio_source",
    "offset_s",
    "duration_s",
    "transcript",
    "translation",
    "direction",
)

FRAME_SECONDS = 0.02  # synthetic feature frame hop


@dataclass
class UtteranceRecord:
    """One (audio segment, transcript, translation, direction) example."""

    id: str
    audio_source: AudioSource
    offset_s: float
    duration_s: float
    transcript: str
    translation: str
    direction: str

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise ValidationError(f"record {self.id!r}: duration_s must be > 0")
        if self.offset_s < 0:
            raise ValidationError(f"record {self.id!r}: offset_s must be >= 0")
        if not self.transcript.strip():
            raise ValidationError(f"record {self.id!r}: transcript is empty")
        if not self.translation.strip():
            raise ValidationError(f"record {self.id!r}: translation is empty")

    @property
    def features(self) -> np.ndarray:
        if not isinstance(self.audio_source, np.ndarray):
            raise ValidationError(
                f"record {self.id!r}: audio_source is a file reference, not inline features"
            )
        return self.audio_source

    def to_json_dict(self) -> dict:
        src = self.audio_source
        if isinstance(src, np.ndarray):
            src = [[float(v) for v in row] for row in src]
        return {
            "id": self.id,
            "audio_source": src,
            "offset_s": self.offset_s,
            "duration_s": self.duration_s,
            "transcript": self.transcript,
            "translation": self.translation,
            "direction": self.direction,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "UtteranceRecord":
        if not isinstance(obj, dict):
            raise ValidationError(f"manifest entry must be an object, got {type(obj).__name__}")
        unknown = set(obj) - set(MANIFEST_FIELDS)
        if unknown:
            raise ValidationError(f"unknown manifest field(s): {sorted(unknown)}")
        missing = set(MANIFEST_FIELDS) - set(obj)
        if missing:
            raise ValidationError(f"missing manifest field(s): {sorted(missing)}")
        src = obj["audio_source"]
        if isinstance(src, list):
            src = np.asarray(src, dtype=np.float64)
            if src.ndim != 2:
                raise ValidationError(
                    f"record {obj['id']!r}: inline features must be 2-D (frames x dim)"
                )
        elif not isinstance(src, str):
            raise ValidationError(f"record {obj['id']!r}: audio_source must be a path or matrix")
        rec = cls(
            id=str(obj["id"]),
            audio_source=src,
            offset_s=float(obj["offset_s"]),
            duration_s=float(obj["duration_s"]),
            transcript=str(obj["transcript"]),
            translation=str(obj["translation"]),
            direction=str(obj["direction"]),
        )
        rec.validate()
        return rec


def load_manifest(path) -> list[UtteranceRecord]:
    """Read a JSONL manifest, one record per line, reporting bad lines by number."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from exc
            try:
                records.append(UtteranceRecord.from_json_dict(obj))
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    return records


def save_manifest(path, records: Sequence[UtteranceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json_dict(), ensure_ascii=False, sort_keys=True))
            f.write("\n")


def extract_segment(
    offset_s: float,
    duration_s: float,
    sample_rate: int,
    total_samples: int | None = None,
) -> tuple[int, int]:
    """Half-open sample range [start, end) for a timed segment.

    start = round(offset * rate), end = round((offset + duration) * rate),
    with round-half-up so the mapping is monotone in both arguments.
    """
    if sample_rate <= 0:
        raise ConfigError(f"sample_rate must be > 0, got {sample_rate}")
    if offset_s < 0 or duration_s <= 0:
        raise ValidationError(f"invalid segment (offset={offset_s}, duration={duration_s})")
    start = math.floor(offset_s * sample_rate + 0.5)
    end = math.floor((offset_s + duration_s) * sample_rate + 0.5)
    if end <= start:
        raise ValidationError(
            f"segment rounds to an empty sample range [{start}, {end}) at rate {sample_rate}"
        )
    if total_samples is not None and end > total_samples:
        raise ValidationError(
            f"segment [{start}, {end}) exceeds source length {total_samples}"
        )
    return start, end


@dataclass
class Bucket:
    label: str  # "short" | "long"
    records: list[UtteranceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def split_by_transcript_length(
    records: Sequence[UtteranceRecord], threshold_chars: int = 400
) -> tuple[Bucket, Bucket]:
    """Partition by transcript character count (Unicode scalars).

    Counts strictly below the threshold go to short; the threshold itself
    and above go to long. Relative order is preserved in both buckets.
    """
    short = Bucket("short")
    long = Bucket("long")
    for rec in records:
        (short if len(rec.transcript) < threshold_chars else long).records.append(rec)
    return short, long


# ---------------------------------------------------------------------------
# binary-in-json array serialization (checkpoints, feature stores)
# ---------------------------------------------------------------------------


def encode_array(arr: np.ndarray) -> dict:
    """Little-endian base64 payload with shape and dtype, byte-stable."""
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {
        "shape": list(arr.shape),
        "dtype": "<" + arr.dtype.str.lstrip("<>=|"),
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def decode_array(obj: dict, field_name: str) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"].encode("ascii"))
        arr = np.frombuffer(raw, dtype=np.dtype(obj["dtype"]))
        return arr.reshape(obj["shape"]).astype(arr.dtype.newbyteorder("="), copy=True)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"bad tensor field {field_name!r}: {exc}") from exc


FEATURE_STORE_VERSION = 1


def save_feature_store(path, records: Sequence[UtteranceRecord]) -> None:
    """Sidecar file holding inline features keyed by record id."""
    feats = {}
    for rec in records:
        feats[rec.id] = encode_array(rec.features)
    payload = {"format_version": FEATURE_STORE_VERSION, "features": feats}
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")),
                          encoding="utf-8")


def load_feature_store(path) -> dict[str, np.ndarray]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt feature store ({exc})") from exc
    if payload.get("format_version") != FEATURE_STORE_VERSION:
        raise CheckpointError(f"{path}: unsupported feature store version")
    return {k: decode_array(v, k) for k, v in payload["features"].items()}


def attach_features(records: Sequence[UtteranceRecord],
                    features: Mapping[str, np.ndarray]) -> None:
    """Resolve file-reference audio sources against a loaded feature store."""
    for rec in records:
        if isinstance(rec.audio_source, str):
            if rec.id not in features:
                raise ValidationError(f"record {rec.id!r}: no features in store")
            rec.audio_source = features[rec.id]


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

SPLIT_ORDER = ("train", "dev", "test")


@dataclass
class StatsReport:
    """Speech hours per (direction, split), one decimal, plus a Total column."""

    rows: list[dict]

    def to_json_dict(self) -> dict:
        return {"columns": ["Direction", "Train", "Dev", "Test", "Total"], "rows": self.rows}

    def render(self) -> str:
        header = ["Direction", "Train", "Dev", "Test", "Total"]
        table = [header]
        for row in self.rows:
            table.append(
                [row["direction"]]
                + [f"{row[s]:.1f}" for s in SPLIT_ORDER]
                + [f"{row['total']:.1f}"]
            )
        widths = [max(len(r[i]) for r in table) for i in range(len(header))]
        lines = []
        for r in table:
            lines.append("  ".join(cell.rjust(w) if i else cell.ljust(w)
                                    for i, (cell, w) in enumerate(zip(r, widths))))
        return "\n".join(lines)


def dataset_stats(records_by_split: Mapping[str, Sequence[UtteranceRecord]]) -> StatsReport:
    """Total speech hours per (direction, split) in the standard table layout."""
    unknown = set(records_by_split) - set(SPLIT_ORDER)
    if unknown:
        raise ConfigError(f"unknown split name(s): {sorted(unknown)}; expected {SPLIT_ORDER}")
    directions: list[str] = []
    for split in SPLIT_ORDER:
        for rec in records_by_split.get(split, ()):
            if rec.direction not in directions:
                directions.append(rec.direction)
    rows = []
    for direction in directions:
        row: dict = {"direction": direction}
        total = 0.0
        for split in SPLIT_ORDER:
            secs = sum(
                r.duration_s for r in records_by_split.get(split, ()) if r.direction == direction
            )
            hours = round(secs / 3600.0, 1)
            row[split] = hours
            total += secs
        row["total"] = round(total / 3600.0, 1)
        rows.append(row)
    return StatsReport(rows=rows)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Seeded token-mapping corpus: each source token owns a feature-space
    codebook row; the translation applies a bijective token map."""

    seed: int
    vocab_size: int = 50
    sentence_length_range: tuple[int, int] = (3, 8)
    mapping_rule: Union[str, Mapping[str, str]] = "shift:1"
    frames_per_token: int = 4
    feature_dim: int = 8
    noise_std: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        lo, hi = self.sentence_length_range
        if lo < 1 or lo > hi:
            raise ConfigError(f"bad sentence_length_range {self.sentence_length_range}")
        if self.frames_per_token < 1 or self.feature_dim < 1:
            raise ConfigError("frames_per_token and feature_dim must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    def source_tokens(self) -> list[str]:
        return [f"w{j:02d}" for j in range(self.vocab_size)]

    def resolve_mapping(self) -> dict[str, str]:
        tokens = self.source_tokens()
        rule = self.mapping_rule
        if isinstance(rule, str):
            if rule == "identity":
                mapping = {t: t for t in tokens}
            elif rule.startswith("shift:"):
                k = int(rule.split(":", 1)[1])
                mapping = {tokens[j]: tokens[(j + k) % len(tokens)] for j in range(len(tokens))}
            else:
                raise ConfigError(f"unknown mapping rule {rule!r}")
        else:
            mapping = dict(rule)
        if set(mapping) != set(tokens) or set(mapping.values()) != set(tokens):
            raise ConfigError("mapping_rule must be a bijection on the source vocabulary")
        return mapping


_CODEBOOK_TAG = 0x636F6465  # distinct stream for the shared token codebook


def synth_codebook(spec: SynthSpec) -> np.ndarray:
    """Fixed per-token feature rows, (vocab_size, feature_dim)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _CODEBOOK_TAG]))
    return rng.normal(size=(spec.vocab_size, spec.feature_dim))


def synth_generate(
    spec: SynthSpec,
    n: int,
    direction: str = "en-xx",
    id_prefix: str = "utt",
    start_index: int = 0,
) -> list[UtteranceRecord]:
    """Generate n records with inline features, deterministic given the seed.

    Record i draws from its own stream derived from (seed, start_index + i),
    so prefixes agree across different n and records can be generated in any
    order or split across calls via start_index.
    """
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    tokens = spec.source_tokens()
    mapping = spec.resolve_mapping()
    codebook = synth_codebook(spec)
    lo, hi = spec.sentence_length_range
    records = []
    for i in range(n):
        idx = start_index + i
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, idx]))
        length = int(rng.integers(lo, hi + 1))
        token_ids = rng.integers(0, spec.vocab_size, size=length)
        src = [tokens[t] for t in token_ids]
        tgt = [mapping[t] for t in src]
        frames = np.repeat(codebook[token_ids], spec.frames_per_token, axis=0)
        frames = frames + rng.normal(0.0, 1.0, size=frames.shape) * spec.noise_std
        records.append(
            UtteranceRecord(
                id=f"{id_prefix}-{idx:06d}",
                audio_source=frames,
                offset_s=0.0,
                duration_s=frames.shape[0] * FRAME_SECONDS,
                transcript=" ".join(src),
                translation=" ".join(tgt),
                direction=direction,
            )
        )
    return records
