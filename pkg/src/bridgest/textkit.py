"""Tokenization, corpus BLEU, and the two-line transcription/translation
response format with a tolerant parser and its evaluation metrics."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .errors import ConfigError, FormatError

PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")

TRANSCRIPTION_MARKER = "Transcription:"
TRANSLATION_MARKER = "Translation:"


def tokenize(text: str) -> list[str]:
    """Split on Unicode whitespace, dropping empties."""
    return text.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocab:
    """Bijective token/id map with reserved specials at ids 0..3."""

    def __init__(self, corpus_tokens: Sequence[str]):
        for t in corpus_tokens:
            if t in SPECIAL_TOKENS:
                raise ConfigError(f"corpus token {t!r} collides with a reserved special")
        self.id_to_token: list[str] = list(SPECIAL_TOKENS) + list(corpus_tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("duplicate token in vocabulary")

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocab":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        ids = []
        for tok in tokenize(text):
            if tok not in self.token_to_id:
                raise ConfigError(f"token {tok!r} not in vocabulary")
            ids.append(self.token_to_id[tok])
        return ids

    def decode(self, ids: Sequence[int], skip_specials: bool = True) -> str:
        toks = []
        for i in ids:
            if skip_specials and i < len(SPECIAL_TOKENS):
                continue
            toks.append(self.id_to_token[i])
        return detokenize(toks)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class BleuReport:
    score: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_corpus(
    hyps: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    max_n: int = 4,
    smooth: bool = False,
) -> BleuReport:
    """Corpus-level BLEU with clipped counts pooled over all pairs.

    Single reference per hypothesis. Unsmoothed by default: any zero
    n-gram precision gives score 0. With smooth=True, zero match counts
    fall back to exponentially shrinking pseudo-counts.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"bleu_corpus: {len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("bleu_corpus: empty corpus")
    matches = [0] * max_n
    guesses = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hgrams = _ngrams(hyp, n)
            guesses[n - 1] += sum(hgrams.values())
            matches[n - 1] += sum((hgrams & _ngrams(ref, n)).values())
    precisions = []
    smooth_inv = 1.0
    for n in range(max_n):
        if guesses[n] == 0:
            precisions.append(0.0)
        elif matches[n] == 0 and smooth:
            smooth_inv *= 2.0
            precisions.append(1.0 / (smooth_inv * guesses[n]))
        else:
            precisions.append(matches[n] / guesses[n])
    if hyp_len == 0:
        bp = 1.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if hyp_len == 0 or any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n) * 100.0
    return BleuReport(
        score=score,
        precisions=tuple(precisions),
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
    )


# ---------------------------------------------------------------------------
# structured transcription-then-translation responses
# ---------------------------------------------------------------------------


@dataclass
class CoTResponse:
    raw: str
    status: str  # "parsed" | "malformed"
    transcription: Optional[str] = None
    translation: Optional[str] = None

    @property
    def parsed(self) -> bool:
        return self.status == "parsed"


def format_cot_target(transcription: str, translation: str) -> str:
    """Canonical two-line target: transcription first, then the translation.

    Rejects fields that contain either marker (case-insensitive), since the
    tolerant parser would otherwise latch onto the embedded marker and the
    round-trip guarantee would not hold.
    """
    transcription = transcription.strip()
    translation = translation.strip()
    for label, value in (("transcription", transcription), ("translation", translation)):
        if not value:
            raise FormatError(f"{label} is empty")
        lowered = value.lower()
        if TRANSCRIPTION_MARKER.lower() in lowered or TRANSLATION_MARKER.lower() in lowered:
            raise FormatError(f"{label} collides with a response marker")
    return f"{TRANSCRIPTION_MARKER} {transcription}\n{TRANSLATION_MARKER} {translation}"


_TRANSCRIPTION_RE = re.compile(re.escape(TRANSCRIPTION_MARKER), re.IGNORECASE)
_TRANSLATION_RE = re.compile(re.escape(TRANSLATION_MARKER), re.IGNORECASE)


def parse_cot_response(raw: str) -> CoTResponse:
    """Tolerant parse of arbitrary model output; never raises.

    Markers are matched case-insensitively anywhere in the text. The
    translation is taken from the last translation marker to the end; the
    transcription from the first transcription marker to the first
    translation marker after it. Anything missing or empty is malformed.
    """
    try:
        text = str(raw)
        ts_match = _TRANSCRIPTION_RE.search(text)
        tl_matches = list(_TRANSLATION_RE.finditer(text))
        if ts_match is None or not tl_matches:
            return CoTResponse(raw=text, status="malformed")
        tl_after = [m for m in tl_matches if m.start() >= ts_match.end()]
        if not tl_after:
            return CoTResponse(raw=text, status="malformed")
        transcription = text[ts_match.end() : tl_after[0].start()].strip()
        translation = text[tl_matches[-1].end() :].strip()
        if not transcription or not translation:
            return CoTResponse(raw=text, status="malformed")
        return CoTResponse(
            raw=text, status="parsed", transcription=transcription, translation=translation
        )
    except Exception:
        return CoTResponse(raw=str(raw), status="malformed")


@dataclass
class CoTMetrics:
    total: int
    parsed: int
    success_rate_pct: float
    bleu_parsed: Optional[float]
    bleu_baseline_subset: Optional[float]
    delta: Optional[float]


def cot_metrics(
    responses: Sequence[CoTResponse],
    refs: Sequence[str],
    baseline_hyps: Sequence[str],
) -> CoTMetrics:
    """Parse success rate plus BLEU of the parsed subset and its lift.

    All three sequences are index-aligned. The baseline BLEU is restricted
    to the same parsed subset so the delta compares like with like; with
    zero parsed responses the BLEU fields are absent.
    """
    if not (len(responses) == len(refs) == len(baseline_hyps)):
        raise ValueError(
            f"cot_metrics: lengths differ ({len(responses)}, {len(refs)}, {len(baseline_hyps)})"
        )
    total = len(responses)
    idx = [i for i, r in enumerate(responses) if r.parsed]
    rate = 100.0 * len(idx) / total if total else 0.0
    if not idx:
        return CoTMetrics(total, 0, rate, None, None, None)
    ref_toks = [tokenize(refs[i]) for i in idx]
    parsed_bleu = bleu_corpus([tokenize(responses[i].translation) for i in idx], ref_toks).score
    base_bleu = bleu_corpus([tokenize(baseline_hyps[i]) for i in idx], ref_toks).score
    return CoTMetrics(total, len(idx), rate, parsed_bleu, base_bleu, parsed_bleu - base_bleu)


def cot_report_dict(direction: str, metrics: CoTMetrics) -> dict:
    """JSON-ready report row mirroring the per-direction result layout."""
    return {
        "direction": direction,
        "total": metrics.total,
        "parsed": metrics.parsed,
        "success_rate_pct": metrics.success_rate_pct,
        "bleu_parsed": metrics.bleu_parsed,
        "bleu_baseline_subset": metrics.bleu_baseline_subset,
        "delta": metrics.delta,
    }
