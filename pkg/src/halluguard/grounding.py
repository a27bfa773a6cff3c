"""Grounding score, hallucinated set and windowed hallucination rate.

A description token is *content* unless its lower-cased text is a template
word. Content tokens are grounded when they equal a filtered label, or any
single word of a multi-word filtered label ("traffic light" grounds both
"traffic" and "light").
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import AbstractSet, Iterable, Sequence

from .core import Description, DetectionSet, Grounding, Token, TruthTag, load_whitelist
from .errors import EmptySet, OutOfRange, UnknownTagInOracleMode, UnknownTruthTags, ValidationError


class GroundingMode(str, Enum):
    TOKEN_LEVEL = "TokenLevel"
    DESCRIPTION_LEVEL = "DescriptionLevel"
    ORACLE = "Oracle"


@dataclass(frozen=True)
class GroundingReport:
    """Per-frame grounding result.

    ``grounded_tokens / scored_tokens`` is the ratio behind ``gamma``. In
    ``DescriptionLevel`` mode both counts are description counts rather than
    token counts, so that ratio identity holds in every mode.
    """

    frame_id: int
    gamma: float
    grounded_tokens: int
    scored_tokens: int
    hallucinated_descriptions: tuple[int, ...]
    h_frame: float

    def to_record(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "gamma": self.gamma,
            "grounded_tokens": self.grounded_tokens,
            "scored_tokens": self.scored_tokens,
            "hallucinated_descriptions": list(self.hallucinated_descriptions),
            "h_frame": self.h_frame,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GroundingReport":
        return cls(
            frame_id=int(rec["frame_id"]),
            gamma=float(rec["gamma"]),
            grounded_tokens=int(rec["grounded_tokens"]),
            scored_tokens=int(rec["scored_tokens"]),
            hallucinated_descriptions=tuple(rec["hallucinated_descriptions"]),
            h_frame=float(rec["h_frame"]),
        )


_DEFAULT_WHITELIST: frozenset[str] | None = None


def default_whitelist() -> frozenset[str]:
    global _DEFAULT_WHITELIST
    if _DEFAULT_WHITELIST is None:
        _DEFAULT_WHITELIST = load_whitelist()
    return _DEFAULT_WHITELIST


def allowed_words(labels: Iterable[str]) -> frozenset[str]:
    """Every string a content token may equal to count as grounded."""
    out = set()
    for label in labels:
        low = label.lower()
        out.add(low)
        out.update(low.split())
    return frozenset(out)


def _classify(text: str, words: AbstractSet[str], whitelist: AbstractSet[str]) -> Grounding:
    low = text.lower()
    if low in whitelist:
        return Grounding.TEMPLATE
    if low in words:
        return Grounding.GROUNDED
    return Grounding.UNGROUNDED


def match_token(
    token_text: str, allowed_labels: Iterable[str], whitelist: AbstractSet[str] | None = None
) -> Grounding:
    if not token_text:
        raise ValidationError("empty token text")
    wl = default_whitelist() if whitelist is None else whitelist
    return _classify(token_text, allowed_words(allowed_labels), wl)


def classify_tokens(
    desc: Description, allowed_labels: Iterable[str], whitelist: AbstractSet[str] | None = None
) -> Description:
    """Re-tag every token of ``desc`` with :func:`match_token`."""
    wl = default_whitelist() if whitelist is None else whitelist
    words = allowed_words(allowed_labels)
    toks = tuple(Token(t.text, _classify(t.text, words, wl)) for t in desc.tokens)
    return Description(desc.source_detection_index, toks)


def _make_report(frame_id: int, grounded: int, scored: int, hallucinated: list[int]) -> GroundingReport:
    if scored == 0:
        return GroundingReport(frame_id, 1.0, 0, 0, (), 0.0)
    gamma = grounded / scored
    return GroundingReport(frame_id, gamma, grounded, scored, tuple(hallucinated), 1.0 - gamma)


def grounding_score(
    descriptions: Sequence[Description],
    allowed_labels: Iterable[str],
    mode: GroundingMode = GroundingMode.TOKEN_LEVEL,
    whitelist: AbstractSet[str] | None = None,
    frame_id: int = 0,
) -> GroundingReport:
    mode = GroundingMode(mode)
    wl = default_whitelist() if whitelist is None else whitelist
    words = allowed_words(allowed_labels)

    grounded = scored = 0
    hallucinated: list[int] = []
    clean_descriptions = 0
    for i, desc in enumerate(descriptions):
        bad = 0
        for tok in desc.tokens:
            if mode is GroundingMode.ORACLE:
                tag = tok.grounding
                if tag is Grounding.UNKNOWN:
                    raise UnknownTagInOracleMode(
                        f"description {i}: token {tok.text!r} has no grounding tag"
                    )
            else:
                tag = _classify(tok.text, words, wl)
            if tag is Grounding.TEMPLATE:
                continue
            scored += 1
            if tag is Grounding.GROUNDED:
                grounded += 1
            else:
                bad += 1
        if bad:
            hallucinated.append(i)
        else:
            clean_descriptions += 1

    if mode is GroundingMode.DESCRIPTION_LEVEL:
        return _make_report(frame_id, clean_descriptions, len(descriptions), hallucinated)
    return _make_report(frame_id, grounded, scored, hallucinated)


class RateEstimator:
    """Sliding-window mean of per-frame hallucination rates."""

    def __init__(self, window_len: int = 30):
        if window_len < 1:
            raise ValidationError("window_len must be >= 1")
        self.window_len = window_len
        self.buffer: deque[float] = deque(maxlen=window_len)
        self.h_t = 0.0

    def update(self, h_frame: float) -> "RateEstimator":
        if not (0.0 <= h_frame <= 1.0):
            raise OutOfRange(f"h_frame {h_frame!r} outside [0, 1]")
        self.buffer.append(h_frame)
        self.h_t = math.fsum(self.buffer) / len(self.buffer)
        return self


def update_rate(est: RateEstimator, h_frame: float) -> RateEstimator:
    return est.update(h_frame)


def epsilon_detect(ds: DetectionSet) -> float:
    """Fraction of detections tagged as false positives."""
    if not ds.detections:
        raise EmptySet("epsilon_detect of an empty detection set")
    n_false = 0
    for i, d in enumerate(ds.detections):
        if d.truth_tag is TruthTag.UNKNOWN:
            raise UnknownTruthTags(f"detection {i} has no truth tag")
        if d.truth_tag is TruthTag.FALSE_POSITIVE:
            n_false += 1
    return n_false / len(ds.detections)
