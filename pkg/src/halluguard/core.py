"""Domain types shared by every stage of the pipeline.

All types are frozen dataclasses holding tuples, so a value built in one
stage can be handed to another thread without copying. Each type converts
to and from a plain ``dict`` record (``to_record`` / ``from_record``) and,
through :func:`dumps` / :func:`loads`, to one JSON object per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import (
    BoxOutOfBounds,
    ConfidenceOutOfRange,
    EmptyLabel,
    FrameMismatch,
    UnknownLabel,
    ValidationError,
)

SCENE_PREFIX = "In the scene, "


class TruthTag(str, Enum):
    TRUE_POSITIVE = "TruePositive"
    FALSE_POSITIVE = "FalsePositive"
    UNKNOWN = "Unknown"


class Grounding(str, Enum):
    """Per-token grounding tag.

    ``UNKNOWN`` is what external backends produce before the token is
    classified against the filtered labels.
    """

    GROUNDED = "Grounded"
    UNGROUNDED = "Ungrounded"
    TEMPLATE = "Template"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class FrameMeta:
    frame_id: int
    width_px: int
    height_px: int
    channels: int = 3
    timestamp_us: int = 0

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1 or self.channels < 1:
            raise ValidationError(
                f"frame {self.frame_id}: non-positive geometry "
                f"{self.width_px}x{self.height_px}x{self.channels}"
            )
        if self.timestamp_us < 0:
            raise ValidationError(f"frame {self.frame_id}: negative timestamp")

    @property
    def n_bytes(self) -> int:
        return self.width_px * self.height_px * self.channels

    def to_record(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "channels": self.channels,
            "timestamp_us": self.timestamp_us,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FrameMeta":
        return cls(
            frame_id=int(rec["frame_id"]),
            width_px=int(rec["width_px"]),
            height_px=int(rec["height_px"]),
            channels=int(rec.get("channels", 3)),
            timestamp_us=int(rec.get("timestamp_us", 0)),
        )


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box; ``(x, y)`` is the top-left corner."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"negative box origin ({self.x}, {self.y})")
        if self.w < 1 or self.h < 1:
            raise ValidationError(f"non-positive box size {self.w}x{self.h}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def fits(self, width: int, height: int) -> bool:
        return self.x2 <= width and self.y2 <= height

    def to_record(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_record(cls, rec: dict) -> "BBox":
        return cls(int(rec["x"]), int(rec["y"]), int(rec["w"]), int(rec["h"]))


def clamp_bbox(x: int, y: int, w: int, h: int, width: int, height: int) -> BBox | None:
    """Intersect a raw box with the frame; ``None`` when nothing is left."""
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(x + w, width), min(y + h, height)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def iou(a: BBox, b: BBox) -> float:
    ix = max(0, min(a.x2, b.x2) - max(a.x, b.x))
    iy = max(0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = ix * iy
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    label: str
    confidence: float
    truth_tag: TruthTag = TruthTag.UNKNOWN

    def to_record(self) -> dict:
        return {
            "bbox": self.bbox.to_record(),
            "label": self.label,
            "confidence": self.confidence,
            "truth_tag": self.truth_tag.value,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        return cls(
            bbox=BBox.from_record(rec["bbox"]),
            label=str(rec["label"]),
            confidence=float(rec["confidence"]),
            truth_tag=TruthTag(rec.get("truth_tag", TruthTag.UNKNOWN.value)),
        )


@dataclass(frozen=True)
class DetectionSet:
    frame_id: int
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        if not isinstance(self.detections, tuple):
            object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(d.label for d in self.detections)

    def to_record(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "detections": [d.to_record() for d in self.detections],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DetectionSet":
        return cls(
            frame_id=int(rec["frame_id"]),
            detections=tuple(Detection.from_record(d) for d in rec["detections"]),
        )


@dataclass(frozen=True)
class Token:
    text: str
    grounding: Grounding = Grounding.UNKNOWN

    def __post_init__(self):
        if not self.text:
            raise ValidationError("empty token text")

    def to_record(self) -> dict:
        return {"text": self.text, "grounding": self.grounding.value}

    @classmethod
    def from_record(cls, rec: dict) -> "Token":
        return cls(str(rec["text"]), Grounding(rec["grounding"]))


@dataclass(frozen=True)
class Description:
    source_detection_index: int
    tokens: tuple[Token, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def text(self) -> str:
        return " ".join(t.text for t in self.tokens)

    def to_record(self) -> dict:
        return {
            "source_detection_index": self.source_detection_index,
            "tokens": [t.to_record() for t in self.tokens],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Description":
        return cls(
            source_detection_index=int(rec["source_detection_index"]),
            tokens=tuple(Token.from_record(t) for t in rec["tokens"]),
        )


@dataclass(frozen=True)
class SceneSummary:
    clauses: tuple[str, ...]
    relations: tuple[str, ...]
    rendered: str
    prefix: str = SCENE_PREFIX

    def __post_init__(self):
        for name in ("clauses", "relations"):
            val = getattr(self, name)
            if not isinstance(val, tuple):
                object.__setattr__(self, name, tuple(val))
        if not self.rendered.startswith(SCENE_PREFIX):
            raise ValidationError(f"scene summary must start with {SCENE_PREFIX!r}")

    def to_record(self) -> dict:
        return {
            "prefix": self.prefix,
            "clauses": list(self.clauses),
            "relations": list(self.relations),
            "rendered": self.rendered,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SceneSummary":
        return cls(
            clauses=tuple(rec["clauses"]),
            relations=tuple(rec["relations"]),
            rendered=rec["rendered"],
            prefix=rec.get("prefix", SCENE_PREFIX),
        )


# -- validation --------------------------------------------------------------


def validate_detection_set(
    ds: DetectionSet, meta: FrameMeta, vocabulary: Iterable[str] | None = None
) -> DetectionSet:
    """Return ``ds`` unchanged if every detection is well formed.

    Raises the first violation found, in detection order.
    """
    if ds.frame_id != meta.frame_id:
        raise FrameMismatch(f"detection set frame {ds.frame_id} != frame {meta.frame_id}")
    vocab = None if vocabulary is None else frozenset(vocabulary)
    for i, det in enumerate(ds.detections):
        p = det.confidence
        if not (isinstance(p, (int, float)) and 0.0 <= p <= 1.0):
            raise ConfidenceOutOfRange(i, p)
        if not det.label:
            raise EmptyLabel(i)
        if vocab is not None and det.label not in vocab:
            raise UnknownLabel(i, det.label)
        if not det.bbox.fits(meta.width_px, meta.height_px):
            b = det.bbox
            raise BoxOutOfBounds(
                i, f"x+w={b.x2} vs width {meta.width_px}, y+h={b.y2} vs height {meta.height_px}"
            )
    return ds


# -- vocabulary files --------------------------------------------------------


def _read_list(path: str | Path | None, default_name: str) -> tuple[str, ...]:
    if path is None:
        text = resources.files("halluguard.data").joinpath(default_name).read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


def load_vocabulary(path: str | Path | None = None) -> tuple[str, ...]:
    """Class labels, one per line. Defaults to the 80 COCO class names."""
    return _read_list(path, "coco80.txt")


def load_whitelist(path: str | Path | None = None) -> frozenset[str]:
    """Template (function) words, one per line, lower-cased."""
    return frozenset(w.lower() for w in _read_list(path, "whitelist.txt"))


# -- line format -------------------------------------------------------------


def _default(o: Any):
    if isinstance(o, Enum):
        return o.value
    if hasattr(o, "to_record"):
        return o.to_record()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj: Any) -> str:
    """One JSON object on a single line (no trailing newline)."""
    rec = obj.to_record() if hasattr(obj, "to_record") else obj
    return json.dumps(rec, default=_default, separators=(",", ":"), allow_nan=False)


def loads(line: str, cls: type):
    return cls.from_record(json.loads(line))


def write_lines(path: str | Path, objs: Sequence[Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for o in objs:
            fh.write(dumps(o) + "\n")


def read_lines(path: str | Path, cls: type) -> list:
    with open(path, encoding="utf-8") as fh:
        return [loads(line, cls) for line in fh if line.strip()]


def is_finite_prob(x: float) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x) and 0.0 <= x <= 1.0
