"""Wire format, protocol version 1.

One JSON object per line, UTF-8, ``\\n``-terminated, at most 16 MiB per line.
Every object has ``kind`` and ``id``; responses echo the request ``id``.

==============  ==========================================================
kind            payload
==============  ==========================================================
hello           ``protocol_version`` (int), ``capabilities`` (list of str)
detect_req      ``meta`` (frame meta object), ``pixels`` (base64)
detect_resp     ``detections``: list of ``{bbox: [x, y, w, h], label, confidence}``
generate_req    ``prompt`` (str), ``roi`` (``{frame_id, x, y, w, h, channels}``),
                ``pixels`` (base64)
generate_resp   ``text`` (str, single line)
error           ``message`` (str)
==============  ==========================================================

Truth tags never cross the wire.
"""

from __future__ import annotations

import base64
import json
from typing import Any

from ..core import BBox, Detection, DetectionSet, FrameMeta, TruthTag
from ..errors import MalformedBackendReply, ValidationError

PROTOCOL_VERSION = 1
MAX_LINE_BYTES = 16 * 1024 * 1024
KINDS = frozenset({"hello", "detect_req", "detect_resp", "generate_req", "generate_resp", "error"})
CAPABILITIES = frozenset({"detect", "generate"})
_TRAILING_PUNCT = ".,;:!?\"')]}"


class FramingError(MalformedBackendReply):
    pass


def encode_message(msg: dict) -> bytes:
    if msg.get("kind") not in KINDS:
        raise ValueError(f"unknown message kind {msg.get('kind')!r}")
    if "id" not in msg:
        raise ValueError("message without id")
    data = (json.dumps(msg, ensure_ascii=False, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")
    if len(data) > MAX_LINE_BYTES:
        raise FramingError(f"message of {len(data)} bytes exceeds the 16 MiB line limit")
    return data


def decode_message(line: bytes) -> dict:
    if len(line) > MAX_LINE_BYTES:
        raise FramingError(f"line of {len(line)} bytes exceeds the 16 MiB limit")
    if not line.endswith(b"\n"):
        raise FramingError("unterminated line")
    try:
        msg = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"undecodable line: {exc}") from exc
    if not isinstance(msg, dict):
        raise FramingError("line is not a JSON object")
    if msg.get("kind") not in KINDS:
        raise FramingError(f"unknown kind {msg.get('kind')!r}")
    if not isinstance(msg.get("id"), int):
        raise FramingError("missing or non-integer id")
    return msg


def b64(data) -> str:
    return base64.b64encode(bytes(data)).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise MalformedBackendReply(f"bad base64 payload: {exc}") from exc


def hello(msg_id: int, capabilities, version: int = PROTOCOL_VERSION) -> dict:
    return {"kind": "hello", "id": msg_id, "protocol_version": version, "capabilities": sorted(capabilities)}


# -- detections --------------------------------------------------------------


def detection_to_wire(d: Detection) -> dict:
    b = d.bbox
    return {"bbox": [b.x, b.y, b.w, b.h], "label": d.label, "confidence": d.confidence}


def detection_from_wire(rec: Any) -> Detection:
    try:
        raw = rec["bbox"]
        if len(raw) != 4 or any(isinstance(v, bool) or not isinstance(v, int) for v in raw):
            raise TypeError("bbox must be four integers")
        x, y, w, h = raw
        label = rec["label"]
        conf = rec["confidence"]
        if not isinstance(label, str) or isinstance(conf, bool) or not isinstance(conf, (int, float)):
            raise TypeError("label must be a string and confidence a number")
        return Detection(BBox(x, y, w, h), label, float(conf), TruthTag.UNKNOWN)
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise MalformedBackendReply(f"bad detection record {rec!r}: {exc}") from exc


def detections_to_wire(ds: DetectionSet) -> list[dict]:
    return [detection_to_wire(d) for d in ds.detections]


def detections_from_wire(frame_id: int, items: Any) -> DetectionSet:
    if not isinstance(items, list):
        raise MalformedBackendReply("detections must be a list")
    return DetectionSet(frame_id, tuple(detection_from_wire(r) for r in items))


def detect_request(msg_id: int, meta: FrameMeta, pixels) -> dict:
    return {"kind": "detect_req", "id": msg_id, "meta": meta.to_record(), "pixels": b64(pixels)}


def generate_request(msg_id: int, prompt: str, roi_frame_id: int, bbox: BBox, channels: int, pixels) -> dict:
    return {
        "kind": "generate_req",
        "id": msg_id,
        "prompt": prompt,
        "roi": {"frame_id": roi_frame_id, "x": bbox.x, "y": bbox.y, "w": bbox.w, "h": bbox.h, "channels": channels},
        "pixels": b64(pixels),
    }


def tokenize_reply(text: Any) -> list[str]:
    """Whitespace tokens with trailing punctuation stripped.

    Raises :class:`MalformedBackendReply` for non-string, multi-line or
    content-free replies.
    """
    if not isinstance(text, str):
        raise MalformedBackendReply("generate_resp text must be a string")
    if "\n" in text or "\r" in text:
        raise FramingError("description text spans more than one line")
    words = []
    for raw in text.split():
        w = raw.rstrip(_TRAILING_PUNCT)
        if w:
            words.append(w)
    if not words:
        raise MalformedBackendReply("empty description")
    return words
