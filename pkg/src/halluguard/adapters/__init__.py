"""Plugging external detector and captioner programs into the pipeline."""

from .protocol import MAX_LINE_BYTES, PROTOCOL_VERSION
from .session import (
    AdapterDetector,
    AdapterEndpoint,
    AdapterGenerator,
    Session,
    Transport,
    handshake,
    remote_detect,
    remote_generate,
)

__all__ = [
    "MAX_LINE_BYTES",
    "PROTOCOL_VERSION",
    "AdapterDetector",
    "AdapterEndpoint",
    "AdapterGenerator",
    "Session",
    "Transport",
    "handshake",
    "remote_detect",
    "remote_generate",
]
