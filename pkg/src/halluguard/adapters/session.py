"""Sessions with external detector / captioner processes.

A :class:`Session` owns one peer connection: a child process talking over
its stdin/stdout, or a TCP socket. One background thread reads replies and
routes each to the caller waiting on its ``id``, so callers on different
threads may have up to ``MAX_OUTSTANDING`` requests in flight and replies
may arrive in any order.
"""

from __future__ import annotations

import itertools
import shlex
import socket
import subprocess
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO

from ..core import Description, DetectionSet, FrameMeta, Grounding, Token, clamp_bbox, validate_detection_set
from ..errors import (
    BackendError,
    BackendTimeout,
    BackendUnavailable,
    CapabilityError,
    HandshakeTimeout,
    MalformedBackendReply,
    Unreachable,
    ValidationError,
    VersionMismatch,
)
from . import protocol as wire

MAX_OUTSTANDING = 32
_ORPHAN_LIMIT = 256


class Transport(str, Enum):
    CHILD_PROCESS = "ChildProcessPipes"
    TCP = "TcpSocket"


@dataclass(frozen=True)
class AdapterEndpoint:
    transport: Transport
    address: str  # command line, or host:port
    protocol_version: int = wire.PROTOCOL_VERSION
    timeout_ms: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "transport", Transport(self.transport))
        if self.timeout_ms <= 0:
            raise ValidationError("timeout_ms must be positive")


class PeerError(BackendError):
    """The peer answered with an ``error`` message."""


class _Pending:
    __slots__ = ("event", "reply")

    def __init__(self):
        self.event = threading.Event()
        self.reply: dict | None = None


class Session:
    def __init__(self, reader: BinaryIO, writer: BinaryIO, timeout_s: float = 2.0, closer=None):
        self._reader = reader
        self._writer = writer
        self._closer = closer
        self.timeout_s = timeout_s
        self.capabilities: frozenset[str] = frozenset()
        self.peer_version: int | None = None
        self._ids = itertools.count(1)
        self._pending: dict[int, _Pending] = {}
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(MAX_OUTSTANDING)
        self._closed = threading.Event()
        self.dead_reason: str | None = None
        # replies nobody is waiting for (late, or for another id), newest last
        self.orphans: OrderedDict[int, dict] = OrderedDict()
        self._thread = threading.Thread(target=self._read_loop, name="adapter-reader", daemon=True)
        self._thread.start()

    # -- plumbing ------------------------------------------------------------

    def _read_loop(self) -> None:
        try:
            while not self._closed.is_set():
                line = self._reader.readline(wire.MAX_LINE_BYTES + 1)
                if not line:
                    self._die("peer closed the connection")
                    return
                try:
                    msg = wire.decode_message(line)
                except MalformedBackendReply as exc:
                    self._die(f"framing violation: {exc}")
                    return
                self._dispatch(msg)
        except (OSError, ValueError) as exc:
            self._die(f"read failed: {exc}")

    def _dispatch(self, msg: dict) -> None:
        with self._lock:
            slot = self._pending.pop(msg["id"], None)
            if slot is None:
                self.orphans[msg["id"]] = msg
                while len(self.orphans) > _ORPHAN_LIMIT:
                    self.orphans.popitem(last=False)
                return
        slot.reply = msg
        slot.event.set()

    def _die(self, reason: str) -> None:
        with self._lock:
            if self.dead_reason is None:
                self.dead_reason = reason
            waiting = list(self._pending.values())
            self._pending.clear()
        for slot in waiting:
            slot.event.set()

    def next_id(self) -> int:
        return next(self._ids)

    def request(self, msg: dict, timeout_s: float | None = None) -> dict:
        """Send ``msg`` and block until the reply with the same id arrives."""
        timeout = self.timeout_s if timeout_s is None else timeout_s
        t0 = time.monotonic()
        if not self._slots.acquire(timeout=timeout):
            raise BackendTimeout("no free request slot", time.monotonic() - t0)
        try:
            slot = _Pending()
            with self._lock:
                if self.dead_reason is not None:
                    raise BackendUnavailable(f"session is down: {self.dead_reason}")
                self._pending[msg["id"]] = slot
            data = wire.encode_message(msg)
            try:
                with self._write_lock:
                    self._writer.write(data)
                    self._writer.flush()
            except (OSError, ValueError) as exc:
                with self._lock:
                    self._pending.pop(msg["id"], None)
                raise BackendUnavailable(f"write failed: {exc}") from exc
            remaining = timeout - (time.monotonic() - t0)
            if not slot.event.wait(max(0.0, remaining)):
                with self._lock:
                    self._pending.pop(msg["id"], None)
                raise BackendTimeout(f"no reply to {msg['kind']} #{msg['id']}", time.monotonic() - t0)
            if slot.reply is None:
                raise BackendUnavailable(f"session is down: {self.dead_reason}")
            reply = slot.reply
        finally:
            self._slots.release()
        if reply["kind"] == "error":
            raise PeerError(str(reply.get("message", "peer error")))
        return reply

    @property
    def alive(self) -> bool:
        return self.dead_reason is None and not self._closed.is_set()

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._writer.close()
        except OSError:
            pass
        # unblock the reader thread before touching its buffer
        if self._closer is not None:
            self._closer()
        self._thread.join(timeout=2)
        try:
            self._reader.close()
        except OSError:
            pass
        self._die("closed")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- connection + handshake --------------------------------------------------


def _connect(endpoint: AdapterEndpoint) -> Session:
    timeout_s = endpoint.timeout_ms / 1000.0
    if endpoint.transport is Transport.CHILD_PROCESS:
        try:
            proc = subprocess.Popen(
                shlex.split(endpoint.address),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise Unreachable(f"cannot start {endpoint.address!r}: {exc}") from exc

        def stop():
            if proc.poll() is None:
                proc.terminate()
                try:
                    proc.wait(timeout=2)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()

        sess = Session(proc.stdout, proc.stdin, timeout_s, closer=stop)
        sess.process = proc
        return sess

    host, _, port = endpoint.address.rpartition(":")
    try:
        sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout_s)
    except (OSError, ValueError) as exc:
        raise Unreachable(f"cannot connect to {endpoint.address}: {exc}") from exc
    sock.settimeout(None)

    def shut():
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()

    return Session(sock.makefile("rb"), sock.makefile("wb"), timeout_s, closer=shut)


def handshake(endpoint: AdapterEndpoint, capabilities=wire.CAPABILITIES) -> Session:
    """Connect and exchange ``hello`` messages.

    The returned session records the peer's capabilities. Raises
    :class:`VersionMismatch` unless the peer speaks protocol version 1.
    """
    sess = _connect(endpoint)
    try:
        reply = sess.request(wire.hello(0, capabilities, endpoint.protocol_version))
    except BackendTimeout as exc:
        sess.close()
        raise HandshakeTimeout("no hello from peer", exc.elapsed_s) from exc
    except BackendError:
        sess.close()
        raise
    if reply.get("kind") != "hello":
        sess.close()
        raise MalformedBackendReply(f"expected hello, got {reply.get('kind')!r}")
    version = reply.get("protocol_version")
    if version != wire.PROTOCOL_VERSION or endpoint.protocol_version != wire.PROTOCOL_VERSION:
        sess.close()
        raise VersionMismatch(f"peer speaks protocol {version!r}, need {wire.PROTOCOL_VERSION}")
    caps = reply.get("capabilities", [])
    if not isinstance(caps, list):
        sess.close()
        raise MalformedBackendReply("capabilities must be a list")
    sess.peer_version = version
    sess.capabilities = frozenset(c for c in caps if c in wire.CAPABILITIES)
    return sess


def _require(sess: Session, cap: str) -> None:
    if cap not in sess.capabilities:
        raise CapabilityError(f"peer does not offer {cap!r} (has {sorted(sess.capabilities)})")


def remote_detect(
    sess: Session, meta: FrameMeta, pixels, timeout_s: float | None = None, extra: dict | None = None
) -> DetectionSet:
    """Run the peer's detector on one frame.

    Boxes reaching past the frame edge are clamped before validation; a box
    entirely outside the frame, or any other invalid detection, makes the
    reply malformed.
    """
    _require(sess, "detect")
    msg = wire.detect_request(sess.next_id(), meta, pixels)
    if extra:
        msg.update(extra)
    reply = sess.request(msg, timeout_s)
    if reply["kind"] != "detect_resp":
        raise MalformedBackendReply(f"expected detect_resp, got {reply['kind']!r}")
    ds = wire.detections_from_wire(meta.frame_id, reply.get("detections"))
    dets = []
    for d in ds.detections:
        b = clamp_bbox(d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, meta.width_px, meta.height_px)
        dets.append(d if b is None or b == d.bbox else type(d)(b, d.label, d.confidence, d.truth_tag))
    ds = DetectionSet(meta.frame_id, tuple(dets))
    try:
        return validate_detection_set(ds, meta)
    except ValidationError as exc:
        raise MalformedBackendReply(f"invalid detection in reply: {exc}") from exc


def remote_generate(
    sess: Session, prompt, roi, timeout_s: float | None = None, extra: dict | None = None
) -> Description:
    """Ask the peer to describe ``roi``; tokens come back tagged Unknown."""
    _require(sess, "generate")
    msg = wire.generate_request(sess.next_id(), prompt.text, roi.source_frame_id, roi.bbox, roi.channels, roi.pixels)
    if extra:
        msg.update(extra)
    reply = sess.request(msg, timeout_s)
    if reply["kind"] != "generate_resp":
        raise MalformedBackendReply(f"expected generate_resp, got {reply['kind']!r}")
    words = wire.tokenize_reply(reply.get("text"))
    return Description(0, tuple(Token(w, Grounding.UNKNOWN) for w in words))


class AdapterDetector:
    def __init__(self, session: Session):
        self.session = session

    def detect(self, frame) -> DetectionSet:
        return remote_detect(self.session, frame.meta, frame.pixels)


class AdapterGenerator:
    def __init__(self, session: Session):
        self.session = session

    def describe(self, request) -> Description:
        desc = remote_generate(self.session, request.prompt, request.roi)
        return Description(request.index, desc.tokens)
