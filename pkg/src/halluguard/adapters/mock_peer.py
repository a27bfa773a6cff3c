"""Reference peer speaking protocol v1, for tests and demos.

Run as ``python -m halluguard.adapters.mock_peer`` (stdin/stdout) or with
``--tcp PORT`` to listen on localhost; with ``--tcp 0`` the chosen port is
printed as ``LISTENING <port>`` on stdout.

By default ``detect_req`` is answered with the simulated detector's output
for the frame id in the request, and ``generate_req`` with a short phrase
naming the prompted label; with ``--halluc-rate`` a deterministic fraction
of phrases also mention an object that is not in the scene. A request may
carry an ``x_mock`` object to steer the reply:

``reply_detections``  list sent back verbatim as ``detections``
``reply_text``        string sent back verbatim as ``text``
``drop``              never answer
``delay_ms``          answer after this many milliseconds
``reply_id``          answer with this id instead of the request id
``raw``               write this string verbatim instead of a message
"""

from __future__ import annotations

import argparse
import random
import re
import socket
import sys
import threading
import time

from . import protocol as wire

_PHANTOMS = ("unicorn", "dragon", "spaceship", "volcano", "waterfall", "castle")
_PROMPT_LABEL = re.compile(r"Describe the (.+?) in this scene")


class MockPeer:
    def __init__(
        self,
        version: int = wire.PROTOCOL_VERSION,
        caps=("detect", "generate"),
        mute: bool = False,
        shuffle_ms: float = 0.0,
        seed: int = 0,
        sim_seed: int = 0,
        halluc_rate: float = 0.0,
    ):
        self.version = version
        self.caps = list(caps)
        self.mute = mute
        self.shuffle_s = shuffle_ms / 1000.0
        self.rng = random.Random(seed)
        self.sim_seed = sim_seed
        self.halluc_rate = halluc_rate
        self._detector = None
        self._out = None
        self._wlock = threading.Lock()
        self._batch: list[bytes] = []
        self._block = threading.Condition()
        self._last_arrival = 0.0

    # -- replies -------------------------------------------------------------

    def _sim_detections(self, meta: dict) -> list[dict]:
        from ..core import FrameMeta
        from ..simworld import SimDetector, calibrated_config, make_frame

        if self._detector is None:
            self._detector = SimDetector(calibrated_config(seed=self.sim_seed))
        cfg = self._detector.cfg
        fm = FrameMeta.from_record(meta)
        if (fm.width_px, fm.height_px) != tuple(cfg.frame_size):
            return []
        frame = make_frame(cfg, fm.frame_id)
        return wire.detections_to_wire(self._detector.detect(frame))

    def _phantom(self, roi: dict) -> str | None:
        if self.halluc_rate <= 0:
            return None
        import numpy as np

        key = [roi.get(k, 0) for k in ("frame_id", "x", "y", "w", "h")]
        rng = np.random.default_rng([self.sim_seed, 3, *key])
        if rng.random() >= self.halluc_rate:
            return None
        return str(rng.choice(_PHANTOMS))

    def reply_for(self, msg: dict):
        """Reply line for ``msg`` (``None`` for no reply) and its delay in seconds."""
        mock = msg.get("x_mock") or {}
        if self.mute or mock.get("drop"):
            return None, 0.0
        delay = float(mock.get("delay_ms", 0)) / 1000.0
        if "raw" in mock:
            return mock["raw"].encode("utf-8"), delay
        rid = mock.get("reply_id", msg["id"])
        kind = msg["kind"]
        if kind == "hello":
            out = wire.hello(rid, self.caps, self.version)
        elif kind == "detect_req" and "detect" in self.caps:
            dets = mock["reply_detections"] if "reply_detections" in mock else self._sim_detections(msg["meta"])
            out = {"kind": "detect_resp", "id": rid, "detections": dets}
        elif kind == "generate_req" and "generate" in self.caps:
            if "reply_text" in mock:
                text = mock["reply_text"]
            else:
                m = _PROMPT_LABEL.search(msg.get("prompt", ""))
                text = f"there is a {m.group(1) if m else 'thing'} in the scene"
                extra = self._phantom(msg.get("roi") or {})
                text += f" near a {extra}." if extra else "."
            out = {"kind": "generate_resp", "id": rid, "text": text}
        else:
            out = {"kind": "error", "id": rid, "message": f"unsupported request {kind!r}"}
        return wire.encode_message(out), delay

    # -- I/O -----------------------------------------------------------------

    def _write(self, data: bytes) -> None:
        with self._wlock:
            try:
                self._out.write(data)
                self._out.flush()
            except (OSError, ValueError):
                pass

    def _flusher(self, stop: threading.Event) -> None:
        while True:
            with self._block:
                while not self._batch and not stop.is_set():
                    self._block.wait(0.05)
                if not self._batch:
                    return
                idle = time.monotonic() - self._last_arrival
                if idle < self.shuffle_s and not stop.is_set():
                    self._block.wait(self.shuffle_s - idle)
                    continue
                batch, self._batch = self._batch, []
            self.rng.shuffle(batch)
            for data in batch:
                self._write(data)

    def _emit(self, data: bytes, delay: float) -> None:
        if delay > 0:
            threading.Timer(delay, self._write, args=(data,)).start()
        elif self.shuffle_s > 0:
            with self._block:
                self._batch.append(data)
                self._last_arrival = time.monotonic()
                self._block.notify()
        else:
            self._write(data)

    def serve(self, reader, writer) -> None:
        self._out = writer
        stop = threading.Event()
        flusher = None
        if self.shuffle_s > 0:
            flusher = threading.Thread(target=self._flusher, args=(stop,), daemon=True)
            flusher.start()
        try:
            for line in iter(lambda: reader.readline(wire.MAX_LINE_BYTES + 1), b""):
                try:
                    msg = wire.decode_message(line)
                except wire.MalformedBackendReply as exc:
                    self._write(wire.encode_message({"kind": "error", "id": -1, "message": str(exc)}))
                    continue
                data, delay = self.reply_for(msg)
                if data is not None:
                    self._emit(data, delay)
        finally:
            stop.set()
            if flusher is not None:
                flusher.join()


def _serve_tcp(peer_args: dict, port: int) -> None:
    srv = socket.create_server(("127.0.0.1", port))
    print(f"LISTENING {srv.getsockname()[1]}", flush=True)

    def handle(conn):
        with conn, conn.makefile("rb") as r, conn.makefile("wb") as w:
            MockPeer(**peer_args).serve(r, w)

    while True:
        conn, _ = srv.accept()
        threading.Thread(target=handle, args=(conn,), daemon=True).start()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mock_peer", description=__doc__.splitlines()[0])
    ap.add_argument("--version", type=int, default=wire.PROTOCOL_VERSION, help="protocol version to announce")
    ap.add_argument("--caps", default="detect,generate", help="comma-separated capabilities")
    ap.add_argument("--mute", action="store_true", help="never reply")
    ap.add_argument("--shuffle-ms", type=float, default=0.0, help="batch replies and send them shuffled after this idle time")
    ap.add_argument("--seed", type=int, default=0, help="seed for reply shuffling")
    ap.add_argument("--sim-seed", type=int, default=0, help="simulator seed for default detections")
    ap.add_argument("--halluc-rate", type=float, default=0.0, help="fraction of descriptions naming an absent object")
    ap.add_argument("--tcp", type=int, default=None, metavar="PORT", help="listen on localhost instead of stdio")
    args = ap.parse_args(argv)
    peer_args = dict(
        version=args.version,
        caps=[c for c in args.caps.split(",") if c],
        mute=args.mute,
        shuffle_ms=args.shuffle_ms,
        seed=args.seed,
        sim_seed=args.sim_seed,
        halluc_rate=args.halluc_rate,
    )
    if args.tcp is not None:
        try:
            _serve_tcp(peer_args, args.tcp)
        except KeyboardInterrupt:
            pass
        return 0
    MockPeer(**peer_args).serve(sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    sys.exit(main())
