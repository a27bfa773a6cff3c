import json
import subprocess
import sys
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from halluguard.adapters import (
    MAX_LINE_BYTES,
    AdapterDetector,
    AdapterEndpoint,
    AdapterGenerator,
    Transport,
    handshake,
    remote_detect,
    remote_generate,
)
from halluguard.adapters import protocol as wire
from halluguard.core import BBox, Detection, FrameMeta, Grounding, TruthTag
from halluguard.errors import (
    BackendTimeout,
    BackendUnavailable,
    CapabilityError,
    HandshakeTimeout,
    MalformedBackendReply,
    Unreachable,
    VersionMismatch,
)
from halluguard.pipeline import Pipeline, PipelineConfig, build_prompt, crop_roi
from halluguard.simworld import SimDetector, calibrated_config, make_frame

META = FrameMeta(0, 8, 8, 1)
PIXELS = bytes(64)


def pipes(cmd, timeout_ms=3000):
    return handshake(AdapterEndpoint(Transport.CHILD_PROCESS, cmd, timeout_ms=timeout_ms))


def roi():
    return crop_roi(PIXELS, META, BBox(0, 0, 4, 4))


@pytest.fixture
def session(mock_cmd):
    with pipes(mock_cmd()) as s:
        yield s


@pytest.fixture
def tcp_peer():
    proc = subprocess.Popen(
        [sys.executable, "-m", "halluguard.adapters.mock_peer", "--tcp", "0"],
        stdout=subprocess.PIPE,
        text=True,
    )
    line = proc.stdout.readline()
    assert line.startswith("LISTENING ")
    yield f"127.0.0.1:{int(line.split()[1])}"
    proc.terminate()
    proc.wait(timeout=5)


# -- codec -------------------------------------------------------------------


def test_message_is_one_line():
    data = wire.encode_message(wire.hello(0, ["detect"]))
    assert data.endswith(b"\n") and data.count(b"\n") == 1
    assert wire.decode_message(data) == {"kind": "hello", "id": 0, "protocol_version": 1, "capabilities": ["detect"]}


def test_framing_limits():
    with pytest.raises(wire.FramingError):
        wire.decode_message(b"x" * (MAX_LINE_BYTES + 1))
    with pytest.raises(wire.FramingError):
        wire.encode_message({"kind": "generate_resp", "id": 1, "text": "a" * MAX_LINE_BYTES})
    for bad in (b'{"kind":"hello","id":1}', b"[1]\n", b"not json\n", b'{"kind":"nope","id":1}\n', b'{"kind":"hello"}\n'):
        with pytest.raises(wire.FramingError):
            wire.decode_message(bad)


def test_truth_tags_stay_local():
    det = Detection(BBox(1, 2, 3, 4), "dog", 0.5, TruthTag.FALSE_POSITIVE)
    rec = wire.detection_to_wire(det)
    assert rec == {"bbox": [1, 2, 3, 4], "label": "dog", "confidence": 0.5}
    assert wire.detection_from_wire(rec).truth_tag is TruthTag.UNKNOWN
    req = wire.detect_request(3, META, PIXELS)
    assert "truth" not in json.dumps(req)


@given(
    st.integers(0, 500), st.integers(0, 500), st.integers(1, 500), st.integers(1, 500),
    st.text(min_size=1).filter(str.strip), st.floats(0, 1),
)
def test_detection_wire_round_trip(x, y, w, h, label, conf):
    det = Detection(BBox(x, y, w, h), label, conf, TruthTag.UNKNOWN)
    line = wire.encode_message({"kind": "detect_resp", "id": 1, "detections": [wire.detection_to_wire(det)]})
    back = wire.detections_from_wire(0, wire.decode_message(line)["detections"])
    assert back.detections == (det,)


@pytest.mark.parametrize(
    "rec",
    [
        {"bbox": [1, 2, 3], "label": "dog", "confidence": 0.5},
        {"bbox": [1, 2, 3, 4.5], "label": "dog", "confidence": 0.5},
        {"bbox": [1, 2, 3, True], "label": "dog", "confidence": 0.5},
        {"bbox": [1, 2, 3, 4], "label": 7, "confidence": 0.5},
        {"bbox": [1, 2, 3, 4], "label": "dog", "confidence": "high"},
        {"bbox": [1, 2, 3, 4], "label": "dog"},
    ],
)
def test_bad_wire_detections(rec):
    with pytest.raises(MalformedBackendReply):
        wire.detection_from_wire(rec)


def test_tokenize_reply():
    assert wire.tokenize_reply("a dog sitting.") == ["a", "dog", "sitting"]
    for bad in ("", "   ", "...", None, 3):
        with pytest.raises(MalformedBackendReply):
            wire.tokenize_reply(bad)
    with pytest.raises(MalformedBackendReply):
        wire.tokenize_reply("a dog\nsitting")


# -- sessions ----------------------------------------------------------------


def test_handshake_records_capabilities(session):
    assert session.peer_version == 1
    assert session.capabilities == {"detect", "generate"}


def test_generate_round_trip(session):
    desc = remote_generate(session, build_prompt("dog"), roi(), extra={"x_mock": {"reply_text": "a dog sitting"}})
    assert [t.text for t in desc.tokens] == ["a", "dog", "sitting"]
    assert all(t.grounding is Grounding.UNKNOWN for t in desc.tokens)
    desc = remote_generate(session, build_prompt("traffic light"), roi())
    assert " ".join(t.text for t in desc.tokens) == "there is a traffic light in the scene"


@pytest.mark.parametrize("text", ["", "a dog\nsitting"])
def test_malformed_descriptions(session, text):
    with pytest.raises(MalformedBackendReply):
        remote_generate(session, build_prompt("dog"), roi(), extra={"x_mock": {"reply_text": text}})
    # the session survives a bad payload
    assert remote_generate(session, build_prompt("dog"), roi()).tokens


def test_detect_matches_local_simulator(mock_cmd):
    cfg = calibrated_config(seed=3)
    with pipes(mock_cmd("--sim-seed", "3")) as s:
        for fid in range(5):
            frame = make_frame(cfg, fid)
            remote = remote_detect(s, frame.meta, frame.pixels)
            local = SimDetector(cfg).detect(frame)
            assert [(d.bbox, d.label, d.confidence) for d in remote.detections] == [
                (d.bbox, d.label, d.confidence) for d in local.detections
            ]
            assert all(d.truth_tag is TruthTag.UNKNOWN for d in remote.detections)


def test_detect_clamps_and_rejects(session):
    over = {"bbox": [6, 6, 5, 5], "label": "dog", "confidence": 0.5}
    ds = remote_detect(session, META, PIXELS, extra={"x_mock": {"reply_detections": [over]}})
    assert ds.detections[0].bbox == BBox(6, 6, 2, 2)
    outside = {"bbox": [20, 20, 5, 5], "label": "dog", "confidence": 0.5}
    sure = {"bbox": [1, 1, 2, 2], "label": "dog", "confidence": 1.5}
    for bad in (outside, sure):
        with pytest.raises(MalformedBackendReply):
            remote_detect(session, META, PIXELS, extra={"x_mock": {"reply_detections": [bad]}})


def test_mismatched_reply_id_times_out(session):
    with pytest.raises(BackendTimeout):
        remote_generate(session, build_prompt("dog"), roi(), timeout_s=0.3, extra={"x_mock": {"reply_id": 9999}})
    assert 9999 in session.orphans
    assert session.alive


def test_timeout_isolation(session):
    errors, ok = [], []

    def slow():
        try:
            remote_generate(session, build_prompt("dog"), roi(), timeout_s=0.3, extra={"x_mock": {"delay_ms": 800}})
        except BackendTimeout as exc:
            errors.append(exc)

    t = threading.Thread(target=slow)
    t.start()
    time.sleep(0.05)
    ok.append(remote_generate(session, build_prompt("cat"), roi()))
    t.join()
    assert len(errors) == 1 and ok[0].tokens[3].text == "cat"
    time.sleep(0.7)
    assert session.orphans and remote_generate(session, build_prompt("bus"), roi()).tokens


def test_out_of_order_replies(mock_cmd):
    with pipes(mock_cmd("--shuffle-ms", "20", "--seed", "1"), timeout_ms=10_000) as s:
        got = {}

        def call(i):
            extra = {"x_mock": {"reply_text": f"w{i}"}}
            got[i] = remote_generate(s, build_prompt("dog"), roi(), extra=extra).tokens[0].text

        threads = [threading.Thread(target=call, args=(i,)) for i in range(100)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert got == {i: f"w{i}" for i in range(100)}


def test_version_mismatch(mock_cmd):
    with pytest.raises(VersionMismatch):
        pipes(mock_cmd("--version", "2"))
    with pytest.raises(VersionMismatch):
        handshake(AdapterEndpoint(Transport.CHILD_PROCESS, mock_cmd(), protocol_version=2))


def test_handshake_timeout(mock_cmd):
    t0 = time.monotonic()
    with pytest.raises(HandshakeTimeout):
        pipes(mock_cmd("--mute"), timeout_ms=300)
    assert time.monotonic() - t0 < 3


def test_capability_error(mock_cmd):
    with pipes(mock_cmd("--caps", "detect")) as s:
        with pytest.raises(CapabilityError):
            remote_generate(s, build_prompt("dog"), roi())


def test_unreachable():
    with pytest.raises(Unreachable):
        pipes("/nonexistent/peer-binary")
    with pytest.raises(Unreachable):
        handshake(AdapterEndpoint(Transport.TCP, "127.0.0.1:1", timeout_ms=500))


def test_framing_violation_kills_session(session):
    with pytest.raises(BackendUnavailable):
        remote_generate(session, build_prompt("dog"), roi(), extra={"x_mock": {"raw": "garbage\n"}})
    assert not session.alive
    with pytest.raises(BackendUnavailable):
        remote_generate(session, build_prompt("dog"), roi())


def test_tcp_transport(tcp_peer):
    with handshake(AdapterEndpoint(Transport.TCP, tcp_peer)) as s:
        desc = remote_generate(s, build_prompt("dog"), roi(), extra={"x_mock": {"reply_text": "a dog sitting"}})
        assert len(desc.tokens) == 3
        cfg = calibrated_config()
        frame = make_frame(cfg, 0)
        assert remote_detect(s, frame.meta, frame.pixels) == remote_detect(s, frame.meta, frame.pixels)


def test_pipeline_over_adapter(mock_cmd):
    cfg = calibrated_config()
    with pipes(mock_cmd()) as s:
        pipe = Pipeline(AdapterDetector(s), AdapterGenerator(s), PipelineConfig())
        results = [pipe.process_frame(make_frame(cfg, i)) for i in range(5)]
    assert all(r.report.gamma == 1.0 for r in results if r.descriptions)
    assert any(r.descriptions for r in results)


def test_endpoint_validation():
    with pytest.raises(ValueError):
        AdapterEndpoint("Carrier pigeon", "x")
    with pytest.raises(ValueError):
        AdapterEndpoint(Transport.TCP, "x:1", timeout_ms=0)
    assert np.isfinite(AdapterEndpoint("TcpSocket", "x:1").timeout_ms)


def test_mock_peer_shuffles_batches():
    import io

    from halluguard.adapters.mock_peer import MockPeer

    reqs = b"".join(wire.encode_message(wire.hello(i, ["detect"])) for i in range(50))
    out = io.BytesIO()
    out.close = lambda: None
    MockPeer(shuffle_ms=1, seed=3).serve(io.BytesIO(reqs), out)
    ids = [json.loads(line)["id"] for line in out.getvalue().splitlines()]
    assert sorted(ids) == list(range(50)) and ids != list(range(50))
