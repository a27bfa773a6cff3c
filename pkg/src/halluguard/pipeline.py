"""Frame pipeline: filter, crop, prompt, generate, ground, control, assemble.

:class:`Pipeline` owns the controller and the rate estimator for one stream
and processes frames strictly in order. :func:`run_stream` adds two-stage
pipelining: detection of frame ``t+1`` runs in a worker thread while frame
``t`` is being described, so the steady-state cost per frame approaches
``max(detect, describe) + alpha`` instead of their sum.

The threshold used to filter a frame is always the one in force *before*
that frame's measurement is fed back; the update applies from the next frame.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .controller import Controller, ControllerConfig, ControllerState
from .core import (
    SCENE_PREFIX,
    BBox,
    Description,
    Detection,
    DetectionSet,
    FrameMeta,
    Grounding,
    SceneSummary,
    clamp_bbox,
    iou,
    validate_detection_set,
)
from .errors import (
    AlignmentMismatch,
    BackendTimeout,
    BackendUnavailable,
    EmptyLabel,
    GeometryMismatch,
    HalluguardError,
    StageError,
    ValidationError,
    ZeroAreaRoi,
)
from .grounding import (
    GroundingMode,
    GroundingReport,
    RateEstimator,
    classify_tokens,
    default_whitelist,
    grounding_score,
)

PROMPT_TEMPLATE = "Describe the {label} in this scene based on visual evidence."
EMPTY_SCENE = SCENE_PREFIX + "nothing is detected."
OVERLAP_IOU = 0.1


# -- types -------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    """One video frame. ``truth`` is only populated by the simulator."""

    meta: FrameMeta
    pixels: object  # bytes-like or uint8 ndarray of shape (H, W, C)
    truth: tuple = ()


@dataclass(frozen=True)
class Roi:
    source_frame_id: int
    bbox: BBox
    pixels: bytes

    def __post_init__(self):
        # channels is implied by the payload length
        if len(self.pixels) % (self.bbox.w * self.bbox.h):
            raise GeometryMismatch(
                f"ROI payload of {len(self.pixels)} bytes is not a multiple of {self.bbox.w}x{self.bbox.h}"
            )

    @property
    def channels(self) -> int:
        return len(self.pixels) // (self.bbox.w * self.bbox.h)


@dataclass(frozen=True)
class Prompt:
    text: str
    label: str


@dataclass(frozen=True)
class LatencyRecord:
    dt_detect_us: int
    dt_generate_us: int
    alpha_us: int = 100
    frame_budget_us: int = 55_000

    @property
    def t_total_us(self) -> int:
        return max(self.dt_detect_us, self.dt_generate_us) + self.alpha_us

    @property
    def met_budget(self) -> bool:
        return self.t_total_us <= self.frame_budget_us

    def to_record(self) -> dict:
        return {
            "dt_detect_us": self.dt_detect_us,
            "dt_generate_us": self.dt_generate_us,
            "alpha_us": self.alpha_us,
            "t_total_us": self.t_total_us,
            "frame_budget_us": self.frame_budget_us,
            "met_budget": self.met_budget,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LatencyRecord":
        return cls(
            int(rec["dt_detect_us"]),
            int(rec["dt_generate_us"]),
            int(rec["alpha_us"]),
            int(rec["frame_budget_us"]),
        )


class Relation(str, Enum):
    LEFT_OF = "LeftOf"
    RIGHT_OF = "RightOf"
    ABOVE = "Above"
    BELOW = "Below"
    OVERLAPPING = "Overlapping"


RELATION_PHRASE = {
    Relation.LEFT_OF: "left of",
    Relation.RIGHT_OF: "right of",
    Relation.ABOVE: "above",
    Relation.BELOW: "below",
    Relation.OVERLAPPING: "overlapping",
}


@dataclass(frozen=True)
class SpatialRelation:
    subject_index: int
    object_index: int
    relation: Relation

    def __post_init__(self):
        if self.subject_index == self.object_index:
            raise ValidationError("relation subject and object must differ")


@dataclass(frozen=True)
class FrameResult:
    frame_id: int
    filtered: DetectionSet
    descriptions: tuple[Description, ...]
    report: GroundingReport
    summary: SceneSummary
    latency: LatencyRecord
    tau_after: float
    tau_used: float = math.nan
    h_t: float = math.nan

    def __post_init__(self):
        if len(self.descriptions) != len(self.filtered.detections):
            raise AlignmentMismatch(
                f"{len(self.descriptions)} descriptions for {len(self.filtered.detections)} detections"
            )

    def to_record(self, with_latency: bool = True) -> dict:
        rec = {
            "frame_id": self.frame_id,
            "filtered": self.filtered.to_record(),
            "descriptions": [d.to_record() for d in self.descriptions],
            "report": self.report.to_record(),
            "summary": self.summary.to_record(),
            "tau_used": self.tau_used,
            "tau_after": self.tau_after,
            "h_t": self.h_t,
        }
        if with_latency:
            rec["latency"] = self.latency.to_record()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "FrameResult":
        return cls(
            frame_id=int(rec["frame_id"]),
            filtered=DetectionSet.from_record(rec["filtered"]),
            descriptions=tuple(Description.from_record(d) for d in rec["descriptions"]),
            report=GroundingReport.from_record(rec["report"]),
            summary=SceneSummary.from_record(rec["summary"]),
            latency=LatencyRecord.from_record(rec["latency"]),
            tau_after=float(rec["tau_after"]),
            tau_used=float(rec["tau_used"]),
            h_t=float(rec["h_t"]),
        )

    def deterministic_record(self) -> dict:
        """Everything except wall-clock timings."""
        return self.to_record(with_latency=False)


# -- backends ----------------------------------------------------------------


@dataclass(frozen=True)
class GenerationRequest:
    """Everything a description backend may look at.

    External backends only use ``prompt`` and ``roi``; the simulator also
    reads the detection's truth tag and the filtered labels.
    """

    prompt: Prompt
    roi: Roi
    detection: Detection | None = None
    index: int = 0
    allowed_labels: frozenset = frozenset()
    frame_id: int = 0


class Detector(Protocol):
    def detect(self, frame: Frame) -> DetectionSet: ...


class DescriptionBackend(Protocol):
    def describe(self, request: GenerationRequest) -> Description: ...


# -- stage operations --------------------------------------------------------


def filter_detections(ds: DetectionSet, tau: float) -> DetectionSet:
    """Keep detections with ``confidence >= tau`` in detector order."""
    return DetectionSet(ds.frame_id, tuple(d for d in ds.detections if d.confidence >= tau))


def crop_roi(frame_pixels, meta: FrameMeta, bbox: BBox) -> Roi:
    """Slice ``bbox`` out of a row-major ``H x W x C`` byte buffer.

    Boxes reaching past the frame edge are clamped first.
    """
    if isinstance(frame_pixels, np.ndarray):
        arr = frame_pixels
        if arr.size != meta.n_bytes or arr.dtype != np.uint8:
            raise GeometryMismatch(
                f"pixel array {arr.shape}/{arr.dtype} does not match {meta.height_px}x{meta.width_px}x{meta.channels}"
            )
        arr = arr.reshape(meta.height_px, meta.width_px, meta.channels)
    else:
        buf = memoryview(frame_pixels)
        if buf.nbytes != meta.n_bytes:
            raise GeometryMismatch(f"pixel buffer has {buf.nbytes} bytes, expected {meta.n_bytes}")
        arr = np.frombuffer(buf, dtype=np.uint8).reshape(meta.height_px, meta.width_px, meta.channels)
    box = clamp_bbox(bbox.x, bbox.y, bbox.w, bbox.h, meta.width_px, meta.height_px)
    if box is None:
        raise ZeroAreaRoi(f"box {bbox} has no overlap with {meta.width_px}x{meta.height_px} frame")
    return Roi(meta.frame_id, box, arr[box.y : box.y2, box.x : box.x2].tobytes())


def build_prompt(label: str) -> Prompt:
    if not label:
        raise EmptyLabel()
    return Prompt(PROMPT_TEMPLATE.format(label=label), label)


def generate(
    backend: DescriptionBackend,
    prompt: Prompt,
    roi: Roi,
    *,
    detection: Detection | None = None,
    index: int = 0,
    allowed_labels: frozenset = frozenset(),
    retries: int = 0,
    backoff_s: float = 0.01,
) -> Description:
    """Ask ``backend`` for a description, retrying transient failures.

    Timeouts and unavailability are retried up to ``retries`` times with
    exponential backoff; malformed replies are not retried.
    """
    req = GenerationRequest(prompt, roi, detection, index, frozenset(allowed_labels), roi.source_frame_id)
    attempt = 0
    while True:
        try:
            desc = backend.describe(req)
            break
        except (BackendTimeout, BackendUnavailable):
            if attempt >= retries:
                raise
            time.sleep(backoff_s * (2**attempt))
            attempt += 1
    if desc.source_detection_index != index:
        desc = Description(index, desc.tokens)
    return desc


def _center_order(filtered: DetectionSet) -> list[int]:
    return sorted(range(len(filtered.detections)), key=lambda i: (filtered.detections[i].bbox.center[0], i))


def spatial_relations(filtered: DetectionSet, meta: FrameMeta | None = None) -> list[SpatialRelation]:
    """One relation per neighbouring pair in left-to-right center order."""
    dets = filtered.detections
    order = _center_order(filtered)
    out = []
    for a, b in zip(order, order[1:]):
        ba, bb = dets[a].bbox, dets[b].bbox
        if iou(ba, bb) > OVERLAP_IOU:
            rel = Relation.OVERLAPPING
        else:
            (ax, ay), (bx, by) = ba.center, bb.center
            dx, dy = bx - ax, by - ay
            if abs(dx) >= abs(dy):
                rel = Relation.LEFT_OF if dx >= 0 else Relation.RIGHT_OF
            else:
                rel = Relation.ABOVE if dy > 0 else Relation.BELOW
        out.append(SpatialRelation(a, b, rel))
    return out


def render_relation(rel: SpatialRelation, filtered: DetectionSet) -> str:
    subj = filtered.detections[rel.subject_index].label
    obj = filtered.detections[rel.object_index].label
    return f"the {subj} is {RELATION_PHRASE[rel.relation]} the {obj}"


def assemble_scene(
    descriptions: Sequence[Description],
    relations: Sequence[SpatialRelation],
    filtered: DetectionSet,
) -> SceneSummary:
    n = len(filtered.detections)
    if len(descriptions) != n:
        raise AlignmentMismatch(f"{len(descriptions)} descriptions for {n} filtered detections")
    for i, d in enumerate(descriptions):
        if d.source_detection_index != i:
            raise AlignmentMismatch(f"description {i} points at detection {d.source_detection_index}")
    for r in relations:
        if not (0 <= r.subject_index < n and 0 <= r.object_index < n):
            raise AlignmentMismatch(f"relation {r} indexes outside {n} detections")
    if not descriptions:
        return SceneSummary((), (), EMPTY_SCENE)
    clauses = tuple(d.text for d in descriptions)
    rels = tuple(render_relation(r, filtered) for r in relations)
    rendered = SCENE_PREFIX + "; ".join(clauses + rels) + "."
    return SceneSummary(clauses, rels, rendered)


# -- frame loop --------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    grounding_mode: GroundingMode = GroundingMode.TOKEN_LEVEL
    window_len: int = 30
    whitelist: frozenset | None = None
    vocabulary: tuple | None = None
    alpha_us: int = 100
    frame_budget_us: int = 55_000
    detect_delay_s: float = 0.0
    generate_delay_s: float = 0.0
    retries: int = 3
    backoff_s: float = 0.01
    pipelined: bool = True
    relations: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grounding_mode", GroundingMode(self.grounding_mode))


@dataclass
class Detected:
    """Hand-off between the detect stage and the describe stage."""

    frame: Frame
    detections: DetectionSet
    dt_detect_us: int


class Pipeline:
    def __init__(
        self,
        detector: Detector,
        backend: DescriptionBackend,
        config: PipelineConfig | None = None,
        state: ControllerState | None = None,
    ):
        self.detector = detector
        self.backend = backend
        self.config = config or PipelineConfig()
        self.controller = Controller(self.config.controller, state)
        self.estimator = RateEstimator(self.config.window_len)
        self.whitelist = self.config.whitelist or default_whitelist()

    @property
    def state(self) -> ControllerState:
        return self.controller.state

    def detect_stage(self, frame: Frame) -> Detected:
        t0 = time.perf_counter_ns()
        try:
            ds = self._detect_with_retry(frame)
            if self.config.vocabulary is not None:
                validate_detection_set(ds, frame.meta, self.config.vocabulary)
        except HalluguardError as exc:
            raise StageError("detect", frame.meta.frame_id, exc) from exc
        if self.config.detect_delay_s:
            time.sleep(self.config.detect_delay_s)
        return Detected(frame, ds, (time.perf_counter_ns() - t0) // 1000)

    def _detect_with_retry(self, frame: Frame) -> DetectionSet:
        attempt = 0
        while True:
            try:
                return self.detector.detect(frame)
            except (BackendTimeout, BackendUnavailable):
                if attempt >= self.config.retries:
                    raise
                time.sleep(self.config.backoff_s * (2**attempt))
                attempt += 1

    def describe_stage(self, item: Detected) -> FrameResult:
        cfg = self.config
        t0 = time.perf_counter_ns()
        frame, meta = item.frame, item.frame.meta
        fid = meta.frame_id
        tau_used = self.controller.tau

        stage = "filter"
        try:
            filtered = filter_detections(item.detections, tau_used)
            allowed = filtered.labels
            descriptions = []
            for i, det in enumerate(filtered.detections):
                stage = "crop"
                roi = crop_roi(frame.pixels, meta, det.bbox)
                stage = "prompt"
                prompt = build_prompt(det.label)
                stage = "generate"
                desc = generate(
                    self.backend,
                    prompt,
                    roi,
                    detection=det,
                    index=i,
                    allowed_labels=allowed,
                    retries=cfg.retries,
                    backoff_s=cfg.backoff_s,
                )
                if cfg.grounding_mode is not GroundingMode.ORACLE and any(
                    t.grounding is Grounding.UNKNOWN for t in desc.tokens
                ):
                    desc = classify_tokens(desc, allowed, self.whitelist)
                descriptions.append(desc)
            if cfg.generate_delay_s:
                time.sleep(cfg.generate_delay_s)

            stage = "ground"
            report = grounding_score(descriptions, allowed, cfg.grounding_mode, self.whitelist, fid)
            stage = "control"
            self.estimator.update(report.h_frame)
            new_state = self.controller.observe(self.estimator.h_t, report.gamma)
            stage = "assemble"
            rels = spatial_relations(filtered, meta) if cfg.relations else []
            summary = assemble_scene(descriptions, rels, filtered)
        except HalluguardError as exc:
            raise StageError(stage, fid, exc) from exc

        latency = LatencyRecord(
            item.dt_detect_us,
            (time.perf_counter_ns() - t0) // 1000,
            cfg.alpha_us,
            cfg.frame_budget_us,
        )
        return FrameResult(
            frame_id=fid,
            filtered=filtered,
            descriptions=tuple(descriptions),
            report=report,
            summary=summary,
            latency=latency,
            tau_after=new_state.tau,
            tau_used=tau_used,
            h_t=self.estimator.h_t,
        )

    def process_frame(self, frame: Frame) -> FrameResult:
        return self.describe_stage(self.detect_stage(frame))


def process_frame(
    frame: Frame,
    state: ControllerState,
    detector: Detector,
    backend: DescriptionBackend,
    config: PipelineConfig | None = None,
    estimator: RateEstimator | None = None,
) -> tuple[FrameResult, ControllerState]:
    """Single-frame form of :meth:`Pipeline.process_frame`.

    Pass the same ``estimator`` across calls to keep the windowed rate.
    """
    pipe = Pipeline(detector, backend, config, state)
    if estimator is not None:
        pipe.estimator = estimator
    result = pipe.process_frame(frame)
    return result, pipe.state


# -- streaming ---------------------------------------------------------------


@dataclass
class RunReport:
    n_frames: int = 0
    wall_s: float = 0.0
    steady_frame_ms: float = math.nan
    latency_mean_us: float = math.nan
    latency_p50_us: float = math.nan
    latency_p95_us: float = math.nan
    latency_p99_us: float = math.nan
    budget_met_fraction: float = math.nan
    final_tau: float = math.nan
    h_trajectory: list = field(default_factory=list)
    tau_trajectory: list = field(default_factory=list)
    pipelined: bool = True

    def to_record(self) -> dict:
        return dict(self.__dict__)

    def render(self) -> str:
        """Structured text document (one JSON object, indented)."""
        import json

        return json.dumps(self.to_record(), indent=2, allow_nan=True) + "\n"


def _steady_frame_ms(done_ns: list[int], start_ns: int) -> float:
    n = len(done_ns)
    if n == 0:
        return math.nan
    warm = min(5, n // 10)
    if n - warm < 2:
        return (done_ns[-1] - start_ns) / n / 1e6
    return (done_ns[-1] - done_ns[warm]) / (n - 1 - warm) / 1e6


_END = object()


def run_stream(
    source: Iterable[Frame],
    detector: Detector,
    backend: DescriptionBackend,
    config: PipelineConfig | None = None,
    sink: Callable[[FrameResult], None] | None = None,
    stop: threading.Event | None = None,
    pipeline: Pipeline | None = None,
) -> RunReport:
    """Process ``source`` until it is exhausted or ``stop`` is set."""
    config = config or PipelineConfig()
    pipe = pipeline or Pipeline(detector, backend, config)
    stop = stop or threading.Event()
    halt = threading.Event()  # ours; the caller's event is only read
    done_ns: list[int] = []
    totals: list[int] = []
    met = 0
    rep = RunReport(pipelined=config.pipelined)
    start = time.perf_counter_ns()

    def consume(item: Detected) -> None:
        nonlocal met
        res = pipe.describe_stage(item)
        done_ns.append(time.perf_counter_ns())
        totals.append(res.latency.t_total_us)
        met += res.latency.met_budget
        rep.h_trajectory.append(res.h_t)
        rep.tau_trajectory.append(res.tau_after)
        if sink is not None:
            sink(res)

    if not config.pipelined:
        for frame in source:
            if stop.is_set():
                break
            consume(pipe.detect_stage(frame))
    else:
        handoff: queue.Queue = queue.Queue(maxsize=2)

        def producer() -> None:
            try:
                for frame in source:
                    if stop.is_set() or halt.is_set():
                        break
                    handoff.put(pipe.detect_stage(frame))
            except BaseException as exc:  # handed to the consumer thread
                handoff.put(exc)
            finally:
                handoff.put(_END)

        worker = threading.Thread(target=producer, name="detect-stage", daemon=True)
        worker.start()
        try:
            while True:
                item = handoff.get()
                if item is _END:
                    break
                if isinstance(item, BaseException):
                    raise item
                if stop.is_set():
                    break
                consume(item)
        finally:
            halt.set()
            # drain so a blocked producer can exit
            while worker.is_alive():
                try:
                    handoff.get(timeout=0.05)
                except queue.Empty:
                    pass
            worker.join()

    rep.n_frames = len(done_ns)
    rep.wall_s = (time.perf_counter_ns() - start) / 1e9
    rep.steady_frame_ms = _steady_frame_ms(done_ns, start)
    if totals:
        arr = np.asarray(totals, dtype=float)
        rep.latency_mean_us = float(arr.mean())
        rep.latency_p50_us, rep.latency_p95_us, rep.latency_p99_us = (
            float(v) for v in np.percentile(arr, [50, 95, 99])
        )
        rep.budget_met_fraction = met / len(totals)
    rep.final_tau = pipe.state.tau
    return rep
