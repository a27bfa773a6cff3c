"""Synthetic scenes, detector and captioner.

The simulator gives the threshold controller a plant whose hallucination
rate genuinely falls as the threshold rises: false-positive detections carry
lower confidences than true ones, and a description of a false positive
names things that are not in the scene. A small base rate of generator
noise adds hallucinated words to otherwise correct descriptions.

Every random draw comes from a generator keyed on ``(seed, frame_id, ...)``,
so a frame is reproduced exactly no matter which threshold filtered it.
Sweeps over thresholds therefore use common random numbers, which keeps
finite-difference slope estimates tight.
"""

from __future__ import annotations

import configparser
import functools
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .controller import Controller, ControllerConfig, ControllerMode
from .core import BBox, Description, Detection, DetectionSet, FrameMeta, Grounding, Token, TruthTag, load_vocabulary
from .errors import ConfigError, InsufficientSamples, ValidationError
from .grounding import GroundingMode, allowed_words, default_whitelist
from .pipeline import Frame, GenerationRequest, Pipeline, PipelineConfig

_STREAM_FRAME = 0
_STREAM_DETECT = 1
_STREAM_GENERATE = 2

# sentence scaffolding; every word must be on the template whitelist
_LEAD = ("there", "is", "a")
_TAIL = ("in", "the", "scene", "with", "visual", "evidence", "of", "this", "image", "near", "the", "scene")
# fallback hallucination vocabulary for scenes that cover every class word
_PHANTOMS = ("unicorn", "dragon", "spaceship", "volcano", "waterfall", "castle")


@dataclass(frozen=True)
class TruthObject:
    label: str
    bbox: BBox


@dataclass(frozen=True)
class SimWorldConfig:
    seed: int = 0
    vocab: tuple | None = None
    objects_per_frame: tuple = (1, 6)
    frame_size: tuple = (640, 480)
    channels: int = 3
    tp_conf: tuple = (8.0, 2.0)
    fp_conf: tuple = (2.0, 5.0)
    fp_rate: float = 1.5
    gen_base_halluc: float = 0.02
    tokens_per_description: tuple = (5, 12)
    detect_prob: float = 0.95
    min_box: int = 8

    def __post_init__(self):
        for name in ("objects_per_frame", "frame_size", "tp_conf", "fp_conf", "tokens_per_description"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.vocab is not None:
            object.__setattr__(self, "vocab", tuple(self.vocab))
        if not (0 <= self.seed < 2**64):
            raise ValidationError("seed must be a non-negative 64-bit integer")
        for name in ("gen_base_halluc", "detect_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if min(self.tp_conf) <= 0 or min(self.fp_conf) <= 0:
            raise ValidationError("Beta parameters must be positive")
        if self.fp_rate < 0:
            raise ValidationError("fp_rate must be >= 0")
        lo, hi = self.objects_per_frame
        if not (0 <= lo <= hi):
            raise ValidationError(f"bad objects_per_frame {self.objects_per_frame}")
        lo, hi = self.tokens_per_description
        if not (len(_LEAD) + 2 <= lo <= hi):
            raise ValidationError(f"tokens_per_description must start at >= {len(_LEAD) + 2}")
        w, h = self.frame_size
        if w < self.min_box or h < self.min_box or self.min_box < 1:
            raise ValidationError("frame smaller than min_box")

    @property
    def labels(self) -> tuple[str, ...]:
        return self.vocab if self.vocab is not None else _coco()

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["vocab"] = None if self.vocab is None else list(self.vocab)
        return rec


@functools.lru_cache(maxsize=None)
def _coco() -> tuple[str, ...]:
    return load_vocabulary()


@functools.lru_cache(maxsize=64)
def _hallucination_pool(labels: tuple[str, ...]) -> tuple[str, ...]:
    wl = default_whitelist()
    words = {w for lab in labels for w in lab.lower().split()} | set(_PHANTOMS)
    return tuple(sorted(w for w in words if w not in wl))


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


# -- calibration fixture -----------------------------------------------------


def load_sim_config(path: str | Path | None = None, section: str = "simworld") -> SimWorldConfig:
    """Read a :class:`SimWorldConfig` from an INI file.

    ``None`` loads the committed calibration fixture.
    """
    parser = configparser.ConfigParser()
    if path is None:
        from importlib import resources

        parser.read_string(resources.files("halluguard.data").joinpath("calibrated.ini").read_text("utf-8"))
    else:
        if not parser.read(path):
            raise ConfigError("cannot read file", key=str(path))
    if not parser.has_section(section):
        raise ConfigError(f"missing [{section}] section")
    return sim_config_from_mapping(dict(parser.items(section)))


_TUPLE_FIELDS = {"objects_per_frame", "frame_size", "tp_conf", "fp_conf", "tokens_per_description"}
_INT_TUPLES = {"objects_per_frame", "frame_size", "tokens_per_description"}


def sim_config_from_mapping(raw: dict, base: SimWorldConfig | None = None) -> SimWorldConfig:
    """Build a config from string values, e.g. ``{"fp_conf": "3, 4"}``."""
    known = {f.name: f for f in fields(SimWorldConfig)}
    kw = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError("unknown simworld key", key=key)
        try:
            if key in _TUPLE_FIELDS:
                parts = [p.strip() for p in str(val).split(",") if p.strip()]
                conv = int if key in _INT_TUPLES else float
                kw[key] = tuple(conv(p) for p in parts)
            elif key == "vocab":
                kw[key] = None if str(val).strip() in ("", "coco") else tuple(load_vocabulary(val))
            elif key in ("seed", "channels", "min_box"):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value {val!r}: {exc}", key=key) from exc
    try:
        return replace(base, **kw) if base is not None else SimWorldConfig(**kw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def calibrated_config(**overrides) -> SimWorldConfig:
    """The committed calibration fixture, with optional field overrides."""
    return replace(load_sim_config(), **overrides)


# -- frames ------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _gradient(width: int, height: int, channels: int) -> np.ndarray:
    ys = np.arange(height, dtype=np.uint32)[:, None, None]
    xs = np.arange(width, dtype=np.uint32)[None, :, None]
    cs = np.arange(channels, dtype=np.uint32)[None, None, :]
    g = (xs + 2 * ys + 85 * cs) % 256
    g = g.astype(np.uint8)
    g.setflags(write=False)
    return g


def frame_pixels(cfg: SimWorldConfig, frame_id: int) -> np.ndarray:
    """Procedural gradient, a pure function of ``(seed, frame_id)``."""
    w, h = cfg.frame_size
    shift = np.uint8((cfg.seed * 31 + frame_id * 7) % 256)
    out = _gradient(w, h, cfg.channels) + shift  # uint8 arithmetic wraps
    out.setflags(write=False)
    return out


def _random_box(rng: np.random.Generator, width: int, height: int, min_box: int) -> BBox:
    bw = int(rng.integers(min_box, max(min_box, width // 3) + 1))
    bh = int(rng.integers(min_box, max(min_box, height // 3) + 1))
    x = int(rng.integers(0, width - bw + 1))
    y = int(rng.integers(0, height - bh + 1))
    return BBox(x, y, bw, bh)


def gen_frame(rng: np.random.Generator, cfg: SimWorldConfig, frame_id: int):
    """Sample ``(FrameMeta, truth objects, pixels)`` for one frame."""
    w, h = cfg.frame_size
    lo, hi = cfg.objects_per_frame
    n = int(rng.integers(lo, hi + 1))
    labels = cfg.labels
    truth = tuple(
        TruthObject(labels[int(rng.integers(len(labels)))], _random_box(rng, w, h, cfg.min_box)) for _ in range(n)
    )
    meta = FrameMeta(frame_id, w, h, cfg.channels, timestamp_us=frame_id * 55_000)
    return meta, truth, frame_pixels(cfg, frame_id)


def make_frame(cfg: SimWorldConfig, frame_id: int) -> Frame:
    meta, truth, pixels = gen_frame(keyed_rng(cfg.seed, frame_id, _STREAM_FRAME), cfg, frame_id)
    return Frame(meta, pixels, truth)


def frames(cfg: SimWorldConfig, n_frames: int, start: int = 0) -> Iterator[Frame]:
    for fid in range(start, start + n_frames):
        yield make_frame(cfg, fid)


# -- detector ----------------------------------------------------------------


def simulate_detector(
    truth: Sequence[TruthObject], cfg: SimWorldConfig, rng: np.random.Generator, frame_id: int = 0
) -> DetectionSet:
    dets = []
    a, b = cfg.tp_conf
    for obj in truth:
        if rng.random() < cfg.detect_prob:
            dets.append(Detection(obj.bbox, obj.label, float(rng.beta(a, b)), TruthTag.TRUE_POSITIVE))
    n_fp = int(rng.poisson(cfg.fp_rate)) if cfg.fp_rate > 0 else 0
    w, h = cfg.frame_size
    labels = cfg.labels
    a, b = cfg.fp_conf
    for _ in range(n_fp):
        label = labels[int(rng.integers(len(labels)))]
        box = _random_box(rng, w, h, cfg.min_box)
        dets.append(Detection(box, label, float(rng.beta(a, b)), TruthTag.FALSE_POSITIVE))
    order = rng.permutation(len(dets)) if dets else ()
    return DetectionSet(frame_id, tuple(dets[i] for i in order))


class SimDetector:
    def __init__(self, cfg: SimWorldConfig):
        self.cfg = cfg

    def detect(self, frame: Frame) -> DetectionSet:
        fid = frame.meta.frame_id
        return simulate_detector(frame.truth, self.cfg, keyed_rng(self.cfg.seed, fid, _STREAM_DETECT), fid)


# -- generator ---------------------------------------------------------------


def _ungrounded_word(rng: np.random.Generator, cfg: SimWorldConfig, taken: frozenset[str]) -> str:
    pool = _hallucination_pool(cfg.labels)
    cands = [w for w in pool if w not in taken]
    if not cands:
        cands = [w for w in _PHANTOMS if w not in taken]
    return cands[int(rng.integers(len(cands)))]


def simulate_generator(
    detection: Detection,
    cfg: SimWorldConfig,
    rng: np.random.Generator,
    scene_labels=frozenset(),
    index: int = 0,
) -> Description:
    """Describe one detection with oracle grounding tags.

    ``scene_labels`` are the filtered labels of the frame; hallucinated words
    are always drawn from outside them so word matching agrees with the tags.
    """
    lo, hi = cfg.tokens_per_description
    n = int(rng.integers(lo, hi + 1))
    noisy = rng.random() < cfg.gen_base_halluc
    taken = allowed_words(set(scene_labels) | {detection.label})

    label_words = detection.label.lower().split()
    if detection.truth_tag is TruthTag.FALSE_POSITIVE:
        content = [Token(_ungrounded_word(rng, cfg, taken), Grounding.UNGROUNDED) for _ in label_words]
    else:
        content = [Token(w, Grounding.GROUNDED) for w in label_words]

    tail_len = max(1, n - len(_LEAD) - len(content))
    toks = [Token(w, Grounding.TEMPLATE) for w in _LEAD]
    toks += content
    toks += [Token(_TAIL[i % len(_TAIL)], Grounding.TEMPLATE) for i in range(tail_len)]

    if noisy and detection.truth_tag is not TruthTag.FALSE_POSITIVE:
        slots = [i for i, t in enumerate(toks) if t.grounding is Grounding.TEMPLATE]
        pos = slots[int(rng.integers(len(slots)))]
        toks[pos] = Token(_ungrounded_word(rng, cfg, taken), Grounding.UNGROUNDED)
    return Description(index, tuple(toks))


class SimGenerator:
    """Description backend backed by :func:`simulate_generator`.

    The generator stream is keyed on the detection's box so a detection gets
    the same description whatever else survived the filter.
    """

    def __init__(self, cfg: SimWorldConfig):
        self.cfg = cfg

    def describe(self, request: GenerationRequest) -> Description:
        det = request.detection
        if det is None:
            raise ValidationError("simulated generator needs the source detection")
        b = det.bbox
        rng = keyed_rng(self.cfg.seed, request.frame_id, _STREAM_GENERATE, b.x, b.y, b.w, b.h)
        return simulate_generator(det, self.cfg, rng, request.allowed_labels, request.index)


def sim_pipeline(
    cfg: SimWorldConfig,
    controller_cfg: ControllerConfig | None = None,
    grounding_mode: GroundingMode = GroundingMode.ORACLE,
    window_len: int = 30,
    **pipeline_kw,
) -> Pipeline:
    pcfg = PipelineConfig(
        controller=controller_cfg or ControllerConfig(),
        grounding_mode=grounding_mode,
        window_len=window_len,
        **pipeline_kw,
    )
    return Pipeline(SimDetector(cfg), SimGenerator(cfg), pcfg)


# -- plant identification ----------------------------------------------------


@dataclass(frozen=True)
class LinearPlant:
    """``h(tau) = h_target + beta * (tau_star - tau)``, unclipped."""

    beta: float
    tau_star: float
    h_target: float = 0.1

    def __call__(self, tau: float) -> float:
        return self.h_target + self.beta * (self.tau_star - tau)


@dataclass(frozen=True)
class SensitivityEstimate:
    tau_grid: tuple[float, ...]
    h_of_tau: tuple[float, ...]
    beta_hat: float
    lipschitz_hat: float
    h_std: tuple[float, ...] = ()

    def table(self, sep: str = "\t") -> str:
        lines = [sep.join(("tau", "h", "h_std"))]
        stds = self.h_std or (math.nan,) * len(self.tau_grid)
        for t, h, s in zip(self.tau_grid, self.h_of_tau, stds):
            lines.append(sep.join((f"{t:.6f}", f"{h:.6f}", f"{s:.6f}")))
        return "\n".join(lines) + "\n"


def open_loop_h(
    cfg: SimWorldConfig,
    tau: float,
    n_frames: int,
    grounding_mode: GroundingMode = GroundingMode.ORACLE,
    start: int = 0,
) -> np.ndarray:
    """Per-frame hallucination rates with the threshold pinned at ``tau``."""
    ccfg = ControllerConfig(mode=ControllerMode.STATIC, tau_init=tau, tau_min=0.0, tau_max=1.0)
    pipe = sim_pipeline(cfg, ccfg, grounding_mode, relations=False)
    return np.array([pipe.process_frame(f).report.h_frame for f in frames(cfg, n_frames, start)])


def estimate_sensitivity(
    cfg: SimWorldConfig,
    tau_grid: Sequence[float],
    frames_per_point: int = 1000,
    plant: Callable[[float], float] | None = None,
) -> SensitivityEstimate:
    """Measure steady-state ``h(tau)`` on a grid and its slope.

    ``beta_hat`` is the magnitude of the central difference around the grid
    midpoint; ``lipschitz_hat`` the steepest adjacent-pair slope. Pass
    ``plant`` to identify a deterministic stand-in instead of the simulator.
    """
    grid = [float(t) for t in tau_grid]
    if len(grid) < 3:
        raise InsufficientSamples("tau grid needs at least 3 points")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("tau grid must be strictly ascending")
    if plant is None:
        if frames_per_point < 1000:
            raise InsufficientSamples(f"frames_per_point={frames_per_point} < 1000")
        if not all(0.0 < t < 1.0 for t in grid):
            raise ValidationError("simulated tau grid must lie in (0, 1)")
        runs = [open_loop_h(cfg, t, frames_per_point) for t in grid]
        hs = [float(r.mean()) for r in runs]
        sds = tuple(float(r.std()) for r in runs)
    else:
        hs = [float(plant(t)) for t in grid]
        sds = ()
    m = len(grid) // 2
    beta_hat = abs((hs[m + 1] - hs[m - 1]) / (grid[m + 1] - grid[m - 1]))
    slopes = [abs((hs[i + 1] - hs[i]) / (grid[i + 1] - grid[i])) for i in range(len(grid) - 1)]
    return SensitivityEstimate(tuple(grid), tuple(hs), beta_hat, max(slopes), sds)


# -- closed loop -------------------------------------------------------------


@dataclass
class Trajectory:
    """Per-frame closed-loop record.

    ``tau[t]`` is the threshold that filtered frame ``t``; ``h_t[t]`` the
    windowed estimate after frame ``t`` and ``e_t = h_t - h_target``.
    """

    h_target: float
    t: np.ndarray
    tau: np.ndarray
    h_t: np.ndarray
    e_t: np.ndarray
    tau_after: np.ndarray
    gamma: np.ndarray
    h_frame: np.ndarray

    def tail_mean_h(self, n: int = 300) -> float:
        return float(self.h_t[-n:].mean())

    def tail_mean_h_frame(self, n: int = 300) -> float:
        return float(self.h_frame[-n:].mean())

    def frames_to_converge(self, eps: float = 0.03, hold: int = 200) -> int | None:
        """Frames until the ``hold``-frame trailing mean of ``e_t`` enters
        ``[-eps, eps]`` for good.

        Returns the index of the first frame from which the trailing mean
        stays inside the band up to the end of the run, or ``None`` if the
        run is shorter than ``hold`` or ends outside the band.
        """
        n = len(self.e_t)
        if n < hold:
            return None
        csum = np.concatenate(([0.0], np.cumsum(self.e_t)))
        ma = (csum[hold:] - csum[:-hold]) / hold  # ma[k] covers frames k .. k+hold-1
        outside = np.flatnonzero(np.abs(ma) > eps)
        if outside.size == 0:
            return hold - 1
        last = int(outside[-1])
        if last == len(ma) - 1:
            return None
        return last + hold

    def table(self, sep: str = "\t") -> str:
        lines = [sep.join(("t", "tau", "h_t", "e_t"))]
        for row in zip(self.t, self.tau, self.h_t, self.e_t):
            lines.append(sep.join((str(int(row[0])), *(f"{v:.6f}" for v in row[1:]))))
        return "\n".join(lines) + "\n"


def closed_loop_run(
    cfg: SimWorldConfig,
    controller_cfg: ControllerConfig,
    n_frames: int,
    plant: Callable[[float], float] | None = None,
    grounding_mode: GroundingMode = GroundingMode.ORACLE,
    window_len: int = 30,
    **pipeline_kw,
) -> Trajectory:
    """Run the feedback loop for ``n_frames`` frames.

    With ``plant`` the measured rate is ``plant(tau)`` directly (no window);
    otherwise the full pipeline runs over simulated frames.
    """
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    n = n_frames
    tau = np.empty(n)
    tau_after = np.empty(n)
    h_t = np.empty(n)
    gamma = np.empty(n)
    h_frame = np.empty(n)
    if plant is not None:
        ctl = Controller(controller_cfg)
        for i in range(n):
            tau[i] = ctl.tau
            h = min(1.0, max(0.0, float(plant(ctl.tau))))
            st = ctl.observe(h, 1.0 - h)
            h_t[i] = h_frame[i] = h
            gamma[i] = 1.0 - h
            tau_after[i] = st.tau
    else:
        pipe = sim_pipeline(cfg, controller_cfg, grounding_mode, window_len, **pipeline_kw)
        for i, fr in enumerate(frames(cfg, n)):
            res = pipe.process_frame(fr)
            tau[i] = res.tau_used
            tau_after[i] = res.tau_after
            h_t[i] = res.h_t
            gamma[i] = res.report.gamma
            h_frame[i] = res.report.h_frame
    return Trajectory(
        controller_cfg.h_target,
        np.arange(n),
        tau,
        h_t,
        h_t - controller_cfg.h_target,
        tau_after,
        gamma,
        h_frame,
    )
