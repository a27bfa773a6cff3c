"""Run configuration for the experiment harness.

A run is described by an INI file with a ``[run]`` section (keys below) and
an optional ``[simworld]`` section overriding the calibrated simulator.
Values resolve in the order built-in defaults, calibration fixture, config
file, then explicit overrides (command-line flags).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .controller import ControllerConfig, ControllerMode
from .core import load_vocabulary, load_whitelist
from .errors import ConfigError, ValidationError
from .grounding import GroundingMode
from .simworld import SimWorldConfig, calibrated_config, sim_config_from_mapping


def _ablation_default() -> float:
    from importlib import resources

    parser = configparser.ConfigParser()
    parser.read_string(resources.files("halluguard.data").joinpath("calibrated.ini").read_text("utf-8"))
    return parser.getfloat("ablation", "free_form_halluc")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    frames: int = 2000
    repetitions: int = 3
    # controller
    gain: float = 0.05
    h_target: float = 0.1
    tau_init: float = 0.5
    tau_min: float = 0.05
    tau_max: float = 0.95
    controller_mode: str = "Proportional"
    delta: float = 0.01
    gamma_threshold: float = 0.85
    decay: float = 0.0
    # measurement
    grounding_mode: str = "Oracle"
    window_len: int = 30
    tail: int = 300
    converge_eps: float = 0.03
    converge_hold: int = 200
    vocabulary_path: str = ""  # empty: built-in COCO names
    whitelist_path: str = ""  # empty: built-in template words
    # ablation
    free_form_halluc: float = field(default_factory=_ablation_default)
    # sensitivity / stability
    tau_grid: tuple = (0.4, 0.45, 0.5, 0.55, 0.6)
    frames_per_point: int = 1000
    plant_beta: float = 0.1
    gain_grid: tuple = (0.05, 1.0, 10.0, 20.0, 25.0)
    e0: float = 0.18
    eps: float = 0.01
    # latency
    detect_delay_ms: float = 20.0
    generate_delay_ms: float = 30.0
    alpha_us: int = 100
    frame_budget_us: int = 55_000
    pipelined: bool = True
    latency_frames: int = 200
    # adapters
    adapter_transport: str = "ChildProcessPipes"
    adapter_address: str = ""
    adapter_timeout_ms: int = 2000
    adapter_frames: int = 300
    # output
    report_format: str = "DelimitedTable"
    sim: SimWorldConfig = field(default_factory=calibrated_config)

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("must be >= 1", key="frames")
        if self.repetitions < 1:
            raise ConfigError("must be >= 1", key="repetitions")
        for key in ("tail", "converge_hold", "window_len", "frames_per_point", "latency_frames", "adapter_frames"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", key=key)
        if self.seed < 0:
            raise ConfigError("must be >= 0", key="seed")
        for key, enum in (("controller_mode", ControllerMode), ("grounding_mode", GroundingMode)):
            try:
                enum(getattr(self, key))
            except ValueError as exc:
                raise ConfigError(str(exc), key=key) from exc
        if self.adapter_transport not in ("ChildProcessPipes", "TcpSocket"):
            raise ConfigError("expected ChildProcessPipes or TcpSocket", key="adapter_transport")
        if self.adapter_timeout_ms < 1:
            raise ConfigError("must be >= 1", key="adapter_timeout_ms")
        if self.report_format not in ("DelimitedTable", "StructuredText"):
            raise ConfigError("expected DelimitedTable or StructuredText", key="report_format")
        try:
            self.controller()
        except ValidationError as exc:
            raise ConfigError(str(exc), key="controller") from exc

    def controller(self, **overrides) -> ControllerConfig:
        kw = dict(
            gain=self.gain,
            h_target=self.h_target,
            tau_init=self.tau_init,
            tau_min=self.tau_min,
            tau_max=self.tau_max,
            mode=self.controller_mode,
            delta=self.delta,
            gamma_threshold=self.gamma_threshold,
            decay=self.decay,
        )
        kw.update(overrides)
        return ControllerConfig(**kw)

    def pipeline_kw(self) -> dict:
        """Whitelist / vocabulary settings for :class:`PipelineConfig`."""
        kw = {}
        try:
            if self.whitelist_path:
                kw["whitelist"] = load_whitelist(self.whitelist_path)
            if self.vocabulary_path:
                kw["vocabulary"] = load_vocabulary(self.vocabulary_path)
        except OSError as exc:
            raise ConfigError(f"cannot read list file: {exc.strerror}", key=exc.filename) from exc
        return kw

    def sim_for(self, seed: int, **overrides) -> SimWorldConfig:
        return replace(self.sim, seed=seed, **overrides)

    def to_ini(self) -> str:
        """Snapshot that :func:`load_run_config` reads back to an equal config."""
        parser = configparser.ConfigParser()
        run = {k: v for k, v in asdict(self).items() if k != "sim"}
        parser["run"] = {k: _fmt(v) for k, v in run.items()}
        sim = self.sim.to_record()
        parser["simworld"] = {k: _fmt(v) for k, v in sim.items() if v is not None}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _fmt(v: Any) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "sim"}
_FLOAT_TUPLES = {"tau_grid", "gain_grid"}


def run_keys() -> list[str]:
    return list(_RUN_FIELDS)


def _convert(key: str, raw: Any) -> Any:
    default = RunConfig.__dataclass_fields__[key].default
    try:
        if key in _FLOAT_TUPLES:
            if isinstance(raw, str):
                raw = [p for p in raw.split(",") if p.strip()]
            return tuple(float(p) for p in raw)
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, str):
            return str(raw)
        return float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {raw!r}: {exc}", key=key) from exc


def load_run_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | Iterable[tuple[str, Any]] = (),
    sim_overrides: Mapping[str, Any] | Iterable[tuple[str, Any]] = (),
) -> RunConfig:
    """Resolve a :class:`RunConfig`.

    ``overrides`` use ``[run]`` key names; ``sim_overrides`` use
    ``[simworld]`` key names. Both win over the file.
    """
    run_raw: dict[str, Any] = {}
    sim_raw: dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc.strerror}", key=str(path)) from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}", key=str(path)) from exc
        extra = set(parser.sections()) - {"run", "simworld"}
        if extra:
            raise ConfigError("unknown section", key=sorted(extra)[0])
        if parser.has_section("run"):
            run_raw.update(parser.items("run"))
        if parser.has_section("simworld"):
            sim_raw.update(parser.items("simworld"))
    run_raw.update(dict(overrides))
    sim_raw.update(dict(sim_overrides))

    kw = {}
    for key, raw in run_raw.items():
        if key not in _RUN_FIELDS:
            raise ConfigError("unknown run key", key=key)
        kw[key] = _convert(key, raw)
    sim = sim_config_from_mapping({k: str(v) for k, v in sim_raw.items()}, base=calibrated_config())
    if "seed" in kw:
        sim = replace(sim, seed=kw["seed"])
    elif "seed" in sim_raw:
        kw["seed"] = sim.seed
    try:
        return RunConfig(sim=sim, **kw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
