"""Seeded experiments and their report tables.

Each experiment kind turns a :class:`RunConfig` into a list of
:class:`ReportRow` plus artifact files (trajectories, a config snapshot).
Repetition ``r`` runs with seed ``config.seed + r``. Report rows hold only
quantities that are a pure function of (config, seed); wall-clock
measurements go to separate artifact files.
"""

from __future__ import annotations

import json
import math
import os
import shlex
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .config import RunConfig, load_run_config
from .controller import ControllerMode, iterate_plant, stability_analysis
from .errors import ConfigError, EmptySet, ExperimentIOError, ValidationError
from .grounding import GroundingMode
from .pipeline import PipelineConfig, run_stream
from .simworld import (
    LinearPlant,
    SimDetector,
    SimGenerator,
    Trajectory,
    closed_loop_run,
    estimate_sensitivity,
    frames,
)


class ExperimentKind(str, Enum):
    CONVERGENCE = "Convergence"
    STABILITY_BOUNDARY = "StabilityBoundary"
    ABLATION = "Ablation"
    SENSITIVITY = "Sensitivity"
    ADAPTER_RUN = "AdapterRun"
    LATENCY_MODEL = "LatencyModel"


class ReportFormat(str, Enum):
    DELIMITED_TABLE = "DelimitedTable"
    STRUCTURED_TEXT = "StructuredText"


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    kind: ExperimentKind
    base_config: str | None = None
    overrides: tuple = ()
    repetitions: int = 3
    output_dir: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "kind", ExperimentKind(self.kind))
        object.__setattr__(self, "overrides", tuple(tuple(kv) for kv in self.overrides))
        if not self.name or "/" in self.name or self.name in (".", ".."):
            raise ConfigError("must be a non-empty plain name", key="name")
        if self.repetitions < 1:
            raise ConfigError("must be >= 1", key="repetitions")

    def resolve(self) -> RunConfig:
        cfg = load_run_config(self.base_config, self.overrides)
        return replace(cfg, repetitions=self.repetitions)


@dataclass
class ReportRow:
    label: str
    gamma_mean: float
    gamma_std: float
    h_mean: float
    h_std: float
    n_runs: int = 1
    extras: dict = field(default_factory=dict)

    def check(self) -> None:
        if abs(self.gamma_mean + self.h_mean - 1.0) > 1e-9:
            raise ValidationError(f"row {self.label!r}: gamma_mean + h_mean = {self.gamma_mean + self.h_mean}")

    def to_record(self) -> dict:
        return {
            "label": self.label,
            "gamma_mean": self.gamma_mean,
            "gamma_std": self.gamma_std,
            "h_mean": self.h_mean,
            "h_std": self.h_std,
            "n_runs": self.n_runs,
            "extras": dict(self.extras),
        }


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    config: RunConfig
    rows: list[ReportRow]
    directory: Path
    artifacts: list[Path] = field(default_factory=list)


def _row(label: str, gammas: Sequence[float], hs: Sequence[float], extras: dict | None = None) -> ReportRow:
    g = np.asarray(gammas, dtype=float)
    h = np.asarray(hs, dtype=float)
    row = ReportRow(label, float(g.mean()), float(g.std()), float(h.mean()), float(h.std()), len(h), extras or {})
    row.check()
    return row


def _mean_or_nan(values: Iterable[float | None]) -> float:
    vals = list(values)
    if not vals or any(v is None for v in vals):
        return math.nan
    return float(np.mean(vals))


def _write(path: Path, text: str, artifacts: list[Path]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ExperimentIOError(exc.strerror or str(exc), path=str(path)) from exc
    artifacts.append(path)


def _trajectory_file(out: Path, label: str, seed: int, tr: Trajectory, artifacts: list[Path]) -> None:
    _write(out / "trajectories" / f"{label}_seed{seed}.tsv", tr.table(), artifacts)


# -- kinds -------------------------------------------------------------------


def _convergence(cfg: RunConfig, out: Path, artifacts: list[Path]) -> list[ReportRow]:
    gammas, hs, taus, ftc, tail_h = [], [], [], [], []
    tail = min(cfg.tail, cfg.frames)
    for r in range(cfg.repetitions):
        seed = cfg.seed + r
        tr = closed_loop_run(
            cfg.sim_for(seed), cfg.controller(), cfg.frames, None, cfg.grounding_mode, cfg.window_len, **cfg.pipeline_kw()
        )
        _trajectory_file(out, "convergence", seed, tr, artifacts)
        gammas.append(float(tr.gamma[-tail:].mean()))
        hs.append(tr.tail_mean_h_frame(tail))
        taus.append(float(tr.tau_after[-1]))
        tail_h.append(tr.tail_mean_h(tail))
        ftc.append(tr.frames_to_converge(cfg.converge_eps, cfg.converge_hold))
    extras = {
        "final_tau": float(np.mean(taus)),
        "h_t_tail_mean": float(np.mean(tail_h)),
        "residual": float(np.mean(tail_h)) - cfg.h_target,
        "frames_to_converge": _mean_or_nan(ftc),
        "frames_to_converge_max": math.nan if None in ftc else float(max(ftc)),
    }
    return [_row("convergence", gammas, hs, extras)]


def _stability(cfg: RunConfig, out: Path, artifacts: list[Path]) -> list[ReportRow]:
    tau_star = 0.5
    plant = LinearPlant(cfg.plant_beta, tau_star, cfg.h_target)
    tau0 = tau_star - cfg.e0 / cfg.plant_beta
    rows = []
    lines = ["gain\tt\ttau\th_t\te_t"]
    for gain in cfg.gain_grid:
        rep = stability_analysis(cfg.plant_beta, gain, abs(cfg.e0), cfg.eps)
        steps = 100 if rep.predicted_frames_to_eps is None else rep.predicted_frames_to_eps + 10
        hist = iterate_plant(plant, gain, cfg.h_target, tau0, steps)
        errs = [abs(rec.e_t) for rec in hist]
        hit = next((rec.t for rec, e in zip(hist, errs) if e <= cfg.eps), None)
        for rec in hist:
            lines.append(f"{gain!r}\t{rec.t}\t{rec.tau:.6g}\t{rec.h_t:.6g}\t{rec.e_t:.6g}")
        # the stub is unbounded; the row reports the rate it implies
        h_final = min(1.0, max(0.0, hist[-1].h_t))
        extras = {
            "loop_gain": rep.loop_gain,
            "classification": rep.classification.value,
            "predicted_frames_to_eps": math.nan if rep.predicted_frames_to_eps is None else rep.predicted_frames_to_eps,
            "measured_frames_to_eps": math.nan if hit is None else hit,
            "final_abs_error": errs[-1],
        }
        rows.append(_row(f"gain={gain:g}", [1.0 - h_final], [h_final], extras))
    _write(out / "trajectories" / "stability.tsv", "\n".join(lines) + "\n", artifacts)
    return rows


ABLATION_CONFIGS = ("baseline", "adaptive-only", "prompts-only", "full")


def _ablation(cfg: RunConfig, out: Path, artifacts: list[Path]) -> list[ReportRow]:
    """Four configurations, steady state taken over the second half of each run."""
    static = cfg.controller(mode=ControllerMode.STATIC)
    adaptive = cfg.controller()
    settings = {
        "baseline": (static, cfg.free_form_halluc),
        "adaptive-only": (adaptive, cfg.free_form_halluc),
        "prompts-only": (static, cfg.sim.gen_base_halluc),
        "full": (adaptive, cfg.sim.gen_base_halluc),
    }
    half = max(1, cfg.frames // 2)
    rows = []
    for label in ABLATION_CONFIGS:
        ccfg, noise = settings[label]
        gammas, hs, taus = [], [], []
        for r in range(cfg.repetitions):
            seed = cfg.seed + r
            sim = cfg.sim_for(seed, gen_base_halluc=noise)
            tr = closed_loop_run(sim, ccfg, cfg.frames, None, cfg.grounding_mode, cfg.window_len, **cfg.pipeline_kw())
            _trajectory_file(out, label, seed, tr, artifacts)
            gammas.append(float(tr.gamma[-half:].mean()))
            hs.append(tr.tail_mean_h_frame(half))
            taus.append(float(tr.tau_after[-1]))
        rows.append(_row(label, gammas, hs, {"final_tau": float(np.mean(taus)), "gen_noise": noise}))
    base = rows[0].h_mean
    for row in rows:
        row.extras["h_reduction_vs_baseline"] = 1.0 - row.h_mean / base if base > 0 else math.nan
    return rows


def _sensitivity(cfg: RunConfig, out: Path, artifacts: list[Path]) -> list[ReportRow]:
    ests = []
    for r in range(cfg.repetitions):
        seed = cfg.seed + r
        est = estimate_sensitivity(cfg.sim_for(seed), cfg.tau_grid, cfg.frames_per_point)
        _write(out / "trajectories" / f"sensitivity_seed{seed}.tsv", est.table(), artifacts)
        ests.append(est)
    betas = [e.beta_hat for e in ests]
    extras = {
        "beta_hat": float(np.mean(betas)),
        "beta_hat_std": float(np.std(betas)),
        "lipschitz_hat": float(np.max([e.lipschitz_hat for e in ests])),
    }
    rows = []
    for i, tau in enumerate(cfg.tau_grid):
        hs = [e.h_of_tau[i] for e in ests]
        rows.append(_row(f"tau={tau:g}", [1.0 - h for h in hs], hs, dict(extras)))
    return rows


def _run_sim_stream(cfg: RunConfig, seed: int, n: int, pipelined: bool, delays: bool):
    sim = cfg.sim_for(seed)
    pcfg = PipelineConfig(
        controller=cfg.controller(),
        grounding_mode=GroundingMode(cfg.grounding_mode),
        window_len=cfg.window_len,
        alpha_us=cfg.alpha_us,
        frame_budget_us=cfg.frame_budget_us,
        detect_delay_s=cfg.detect_delay_ms / 1000.0 if delays else 0.0,
        generate_delay_s=cfg.generate_delay_ms / 1000.0 if delays else 0.0,
        pipelined=pipelined,
        **cfg.pipeline_kw(),
    )
    results = []
    rep = run_stream(frames(sim, n), SimDetector(sim), SimGenerator(sim), pcfg, sink=results.append)
    return rep, results


def _latency(cfg: RunConfig, out: Path, artifacts: list[Path]) -> list[ReportRow]:
    """Modeled per-frame latency for pipelined and serial execution.

    Rows carry the modeled figures; measured wall times go to latency.json.
    """
    d, g, a = cfg.detect_delay_ms, cfg.generate_delay_ms, cfg.alpha_us / 1000.0
    modeled = {"pipelined": max(d, g) + a, "serial": d + g + a}
    n = cfg.latency_frames
    measured: dict[str, Any] = {}
    rows = []
    for label in ("pipelined", "serial"):
        gammas, hs, walls = [], [], []
        for r in range(cfg.repetitions):
            seed = cfg.seed + r
            rep, results = _run_sim_stream(cfg, seed, n, label == "pipelined", True)
            gammas.append(float(np.mean([x.report.gamma for x in results])))
            hs.append(float(np.mean([x.report.h_frame for x in results])))
            walls.append(rep.steady_frame_ms)
            rec = rep.to_record()
            rec.pop("h_trajectory")
            rec.pop("tau_trajectory")
            measured[f"{label}_seed{seed}"] = rec
        measured[f"{label}_steady_frame_ms_mean"] = float(np.mean(walls))
        extras = {
            "modeled_frame_ms": modeled[label],
            "frame_budget_ms": cfg.frame_budget_us / 1000.0,
            "modeled_within_budget": int(modeled[label] * 1000.0 <= cfg.frame_budget_us),
        }
        rows.append(_row(label, gammas, hs, extras))
    _write(out / "latency.json", json.dumps(measured, indent=2, allow_nan=True) + "\n", artifacts)
    return rows


def default_mock_command(seed: int, halluc_rate: float = 0.15) -> str:
    return shlex.join(
        [sys.executable, "-m", "halluguard.adapters.mock_peer", "--sim-seed", str(seed), "--halluc-rate", str(halluc_rate)]
    )


def _adapter(cfg: RunConfig, out: Path, artifacts: list[Path]) -> list[ReportRow]:
    """Closed loop with detector and captioner behind the wire protocol.

    With no ``adapter_address`` the bundled mock peer is started as a child
    process. Grounding is always token-level here since no truth crosses
    the wire.
    """
    from .adapters import AdapterDetector, AdapterEndpoint, AdapterGenerator, handshake

    gammas, hs, taus = [], [], []
    measured: dict[str, Any] = {}
    n = cfg.adapter_frames
    tail = min(cfg.tail, n)
    for r in range(cfg.repetitions):
        seed = cfg.seed + r
        address = cfg.adapter_address or default_mock_command(seed)
        endpoint = AdapterEndpoint(cfg.adapter_transport, address, timeout_ms=cfg.adapter_timeout_ms)
        pcfg = PipelineConfig(
            controller=cfg.controller(),
            grounding_mode=GroundingMode.TOKEN_LEVEL,
            window_len=cfg.window_len,
            alpha_us=cfg.alpha_us,
            frame_budget_us=cfg.frame_budget_us,
            pipelined=cfg.pipelined,
            **cfg.pipeline_kw(),
        )
        results = []
        with handshake(endpoint) as sess:
            rep = run_stream(
                frames(cfg.sim_for(seed), n), AdapterDetector(sess), AdapterGenerator(sess), pcfg, sink=results.append
            )
        lines = ["t\ttau\th_t\tgamma"]
        for res in results:
            lines.append(f"{res.frame_id}\t{res.tau_used:.6f}\t{res.h_t:.6f}\t{res.report.gamma:.6f}")
        _write(out / "trajectories" / f"adapter_seed{seed}.tsv", "\n".join(lines) + "\n", artifacts)
        gammas.append(float(np.mean([x.report.gamma for x in results[-tail:]])))
        hs.append(float(np.mean([x.report.h_frame for x in results[-tail:]])))
        taus.append(rep.final_tau)
        rec = rep.to_record()
        rec.pop("h_trajectory")
        rec.pop("tau_trajectory")
        measured[f"seed{seed}"] = rec
    _write(out / "latency.json", json.dumps(measured, indent=2, allow_nan=True) + "\n", artifacts)
    return [_row("adapter", gammas, hs, {"final_tau": float(np.mean(taus)), "frames": n})]


_RUNNERS = {
    ExperimentKind.CONVERGENCE: _convergence,
    ExperimentKind.STABILITY_BOUNDARY: _stability,
    ExperimentKind.ABLATION: _ablation,
    ExperimentKind.SENSITIVITY: _sensitivity,
    ExperimentKind.ADAPTER_RUN: _adapter,
    ExperimentKind.LATENCY_MODEL: _latency,
}


def run_experiment(spec: ExperimentSpec, config: RunConfig | None = None) -> ExperimentResult:
    """Run ``spec`` and write its artifacts under ``output_dir/name``.

    ``config`` bypasses file resolution (the spec's repetitions still apply).
    The directory receives ``config.ini`` (a snapshot that reproduces the
    run), ``rows.jsonl`` (full-precision rows), ``report.tsv`` or
    ``report.json``, and raw trajectories.
    """
    cfg = spec.resolve() if config is None else replace(config, repetitions=spec.repetitions)
    out = Path(spec.output_dir) / spec.name
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentIOError(exc.strerror or str(exc), path=str(out)) from exc
    if not os.access(out, os.W_OK):
        raise ExperimentIOError("output directory is not writable", path=str(out))
    artifacts: list[Path] = []
    _write(out / "config.ini", f"# experiment {spec.name} ({spec.kind.value})\n" + cfg.to_ini(), artifacts)
    rows = _RUNNERS[spec.kind](cfg, out, artifacts)
    _write(out / "rows.jsonl", "".join(json.dumps(r.to_record()) + "\n" for r in rows), artifacts)
    fmt = ReportFormat(cfg.report_format)
    report = out / ("report.tsv" if fmt is ReportFormat.DELIMITED_TABLE else "report.json")
    artifacts.append(emit_report(rows, fmt, report))
    return ExperimentResult(spec, cfg, rows, out, artifacts)


def run_batch(specs: Sequence[ExperimentSpec]) -> list[ExperimentResult]:
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError("experiment names must be unique within a batch", key=dupes[0])
    return [run_experiment(s) for s in specs]


# -- reports -----------------------------------------------------------------


def fmt6(v: Any) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _pm(mean: float, std: float, n: int) -> str:
    return fmt6(mean) if n <= 1 else f"{fmt6(mean)} ± {fmt6(std)}"


def _extra_keys(rows: Sequence[ReportRow]) -> list[str]:
    keys: list[str] = []
    for row in rows:
        for k in row.extras:
            if k not in keys:
                keys.append(k)
    return keys


def render_report(rows: Sequence[ReportRow], fmt: ReportFormat | str = ReportFormat.DELIMITED_TABLE) -> str:
    if not rows:
        raise EmptySet("no report rows")
    fmt = ReportFormat(fmt)
    for row in rows:
        row.check()
    keys = _extra_keys(rows)
    if fmt is ReportFormat.DELIMITED_TABLE:
        lines = ["\t".join(["configuration", "gamma", "h", "runs", *keys])]
        for row in rows:
            cells = [
                row.label,
                _pm(row.gamma_mean, row.gamma_std, row.n_runs),
                _pm(row.h_mean, row.h_std, row.n_runs),
                str(row.n_runs),
            ]
            cells += [fmt6(row.extras[k]) if k in row.extras else "" for k in keys]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"
    doc = []
    for row in rows:
        doc.append(
            {
                "configuration": row.label,
                "gamma": _pm(row.gamma_mean, row.gamma_std, row.n_runs),
                "h": _pm(row.h_mean, row.h_std, row.n_runs),
                "runs": row.n_runs,
                **{k: fmt6(row.extras[k]) for k in keys if k in row.extras},
            }
        )
    return json.dumps({"rows": doc}, indent=2, ensure_ascii=False) + "\n"


def emit_report(rows: Sequence[ReportRow], fmt: ReportFormat | str, path: str | Path) -> Path:
    """Write rows to ``path``; nothing is created when ``rows`` is empty."""
    text = render_report(rows, fmt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ExperimentIOError(exc.strerror or str(exc), path=str(path)) from exc
    return path
