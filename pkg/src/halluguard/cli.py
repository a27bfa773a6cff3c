"""Command-line entry point: ``halluguard <verb> [options]``.

Exit status is 0 on success, 2 for configuration errors and 3 for runtime
failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_run_config, run_keys
from .errors import ConfigError, HalluguardError, ValidationError
from .experiments import (
    ExperimentKind,
    ExperimentSpec,
    ReportFormat,
    ReportRow,
    emit_report,
    render_report,
    run_experiment,
)
from .pipeline import PipelineConfig, run_stream
from .simworld import SimDetector, SimGenerator, frames

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_VERB_KIND = {
    "converge": ExperimentKind.CONVERGENCE,
    "ablate": ExperimentKind.ABLATION,
    "sensitivity": ExperimentKind.SENSITIVITY,
    "run-adapter": ExperimentKind.ADAPTER_RUN,
    "stability": ExperimentKind.STABILITY_BOUNDARY,
    "latency": ExperimentKind.LATENCY_MODEL,
}

_HELP = {
    "simulate": "run the simulated pipeline and write per-frame results",
    "converge": "closed-loop setpoint tracking on the simulator",
    "ablate": "four-configuration ablation (baseline, adaptive-only, prompts-only, full)",
    "sensitivity": "open-loop sweep of the hallucination rate over thresholds",
    "run-adapter": "closed loop against an external detector/captioner peer",
    "stability": "loop-gain sweep on the linear plant stub",
    "latency": "pipelined versus serial latency with injected stage delays",
    "report": "re-emit report tables from finished experiments",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run settings (override the config file)")
    for key in run_keys():
        if key == "seed":
            continue
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"ov_{key}", metavar="VALUE", default=None)
    g.add_argument(
        "--sim",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="simulator setting, e.g. --sim fp_rate=0.8 (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run] and [simworld] sections")
    common.add_argument("--seed", type=int, default=None, help="base seed (repetition r uses seed + r)")
    common.add_argument("--out", default="out", help="output directory (default: out)")

    ap = _Parser(prog="halluguard", description="Hallucination-controlled perception pipeline harness.")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb, text in _HELP.items():
        p = sub.add_parser(verb, parents=[common], help=text, description=text)
        if verb == "report":
            p.add_argument("experiments", nargs="+", help="experiment directories (each holding rows.jsonl)")
            p.add_argument("--format", choices=[f.value for f in ReportFormat], default="DelimitedTable")
            p.add_argument("--output", help="write here instead of standard output")
            continue
        _add_run_options(p)
        if verb != "simulate":
            p.add_argument("--name", default=None, help="experiment name (default: the verb)")
        else:
            p.add_argument("--with-latency", action="store_true", help="include measured latency in frames.jsonl")
    return ap


def _resolve(args) -> RunConfig:
    overrides = {k[3:]: v for k, v in vars(args).items() if k.startswith("ov_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    sim = {}
    for item in args.sim:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError("expected KEY=VALUE", key=item)
        sim[key.strip()] = val.strip()
    return load_run_config(args.config, overrides, sim)


def _simulate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim_for(cfg.seed)
    pcfg = PipelineConfig(
        controller=cfg.controller(),
        grounding_mode=cfg.grounding_mode,
        window_len=cfg.window_len,
        alpha_us=cfg.alpha_us,
        frame_budget_us=cfg.frame_budget_us,
        pipelined=cfg.pipelined,
        **cfg.pipeline_kw(),
    )
    path = out / "frames.jsonl"
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    with open(path, "w", encoding="utf-8") as fh:

        def sink(res):
            rec = res.to_record() if args.with_latency else res.deterministic_record()
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

        rep = run_stream(frames(sim, cfg.frames), SimDetector(sim), SimGenerator(sim), pcfg, sink=sink)
    summary = rep.to_record()
    summary.pop("h_trajectory")
    summary.pop("tau_trajectory")
    summary["frames_file"] = str(path)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _experiment(args, cfg: RunConfig) -> int:
    kind = _VERB_KIND[args.verb]
    name = args.name or args.verb
    spec = ExperimentSpec(name, kind, args.config, (), cfg.repetitions, args.out)
    res = run_experiment(spec, cfg)
    sys.stdout.write(render_report(res.rows, cfg.report_format))
    print(f"# artifacts in {res.directory}", file=sys.stderr)
    return EXIT_OK


def _load_rows(directory: str) -> list[ReportRow]:
    path = Path(directory) / "rows.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read rows: {exc.strerror}", key=str(path)) from exc
    rows = []
    for line in lines:
        if line.strip():
            rec = json.loads(line)
            rows.append(ReportRow(**rec))
    return rows


def _report(args) -> int:
    rows = [row for d in args.experiments for row in _load_rows(d)]
    if args.output:
        emit_report(rows, args.format, args.output)
    else:
        sys.stdout.write(render_report(rows, args.format))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            return _report(args)
        cfg = _resolve(args)
        if args.verb == "simulate":
            return _simulate(args, cfg)
        return _experiment(args, cfg)
    except (ConfigError, ValidationError) as exc:
        print(f"halluguard: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HalluguardError, OSError) as exc:
        print(f"halluguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
