"""Command-line entry point: ``nirs-speech <subcommand>``.

Subcommands: synth, run-study, tune, analyze, filter-report, table1. Every
output goes to ``--out`` through atomic temp-file writes; identical config and
seed give byte-identical files. Set NIRS_SPEECH_LOG=INFO (or DEBUG) for
progress logging on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__, _io
from .analysis import (
    aggregate_table,
    check_table1,
    fisher_map_across,
    fisher_scores,
    regularization_comparison,
    study_accuracy_table,
    wilcoxon_signed_rank,
)
from .classifier import save_model
from .epoching import LabeledDataset, read_features, write_events, write_features
from .layout import load_layout
from .optics import FilterSpec, design_lowpass, filter_report, load_extinction
from .study import StudyConfig, make_schedule, recording_filename, run_study
from .synth import generate_session, load_scenario
from .tuner import GammaConstraints, select_gamma

log = logging.getLogger("nirs_speech")


def _configure_logging() -> None:
    level = os.environ.get("NIRS_SPEECH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _study_config(args: argparse.Namespace) -> StudyConfig:
    cfg = StudyConfig.from_file(args.config) if args.config else StudyConfig()
    overrides = {
        "scenario": args.scenario,
        "seed": args.seed,
        "threshold_method": args.threshold_method,
        "loading": getattr(args, "loading", None),
        "input_dir": getattr(args, "input", None),
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


def _stack(datas) -> LabeledDataset:
    out = datas[0]
    for d in datas[1:]:
        out = out.concat(d)
    return out


def cmd_synth(args) -> int:
    cfg = _study_config(args)
    out = Path(args.out)
    scenario = load_scenario(cfg.scenario)
    table = load_extinction(cfg.extinction_table)
    schedule = make_schedule(cfg.seed)
    blocks = generate_session(schedule, scenario, cfg.seed, table=table)
    events = []
    for blk in blocks:
        blk.recording.write_csv(out / recording_filename(blk.plan.session, blk.plan.block))
        events.extend(blk.events)
        log.info("wrote %s", recording_filename(blk.plan.session, blk.plan.block))
    write_events(out / "events.csv", events)
    _io.write_json(out / "ground_truth.json", {
        "seed": cfg.seed,
        "scenario": scenario.to_dict(),
        "extinction_table": table.to_dict(),
        "blocks": [blk.truth.to_dict() for blk in blocks],
    })
    print(f"synthesized {len(blocks)} blocks, {len(events)} trials -> {out}")
    return 0


def cmd_run_study(args) -> int:
    cfg = _study_config(args)
    out = Path(args.out)
    report = run_study(cfg, on_block=lambda b: log.info("%s accuracy=%s gamma=%s", b.tag, b.accuracy, b.gamma_selected))
    report.write(out)
    write_features(out / "features.csv", _stack(report.block_data))
    save_model(out / "model.json", report.final_state.model)
    for b in report.blocks:
        acc = "offline" if b.accuracy is None else f"{100 * b.accuracy:5.1f}% {b.stars}"
        print(f"{b.tag}  gamma_used={b.gamma_used}  next_gamma={b.gamma_selected}  {acc}")
    agg = report.aggregate(cfg.threshold_method)
    print(f"last 3 blocks: {100 * agg['last3_accuracy']:.1f}% {agg['last3_stars']}")
    return 0


def cmd_tune(args) -> int:
    data = read_features(args.features)
    constraints = GammaConstraints(
        session_index=2 if args.session_2_start else 1,
        first_training_of_session_2=args.session_2_start,
        previous_gamma=args.previous_gamma,
    )
    loading = args.loading if args.loading is not None else StudyConfig().loading
    outcome = select_gamma(data, constraints, loading)
    _io.write_csv(Path(args.out) / "tune.csv", ("gamma", "loocv_accuracy", "selected"), outcome.rows())
    print(f"selected gamma {outcome.gamma} (LOOCV accuracy {max(outcome.accuracies):.4f})")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    layout = load_layout(args.layout)
    payload: dict = {}
    if args.features:
        data = read_features(args.features)
        cmap = fisher_scores(data, layout)
        payload["source"] = {"kind": "features", "file": Path(args.features).name}
    else:
        cfg = _study_config(args)
        configs = [dataclasses.replace(cfg, seed=cfg.seed + i) for i in range(args.participants)]
        reports = [run_study(c) for c in configs]
        cmap = fisher_map_across([_stack(r.block_data) for r in reports], layout)
        table = study_accuracy_table(reports)
        agg = aggregate_table(table, method=cfg.threshold_method)
        payload["source"] = {"kind": "synthetic", "scenario": cfg.scenario, "seeds": [c.seed for c in configs]}
        payload["accuracy_table_pct"] = table.tolist()
        payload["aggregate"] = agg.to_dict()
        try:
            payload["first_vs_last_wilcoxon"] = wilcoxon_signed_rank(zip(table[:, -1], table[:, 0])).to_dict()
        except ValueError as exc:
            payload["first_vs_last_wilcoxon"] = {"skipped": str(exc)}
        payload["regularization"] = regularization_comparison(reports).to_dict()
    _io.write_csv(out / "channel_map.csv", cmap.COLUMNS, cmap.rows())
    payload["top_channels"] = cmap.top(5)
    _io.write_json(out / "analysis.json", payload)
    print("top channels by Fisher score:", ", ".join(str(c) for c in cmap.top(5)))
    return 0


def cmd_filter_report(args) -> int:
    spec = FilterSpec()
    rows, summary = filter_report(design_lowpass(spec), step_hz=args.step)
    out = Path(args.out)
    _io.write_csv(out / "filter_response.csv", ("frequency_hz", "magnitude_db", "phase_deg"), rows)
    _io.write_json(out / "filter_summary.json", summary)
    print(f"DC gain {summary['dc_gain_db']:.3g} dB, droop at {spec.passband_hz} Hz "
          f"{summary['passband_droop_db']:.3f} dB, min stopband attenuation "
          f"{summary['min_stopband_attenuation_db']:.3f} dB")
    return 0


def cmd_table1(args) -> int:
    checks = check_table1()
    failed = 0
    for c in checks:
        status = "PASS" if c.passed else ("FAIL" if c.asserted else "DIFF")
        failed += c.asserted and not c.passed
        print(f"{status}  {c.name:32s} printed={c.printed}  computed={c.computed}")
    if args.out:
        _io.write_csv(Path(args.out) / "table1_check.csv", ("check", "printed", "computed", "passed", "asserted"),
                      [(c.name, c.printed, c.computed, int(c.passed), int(c.asserted)) for c in checks])
    print(f"{sum(c.asserted for c in checks) - failed}/{sum(c.asserted for c in checks)} asserted checks pass; "
          f"{sum(not c.asserted and not c.passed for c in checks)} per-block star differences reported")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="study config JSON")
    common.add_argument("--seed", type=int, help="root seed (u64)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--scenario", help="bundled scenario name or scenario JSON path")
    common.add_argument("--threshold-method", choices=("normal", "exact"))

    parser = argparse.ArgumentParser(prog="nirs-speech", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic recording set")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run-study", parents=[common], help="simulate the seven-block online study")
    p.add_argument("--input", metavar="DIR", help="directory with events.csv and recording_s*b*.csv")
    p.add_argument("--loading", type=float)
    p.set_defaults(func=cmd_run_study)

    p = sub.add_parser("tune", parents=[common], help="LOOCV gamma table for a feature dump")
    p.add_argument("--features", required=True, metavar="CSV")
    p.add_argument("--previous-gamma", type=float)
    p.add_argument("--session-2-start", action="store_true")
    p.add_argument("--loading", type=float)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("analyze", parents=[common], help="Fisher channel map, Wilcoxon and regularization comparison")
    p.add_argument("--features", metavar="CSV", help="analyze a feature dump instead of simulating")
    p.add_argument("--participants", type=int, default=3, help="simulated participants (seeds seed..seed+n-1)")
    p.add_argument("--layout", metavar="PATH")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("filter-report", parents=[common], help="frequency response of the low-pass filter")
    p.add_argument("--step", type=float, default=0.01, help="frequency step in Hz")
    p.set_defaults(func=cmd_filter_report)

    p = sub.add_parser("table1", parents=[common], help="recompute the published accuracy table aggregates")
    p.set_defaults(func=cmd_table1, out=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError, KeyError) as exc:
        print(f"nirs-speech {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
