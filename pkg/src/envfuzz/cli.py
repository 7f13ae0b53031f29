"""Command-line front end: record, fuzz, replay, triage, import, report."""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from . import engine, recorder
from .replay import SpineMismatchError
from .targets import BUNDLED_TARGETS, TargetError, bundled_target
from .trace import (
    EtfError,
    TraceImportError,
    decode_recording,
    encode_recording,
    import_text_trace,
)


class DomainError(Exception):
    pass


def _parse_duration(text: str) -> float:
    m = re.fullmatch(r"(\d+(?:\.\d+)?)([smh]?)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r} (use e.g. 30s, 5m, 1h)")
    value = float(m.group(1))
    return value * {"": 1, "s": 1, "m": 60, "h": 3600}[m.group(2)]


def _read_file(path: str) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DomainError(f"no such file: {path}")
    return p.read_bytes()


def _load_recording(path: str):
    try:
        return decode_recording(_read_file(path))
    except EtfError as e:
        raise DomainError(f"{path}: {e}") from e


def _target_factory(name: str):
    bundled_target(name)  # fail early on unknown names
    return lambda: bundled_target(name)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envfuzz",
        description="Record a scripted target's environment interactions, "
        "then fuzz them under replay.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("record", help="run a target against an env script and save the trace")
    p.add_argument("--target", required=True, help=f"one of: {', '.join(BUNDLED_TARGETS)}")
    p.add_argument("--env-script", required=True, help="JSON env script path")
    p.add_argument("-o", "--output", required=True, help="output ETF path")

    p = sub.add_parser("fuzz", help="run a fuzzing campaign over a recording")
    p.add_argument("-i", "--input", required=True, help="input ETF recording")
    p.add_argument("--target", required=True)
    p.add_argument("--seed", type=int, default=0, help="campaign seed (default 0)")
    p.add_argument("--budget", type=_parse_duration, default=None,
                   help="wall-clock budget (e.g. 30s, 5m, 1h)")
    p.add_argument("--passes", type=int, default=None, help="number of passes over the recording")
    p.add_argument("--max-execs", type=int, default=None, help="stop after this many executions")
    p.add_argument("--no-relaxed", action="store_true",
                   help="cut branches at the first divergence instead of emulating onward")
    p.add_argument("--no-feedback", action="store_true",
                   help="disable coverage/state guidance (corpora never grow)")
    p.add_argument("-o", "--output", required=True, help="campaign output directory")

    p = sub.add_parser("replay", help="faithfully replay a recording (or reproduce a crash)")
    p.add_argument("-i", "--input", required=True, help="input ETF recording")
    p.add_argument("--target", required=True)
    p.add_argument("--crash", default=None, help="crash_<n>.json file to reproduce")

    p = sub.add_parser("triage", help="re-run every crash in a campaign directory")
    p.add_argument("dir", help="campaign output directory")

    p = sub.add_parser("import", help="convert a text trace to ETF")
    p.add_argument("--from", dest="from_format", required=True, choices=["etf-text"])
    p.add_argument("input", help="text trace path")
    p.add_argument("-o", "--output", required=True, help="output ETF path")

    p = sub.add_parser("report", help="print a campaign summary")
    p.add_argument("dir", help="campaign output directory")
    p.add_argument("--format", choices=["json", "text"], default="text")
    return parser


def _cmd_record(args) -> int:
    state = bundled_target(args.target)
    script = recorder.EnvScript.from_json(_read_file(args.env_script).decode("utf-8"))
    rec = recorder.record(state, script)
    Path(args.output).write_bytes(encode_recording(rec))
    print(f"recorded {len(rec)} records from {args.target} -> {args.output}")
    print(f"status: {rec.meta.get('status', 'unknown')}")
    return 0


def _cmd_fuzz(args) -> int:
    recording = _load_recording(args.input)
    factory = _target_factory(args.target)
    max_passes = args.passes
    if max_passes is None and args.budget is None and args.max_execs is None:
        max_passes = 1
    cfg = engine.CampaignConfig(
        seed=args.seed,
        max_passes=max_passes,
        budget_seconds=args.budget,
        max_executions=args.max_execs,
        no_relaxed=args.no_relaxed,
        no_feedback=args.no_feedback,
        out_dir=Path(args.output),
    )
    report = engine.fuzz_campaign(recording, factory, cfg)
    print(
        f"{report.executions} executions in {report.wall_seconds:.2f}s "
        f"({report.executions_per_second:.0f}/s), "
        f"{report.crashes_unique} unique crashes, "
        f"{report.coverage_slots} coverage slots"
    )
    print(f"campaign written to {args.output}")
    return 0


def _cmd_replay(args) -> int:
    recording = _load_recording(args.input)
    factory = _target_factory(args.target)
    if args.crash is not None:
        doc = json.loads(_read_file(args.crash).decode("utf-8"))
        entry = engine.crash_entry_from_json(doc)
        status = engine.reproduce_entry(recording, factory, entry)
        observed = f"{status.kind}:{status.fault or status.code}"
        if engine.status_matches(entry.fault, status):
            print(f"crash reproduced: {observed}")
            return 0
        raise DomainError(f"crash did not reproduce: expected {entry.fault}, got {observed}")
    calls, outcome = engine.replay_spine(recording, factory())
    print(
        f"replayed {len(calls)} records, 0 divergences "
        f"(status {outcome.status.kind}:{outcome.status.fault or outcome.status.code})"
    )
    return 0


def _cmd_triage(args) -> int:
    out_dir = Path(args.dir)
    if not (out_dir / "stats.json").is_file():
        raise DomainError(f"not a campaign directory: {args.dir}")
    recording, stats, entries = engine.load_campaign_dir(out_dir)
    factory = _target_factory(stats["config"]["target"])
    results = engine.triage(recording, factory, entries, stats["config"]["step_budget"])
    for r in results:
        verdict = "reproduced" if r.reproduced else "FLAKY"
        print(f"{r.name}: {r.fault} -> {r.observed} [{verdict}]")
    flaky = sum(1 for r in results if r.flaky)
    print(f"{len(results)} entries, {len(results) - flaky} reproduced, {flaky} flaky")
    return 0


def _cmd_import(args) -> int:
    text = _read_file(args.input).decode("utf-8")
    try:
        result = import_text_trace(text)
    except TraceImportError as e:
        raise DomainError(f"{args.input}: {e}") from e
    Path(args.output).write_bytes(encode_recording(result.recording))
    print(f"imported {len(result.recording)} records -> {args.output}")
    if result.unknown_syscalls:
        print(f"warning: {result.unknown_syscalls} records with unknown syscall names")
    return 0


def _cmd_report(args) -> int:
    stats_path = Path(args.dir) / "stats.json"
    if not stats_path.is_file():
        raise DomainError(f"not a campaign directory: {args.dir}")
    stats = json.loads(stats_path.read_text())
    if args.format == "json":
        print(json.dumps(stats, indent=2, sort_keys=True))
    else:
        print(engine.render_report_text(stats), end="")
    return 0


_COMMANDS = {
    "record": _cmd_record,
    "fuzz": _cmd_fuzz,
    "replay": _cmd_replay,
    "triage": _cmd_triage,
    "import": _cmd_import,
    "report": _cmd_report,
}


def run_cli(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except (DomainError, TargetError, EtfError, TraceImportError,
            SpineMismatchError, engine.CampaignConfigError,
            recorder.EnvScriptError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
