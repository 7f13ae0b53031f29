"""The fuzzing campaign: faithful spine, snapshot-isolated mutant branches.

Each pass walks the recording in order. Non-input records are replayed
faithfully. At every input record the engine schedules each corpus seed
with its energy, mutates it, snapshots the target, runs the mutant to
completion in an isolated branch under relaxed replay, then grows the
spine by replaying the original record, so no prefix is ever re-executed
within a pass. Crashing or hanging branches are persisted as
self-contained reproducers; interesting branches grow the seed corpus.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .feedback import (
    CoverageMap,
    FeedbackState,
    bucket_counts,
    edge_slot,
    fold_counts,
    fold_edges,
    state_signature,
)
from ._hash import fnv1a64
from .mutation import Rng, energy, mutate, seed_for
from .replay import (
    BranchSession,
    DivergenceLog,
    NoRelaxedSession,
    SpineMismatchError,
    faithful_step,
    partition_io,
)
from .targets import EnvCall, Status, TargetOutcome, TargetState
from .trace import (
    CrashEntry,
    Record,
    Recording,
    SeedCorpus,
    SyscallClass,
    decode_recording,
    encode_recording,
    init_corpora,
)

DEFAULT_STEP_BUDGET = 1_000_000
FURTHER_MUTATION_ONE_IN = 4


class CampaignConfigError(ValueError):
    pass


class _BudgetExhausted(Exception):
    pass


class _ForkPrefix:
    """Precomputed work shared by every branch forked at one spine point:
    prefix coverage counts, prefix state ids, and the suffix partition."""

    __slots__ = ("edge_count", "slot_counts", "output_count", "states", "partition")

    def __init__(self, state: TargetState, fb: FeedbackState, suffix: list[Record]):
        self.edge_count = len(state.edges)
        self.slot_counts = fold_counts(state.edges)
        self.output_count = len(state.outputs)
        self.states = fb.states_for(state.outputs)
        self.partition = partition_io(suffix)


@dataclass
class CampaignConfig:
    seed: int = 0
    max_passes: int | None = 1
    budget_seconds: float | None = None
    max_executions: int | None = None
    step_budget: int = DEFAULT_STEP_BUDGET
    no_relaxed: bool = False
    no_feedback: bool = False
    out_dir: Path | None = None

    def validate(self) -> None:
        if self.max_passes is None and self.budget_seconds is None and self.max_executions is None:
            raise CampaignConfigError("campaign needs a pass, time, or execution budget")


@dataclass
class ExecOutcome:
    """Everything observed from one branch execution."""

    status: Status
    coverage: CoverageMap
    states: list[int]
    divergence: DivergenceLog
    mutated_payloads: dict[int, bytes]
    tail_edges: tuple[int, ...]


@dataclass
class CampaignReport:
    passes: int
    executions: int
    spine_executions: int
    branch_executions: int
    executions_per_second: float
    wall_seconds: float
    crashes_unique: int
    crashes_total: int
    crashes_by_fault: dict[str, int]
    corpus_sizes: dict[int, int]
    coverage_slots: int
    states: int
    transitions: int
    divergence: dict[str, int]
    prefix_reexecutions: int
    spine_records: int
    crash_entries: list[CrashEntry] = field(default_factory=list)
    started_unix_ms: int = 0


def replay_spine(
    recording: Recording, state: TargetState, step_budget: int = DEFAULT_STEP_BUDGET
) -> tuple[list[EnvCall], TargetOutcome]:
    """Faithfully replay a whole recording against a fresh target state.

    Returns the env-call sequence and the final outcome. A truncated
    recording (cut at its own recording budget) replays as hung once the
    records run out.
    """
    records = recording.records
    reply = None
    pos = 0
    calls: list[EnvCall] = []
    for _ in range(max(step_budget, len(records) + 2)):
        result = state.step(reply)
        if isinstance(result, TargetOutcome):
            if pos < len(records):
                raise SpineMismatchError(pos, "target finished before recording was consumed")
            return calls, result
        if pos >= len(records):
            return calls, state.outcome_hung()
        calls.append(result)
        reply = faithful_step(records[pos], result)
        pos += 1
    return calls, state.outcome_hung()


def _dedup_key(fault: str, payload_map: dict[int, bytes], tail_edges: tuple[int, ...]) -> int:
    """Crash identity: fault class, the last-mutated record, and where the
    execution ended up (its final coverage edges)."""
    last_seq = next(reversed(payload_map)) if payload_map else 0
    blob = fault.encode() + b"\0" + last_seq.to_bytes(8, "little")
    blob += b"".join(slot.to_bytes(2, "little") for slot in tail_edges)
    return fnv1a64(blob)


class Campaign:
    """One deterministic fuzzing campaign over a recording."""

    def __init__(self, recording: Recording, target_factory, cfg: CampaignConfig):
        cfg.validate()
        if not recording.records:
            raise CampaignConfigError("recording is empty; nothing to replay")
        self.recording = recording
        self.factory = target_factory
        self.target_name = target_factory().name
        self.cfg = cfg
        self.corpora: dict[int, SeedCorpus] = init_corpora(recording)
        self.fb = FeedbackState(enabled=not cfg.no_feedback)
        self.crashes: dict[int, CrashEntry] = {}
        self.crashes_total = 0
        self.executions = 0
        self.spine_executions = 0
        self.branch_executions = 0
        self.passes_completed = 0
        self.prefix_reexecutions = 0
        self.divergence_totals: dict[str, int] = DivergenceLog().as_dict()
        self.last_spine_calls: list[EnvCall] = []
        self._t0 = 0.0

    # -- budgets ------------------------------------------------------------

    def _out_of_budget(self) -> bool:
        cfg = self.cfg
        if cfg.max_executions is not None and self.executions >= cfg.max_executions:
            return True
        if cfg.budget_seconds is not None and time.perf_counter() - self._t0 >= cfg.budget_seconds:
            return True
        return False

    def _charge_execution(self, spine: bool) -> None:
        self.executions += 1
        if spine:
            self.spine_executions += 1
        else:
            self.branch_executions += 1

    def _accumulate_divergence(self, log: DivergenceLog) -> None:
        totals = self.divergence_totals
        totals["reordered_io"] += log.reordered_io
        totals["extraneous_output"] += log.extraneous_output
        totals["eof_served"] += log.eof_served
        totals["non_io_emulated"] += log.non_io_emulated
        totals["non_io_failed"] += log.non_io_failed
        totals["forced_exit"] += log.forced_exit

    # -- branch execution -----------------------------------------------------

    def _run_branch(
        self,
        parent: TargetState,
        call: EnvCall,
        rec: Record,
        mutant: bytes,
        suffix: list[Record],
        branch_rng: Rng,
        prefix: "_ForkPrefix",
    ) -> ExecOutcome:
        bstate = parent.snapshot()
        payload_map: dict[int, bytes] = {rec.seq: mutant}

        def branch_filter(r: Record, payload: bytes) -> bytes:
            if branch_rng.chance(FURTHER_MUTATION_ONE_IN):
                mutated = mutate(payload, self.corpora.get(r.seq), branch_rng)
                payload_map[r.seq] = mutated
                return mutated
            return payload

        if self.cfg.no_relaxed:
            session = NoRelaxedSession(suffix, branch_filter)
        else:
            session = BranchSession(suffix, branch_filter, partition=prefix.partition)
        reply = session.serve_mutant(rec, call, mutant)
        outcome: TargetOutcome | None = None
        for _ in range(self.cfg.step_budget):
            result = bstate.step(reply)
            if isinstance(result, TargetOutcome):
                outcome = result
                break
            reply = session.handle(result)
            if reply is None:
                outcome = bstate.force_outcome(Status.exited(1))
                break
        if outcome is None:
            outcome = bstate.outcome_hung()
        # Coverage and states extend the fork point's shared prefix.
        counts = fold_counts(outcome.edges[prefix.edge_count :], dict(prefix.slot_counts))
        coverage = bucket_counts(counts)
        assign = self.fb.model.assign
        states = prefix.states + [
            assign(state_signature(data))[0]
            for _, data in outcome.outputs[prefix.output_count :]
        ]
        if outcome.status.is_fault:
            tail = tuple(edge_slot(p, c) for p, c in outcome.edges[-8:])
        else:
            tail = ()
        return ExecOutcome(outcome.status, coverage, states, session.log, payload_map, tail)

    def _record_crash(self, result: ExecOutcome) -> None:
        self.crashes_total += 1
        fault = result.status.fault
        key = _dedup_key(fault, result.mutated_payloads, result.tail_edges)
        if key not in self.crashes:
            self.crashes[key] = CrashEntry(fault, dict(result.mutated_payloads), key)

    def _fuzz_record(self, state: TargetState, call: EnvCall, rec: Record, pass_no: int) -> None:
        corpus = self.corpora[rec.seq]
        record_rng = Rng(seed_for(self.cfg.seed, rec.seq, pass_no))
        suffix = self.recording.records[rec.seq + 1 :]
        prefix = _ForkPrefix(state, self.fb, suffix)
        scheduled = list(enumerate(corpus.seeds))
        for seed_index, seed_payload in scheduled:
            stats = corpus.stats[seed_index]
            stats.times_chosen += 1
            novel = False
            for _ in range(energy(stats)):
                if self._out_of_budget():
                    raise _BudgetExhausted
                branch_rng = record_rng.fork()
                mutant = mutate(seed_payload, corpus, branch_rng) if rec.mutable else seed_payload
                result = self._run_branch(state, call, rec, mutant, suffix, branch_rng, prefix)
                self._charge_execution(spine=False)
                self._accumulate_divergence(result.divergence)
                interesting = self.fb.is_interesting(result.coverage, result.states)
                if result.status.is_fault:
                    self._record_crash(result)
                if interesting:
                    novel = True
                    if rec.mutable:
                        corpus.add(mutant)
            stats.last_was_novel = novel
            stats.no_novelty_streak = 0 if novel else stats.no_novelty_streak + 1

    # -- spine ---------------------------------------------------------------

    def _observe_spine(self, outcome: TargetOutcome) -> None:
        coverage = fold_edges(outcome.edges)
        states = self.fb.states_for(outcome.outputs)
        self.fb.observe(coverage, states)

    def _baseline(self) -> None:
        """Seed the feedback maps from one plain faithful replay; also the
        earliest point an unreplayable recording gets diagnosed."""
        calls, outcome = replay_spine(self.recording, self.factory(), self.cfg.step_budget)
        self._charge_execution(spine=True)
        self._observe_spine(outcome)
        self.last_spine_calls = calls

    def _pass(self, pass_no: int) -> None:
        state = self.factory()
        records = self.recording.records
        reply = None
        pos = 0
        spine_calls: list[EnvCall] = []
        seen: dict[int, int] = {}
        outcome: TargetOutcome | None = None
        for _ in range(max(self.cfg.step_budget, len(records) + 2)):
            result = state.step(reply)
            if isinstance(result, TargetOutcome):
                if pos < len(records):
                    raise SpineMismatchError(pos, "target finished before recording was consumed")
                outcome = result
                break
            call = result
            if pos >= len(records):
                outcome = state.outcome_hung()
                break
            rec = records[pos]
            spine_calls.append(call)
            seen[pos] = seen.get(pos, 0) + 1
            if rec.kind is SyscallClass.INPUT and rec.seq in self.corpora:
                self._fuzz_record(state, call, rec, pass_no)
            reply = faithful_step(rec, call)
            pos += 1
        if outcome is None:
            outcome = state.outcome_hung()
        self.prefix_reexecutions += sum(1 for n in seen.values() if n > 1)
        self._charge_execution(spine=True)
        self._observe_spine(outcome)
        self.last_spine_calls = spine_calls

    # -- campaign ----------------------------------------------------------

    def run(self) -> CampaignReport:
        self._t0 = time.perf_counter()
        started_ms = int(time.time() * 1000)
        cfg = self.cfg
        no_work = (
            (cfg.max_passes is not None and cfg.max_passes <= 0)
            or (cfg.max_executions is not None and cfg.max_executions <= 0)
            or (cfg.budget_seconds is not None and cfg.budget_seconds <= 0)
        )
        if not no_work:
            self._baseline()
            pass_no = 1
            while not self._out_of_budget():
                if cfg.max_passes is not None and self.passes_completed >= cfg.max_passes:
                    break
                try:
                    self._pass(pass_no)
                except _BudgetExhausted:
                    break
                self.passes_completed += 1
                pass_no += 1
        wall = time.perf_counter() - self._t0
        report = self._report(wall, started_ms)
        if cfg.out_dir is not None:
            persist_campaign(
                cfg.out_dir, self.recording, report, self.corpora, cfg, self.target_name
            )
        return report

    def _report(self, wall: float, started_ms: int) -> CampaignReport:
        by_fault: dict[str, int] = {}
        for entry in self.crashes.values():
            by_fault[entry.fault] = by_fault.get(entry.fault, 0) + 1
        return CampaignReport(
            passes=self.passes_completed,
            executions=self.executions,
            spine_executions=self.spine_executions,
            branch_executions=self.branch_executions,
            executions_per_second=self.executions / wall if wall > 0 else 0.0,
            wall_seconds=wall,
            crashes_unique=len(self.crashes),
            crashes_total=self.crashes_total,
            crashes_by_fault=by_fault,
            corpus_sizes={seq: len(c) for seq, c in sorted(self.corpora.items())},
            coverage_slots=self.fb.virgin_population(),
            states=len(self.fb.model.representatives),
            transitions=len(self.fb.transitions),
            divergence=dict(self.divergence_totals),
            prefix_reexecutions=self.prefix_reexecutions,
            spine_records=len(self.recording.records),
            crash_entries=list(self.crashes.values()),
            started_unix_ms=started_ms,
        )


def fuzz_campaign(recording: Recording, target_factory, cfg: CampaignConfig) -> CampaignReport:
    return Campaign(recording, target_factory, cfg).run()


# --- crash reproduction -------------------------------------------------------


@dataclass
class TriageResult:
    name: str
    fault: str
    reproduced: bool
    observed: str
    flaky: bool


def reproduce_entry(
    recording: Recording,
    target_factory,
    entry: CrashEntry,
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> Status:
    """Re-run the spine to the entry's fork record, then replay its exact
    payload map through a relaxed branch. Returns the observed status."""
    records = recording.records
    fork = entry.fork_seq
    if fork < 0 or fork >= len(records) or records[fork].kind is not SyscallClass.INPUT:
        raise SpineMismatchError(fork, "fork record is not an input record")
    state = target_factory()
    reply = None
    pos = 0
    call: EnvCall | None = None
    for _ in range(max(step_budget, len(records) + 2)):
        result = state.step(reply)
        if isinstance(result, TargetOutcome):
            raise SpineMismatchError(pos, "target finished before the fork record")
        if pos == fork:
            call = result
            break
        reply = faithful_step(records[pos], result)
        pos += 1
    if call is None:
        raise SpineMismatchError(fork, "fork record never reached")

    session = BranchSession(
        records[fork + 1 :],
        lambda r, payload: entry.mutated_payloads.get(r.seq, payload),
    )
    reply = session.serve_mutant(records[fork], call, entry.mutated_payloads[fork])
    for _ in range(step_budget):
        result = state.step(reply)
        if isinstance(result, TargetOutcome):
            return result.status
        reply = session.handle(result)
        if reply is None:
            return state.force_outcome(Status.exited(1)).status
    return state.outcome_hung().status


def status_matches(fault: str, status: Status) -> bool:
    if fault == "hang":
        return status.kind == "hung"
    return status.kind == "crashed" and status.fault == fault


def triage(
    recording: Recording,
    target_factory,
    entries: list[tuple[str, CrashEntry]],
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> list[TriageResult]:
    """Confirm each crash entry reproduces its fault class; unreproducible
    entries are flagged, never deleted."""
    results = []
    for name, entry in entries:
        try:
            status = reproduce_entry(recording, target_factory, entry, step_budget)
            observed = f"{status.kind}:{status.fault or status.code}"
            ok = status_matches(entry.fault, status)
        except (SpineMismatchError, KeyError, ValueError) as e:
            observed = f"error:{e}"
            ok = False
        results.append(TriageResult(name, entry.fault, ok, observed, flaky=not ok))
    return results


# --- campaign directory -------------------------------------------------------


def crash_entry_to_json(entry: CrashEntry) -> dict:
    return {
        "fault": entry.fault,
        "payloads": {str(seq): data.hex() for seq, data in entry.mutated_payloads.items()},
        "dedup_key": f"{entry.dedup_key:016x}",
    }


def crash_entry_from_json(doc: dict) -> CrashEntry:
    payloads = {int(seq): bytes.fromhex(hexstr) for seq, hexstr in doc["payloads"].items()}
    return CrashEntry(doc["fault"], payloads, int(doc["dedup_key"], 16))


def stats_dict(report: CampaignReport, cfg: CampaignConfig, target: str) -> dict:
    return {
        "config": {
            "seed": cfg.seed,
            "max_passes": cfg.max_passes,
            "budget_seconds": cfg.budget_seconds,
            "max_executions": cfg.max_executions,
            "step_budget": cfg.step_budget,
            "no_relaxed": cfg.no_relaxed,
            "no_feedback": cfg.no_feedback,
            "target": target,
            "recording": "recording.etf",
        },
        "passes_completed": report.passes,
        "executions": {
            "total": report.executions,
            "spine": report.spine_executions,
            "branch": report.branch_executions,
        },
        "crashes": {
            "unique": report.crashes_unique,
            "total": report.crashes_total,
            "by_fault": dict(sorted(report.crashes_by_fault.items())),
        },
        "corpus": {str(seq): n for seq, n in sorted(report.corpus_sizes.items())},
        "coverage": {"slots_set": report.coverage_slots},
        "states": {"count": report.states, "transitions": report.transitions},
        "divergence": dict(sorted(report.divergence.items())),
        "spine": {
            "records": report.spine_records,
            "prefix_reexecutions": report.prefix_reexecutions,
        },
        "timestamp": {
            "unix_ms": report.started_unix_ms,
            "wall_seconds": report.wall_seconds,
            "executions_per_second": report.executions_per_second,
        },
    }


def render_report_text(stats: dict) -> str:
    lines = [
        f"target:            {stats['config']['target']}",
        f"seed:              {stats['config']['seed']}",
        f"passes completed:  {stats['passes_completed']}",
        f"executions:        {stats['executions']['total']} "
        f"(spine {stats['executions']['spine']}, branch {stats['executions']['branch']})",
        f"exec/s:            {stats['timestamp']['executions_per_second']:.1f}",
        f"crashes:           {stats['crashes']['unique']} unique / {stats['crashes']['total']} total",
    ]
    for fault, n in stats["crashes"]["by_fault"].items():
        lines.append(f"  {fault}: {n}")
    lines.append(f"coverage slots:    {stats['coverage']['slots_set']}")
    lines.append(
        f"states:            {stats['states']['count']} "
        f"({stats['states']['transitions']} transitions)"
    )
    lines.append("corpus sizes:      " + ", ".join(
        f"{seq}:{n}" for seq, n in stats["corpus"].items()
    ))
    lines.append("divergence:        " + ", ".join(
        f"{k}={v}" for k, v in stats["divergence"].items()
    ))
    return "\n".join(lines) + "\n"


def persist_campaign(
    out_dir: Path,
    recording: Recording,
    report: CampaignReport,
    corpora: dict[int, SeedCorpus],
    cfg: CampaignConfig,
    target_name: str = "",
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "recording.etf").write_bytes(encode_recording(recording))
    corpus_root = out_dir / "corpus"
    for seq, corpus in sorted(corpora.items()):
        d = corpus_root / str(seq)
        d.mkdir(parents=True, exist_ok=True)
        for i, payload in enumerate(corpus.seeds):
            (d / f"seed_{i}.bin").write_bytes(payload)
    crash_dir = out_dir / "crashes"
    crash_dir.mkdir(parents=True, exist_ok=True)
    for i, entry in enumerate(report.crash_entries):
        (crash_dir / f"crash_{i}.json").write_text(
            json.dumps(crash_entry_to_json(entry), indent=2, sort_keys=True) + "\n"
        )
    stats = stats_dict(report, cfg, target_name or recording.target)
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(render_report_text(stats))


def load_campaign_dir(out_dir: Path) -> tuple[Recording, dict, list[tuple[str, CrashEntry]]]:
    out_dir = Path(out_dir)
    recording = decode_recording((out_dir / "recording.etf").read_bytes())
    stats = json.loads((out_dir / "stats.json").read_text())
    entries: list[tuple[str, CrashEntry]] = []
    crash_dir = out_dir / "crashes"
    if crash_dir.is_dir():
        for path in sorted(crash_dir.glob("crash_*.json"), key=lambda p: int(p.stem.split("_")[1])):
            entries.append((path.name, crash_entry_from_json(json.loads(path.read_text()))))
    return recording, stats, entries
