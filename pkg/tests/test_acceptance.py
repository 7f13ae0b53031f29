"""Acceptance gate: one test per shipping criterion, each printing a
PASS line with the measured evidence (run with -s to watch them)."""

import json
import random
import time

import pytest

import envfuzz.engine as engine_mod
from envfuzz.engine import Campaign, CampaignConfig, fuzz_campaign, load_campaign_dir, replay_spine, triage
from envfuzz.feedback import STATE_HAMMING_THRESHOLD, StateModel, hamming, state_signature
from envfuzz.mutation import energy
from envfuzz.recorder import default_env_script, record
from envfuzz.replay import BranchSession, build_miniqueues
from envfuzz.targets import POLLHUP, POLLIN, POLLOUT, PollEntry, bundled_target
from envfuzz.trace import SyscallClass, make_record

BUNDLED = ("calc", "echo_server", "config_parser")


def ok(n, text):
    print(f"\n[criterion {n:2d}] PASS  {text}")


def campaign(target, out_dir=None, **kw):
    rec = record(bundled_target(target), default_env_script(target))
    cfg = CampaignConfig(out_dir=out_dir, **kw)
    return fuzz_campaign(rec, lambda: bundled_target(target), cfg)


@pytest.fixture(scope="module")
def calc_50k_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("calc50k")
    report = campaign("calc", out_dir=out, seed=0, max_passes=None, max_executions=50_000)
    return out, report


@pytest.fixture(scope="module")
def config_200k_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("config200k")
    report = campaign("config_parser", out_dir=out, seed=0, max_passes=None, max_executions=200_000)
    return out, report


def test_criterion_01_faithful_replay_determinism():
    t0 = time.perf_counter()
    for name in BUNDLED:
        rec = record(bundled_target(name), default_env_script(name))
        runs = []
        for _ in range(10):
            calls, outcome = replay_spine(rec, bundled_target(name))
            assert outcome.status.kind == "exited"
            runs.append([
                (c.sys, c.fd, c.tid, c.out_buf, c.in_capacity,
                 tuple((e.fd, e.events) for e in c.poll_set) if c.poll_set else None)
                for c in calls
            ])
        assert all(r == runs[0] for r in runs[1:]), name
        # the replayed sequence is exactly the recording: zero divergence
        assert len(runs[0]) == len(rec.records)
        for got, want in zip(runs[0], rec.records):
            assert (got[0], got[1], got[2]) == (want.sys, want.fd, want.tid)
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    ok(1, f"3 targets x 10 replays byte-identical, 0 divergences, {elapsed:.3f}s")


def test_criterion_02_emulated_poll_table_and_property():
    def rec_in(seq, fd):
        return make_record(seq, 0, "recv", fd=fd, args=(fd, 64), buf=b"m", ret=1)

    def rec_out(seq, fd):
        return make_record(seq, 0, "send", fd=fd, args=(fd, 1), buf=b"o", ret=1)

    # input ready
    s = BranchSession([rec_in(0, 3)])
    r = s.emulate_poll([PollEntry(3, POLLIN)])
    assert r.ret == 1 and r.poll_set[0].revents == POLLIN
    # drained queue reports hang-up
    s = BranchSession([])
    r = s.emulate_poll([PollEntry(7, POLLIN)])
    assert r.ret == 1 and r.poll_set[0].revents == POLLHUP
    # reorder promotes the output record to satisfy POLLOUT
    s = BranchSession([rec_in(0, 3), rec_out(1, 3)])
    r = s.emulate_poll([PollEntry(3, POLLOUT)])
    assert r.ret == 1 and r.poll_set[0].revents == POLLOUT

    rng = random.Random(202)
    for _ in range(1000):
        suffix = []
        for seq in range(rng.randrange(0, 20)):
            fd = rng.randrange(4)
            suffix.append(rec_in(seq, fd) if rng.random() < 0.5 else rec_out(seq, fd))
        s = BranchSession(suffix)
        entries = [
            PollEntry(rng.randrange(5), rng.choice([0, POLLIN, POLLOUT, POLLIN | POLLOUT]))
            for _ in range(rng.randrange(0, 4))
        ]
        reply = s.emulate_poll(entries)  # termination is the first property
        # oracle: recount non-zero revents from the filled array itself
        assert reply.ret == sum(1 for e in reply.poll_set if e.revents)
        for e in reply.poll_set:
            if e.revents and not e.revents & POLLHUP:
                wanted = SyscallClass.INPUT if e.revents & POLLIN else SyscallClass.OUTPUT
                assert any(rec.fd == e.fd and rec.kind is wanted for rec in suffix)
    ok(2, "poll examples exact; 1000 random configs terminate with oracle-equal counts")


def test_criterion_03_miniqueue_partition_soundness():
    rng = random.Random(303)
    for _ in range(1000):
        suffix = []
        for seq in range(rng.randrange(0, 40)):
            roll = rng.random()
            fd = rng.randrange(5)
            if roll < 0.4:
                n = rng.randrange(0, 6)
                suffix.append(make_record(seq, 0, "recv", fd=fd, args=(fd, 64), buf=b"x" * n, ret=n))
            elif roll < 0.8:
                suffix.append(make_record(seq, 0, "send", fd=fd, args=(fd, 2), buf=b"yy", ret=2))
            elif roll < 0.9:
                suffix.append(make_record(seq, 0, "close", fd=fd, args=(fd,), buf=None, ret=0))
            else:
                suffix.append(make_record(seq, 0, "poll", fd=None, args=(fd, 1, 1), buf=None, ret=1))
        q = build_miniqueues(suffix)
        io = [r for r in suffix if r.kind in (SyscallClass.INPUT, SyscallClass.OUTPUT)]
        assert q.merged() == io
    ok(3, "1000 random recordings: miniqueue merge reproduces the I/O suffix exactly")


def test_criterion_04_spine_once_and_branch_isolation(monkeypatch):
    rec = record(bundled_target("calc"), default_env_script("calc"))
    camp = Campaign(rec, lambda: bundled_target("calc"), CampaignConfig(seed=0, max_passes=3))
    report = camp.run()
    assert report.prefix_reexecutions == 0

    monkeypatch.setattr(engine_mod, "energy", lambda stats: 0)
    zero = Campaign(rec, lambda: bundled_target("calc"), CampaignConfig(seed=0, max_passes=1))
    zero_report = zero.run()
    assert zero_report.branch_executions == 0
    plain_calls, _ = replay_spine(rec, bundled_target("calc"))
    assert [(c.sys, c.fd, c.tid) for c in zero.last_spine_calls] == [
        (c.sys, c.fd, c.tid) for c in plain_calls
    ]
    ok(4, "0 prefix re-executions over 3 passes; zero-energy spine equals plain replay")


def test_criterion_05a_calc_division_crash_within_budget(calc_50k_dir):
    _, report = calc_50k_dir
    assert report.executions <= 50_000
    assert report.crashes_by_fault.get("arithmetic", 0) >= 1
    ok(5, f"(a) division crash found within {report.executions} executions (budget 50,000)")


def test_criterion_05b_config_comma_crash_within_budget(config_200k_dir):
    _, report = config_200k_dir
    assert report.executions <= 200_000
    assert report.crashes_by_fault.get("memory", 0) >= 1
    ok(5, f"(b) comma-table crash found within {report.executions} executions (budget 200,000)")


def test_criterion_05c_reorder_crash_needs_relaxed_replay(calc_50k_dir):
    _, default_report = calc_50k_dir
    assert default_report.crashes_by_fault.get("assertion", 0) >= 1  # within 50k < 200k budget
    ablated = campaign(
        "calc", seed=0, max_passes=None, max_executions=200_000, no_relaxed=True
    )
    assert ablated.executions >= 200_000
    assert "assertion" not in ablated.crashes_by_fault
    ok(5, "(c) early-close crash found in default mode; absent in 200,000 "
          "executions without divergence handling")


def test_criterion_06_feedback_ablation_direction():
    default = campaign("echo_server", seed=0, max_passes=None, max_executions=100_000)
    ablated = campaign(
        "echo_server", seed=0, max_passes=None, max_executions=100_000, no_feedback=True
    )
    assert default.coverage_slots >= ablated.coverage_slots
    ok(6, f"echo_server 100k: virgin population {default.coverage_slots} (default) "
          f">= {ablated.coverage_slots} (no feedback)")


def test_criterion_07_throughput():
    campaign("calc", seed=0, max_passes=None, max_executions=3_000)  # warm caches
    report = campaign("calc", seed=0, max_passes=None, max_executions=20_000)
    assert report.executions_per_second >= 5_000
    ok(7, f"calc campaign at {report.executions_per_second:.0f} executions/second (>= 5,000)")


def test_criterion_08_crash_reproducibility(calc_50k_dir, config_200k_dir):
    total = 0
    for out, _ in (calc_50k_dir, config_200k_dir):
        recording, stats, entries = load_campaign_dir(out)
        factory = lambda name=stats["config"]["target"]: bundled_target(name)
        results = triage(recording, factory, entries, stats["config"]["step_budget"])
        assert results, "campaign produced no crash entries to triage"
        assert all(r.reproduced and not r.flaky for r in results)
        total += len(results)
    ok(8, f"{total} crash entries, 100% reproduce their fault class, 0 flaky")


def test_criterion_09_state_signature_properties():
    rng = random.Random(909)
    # identical outputs
    assert hamming(state_signature(b"RESP 200 OK\n"), state_signature(b"RESP 200 OK\n")) == 0
    # single-byte edits on 12-byte outputs cluster within theta
    within = 0
    for _ in range(1000):
        payload = bytes(rng.randrange(256) for _ in range(12))
        pos = rng.randrange(12)
        edited = payload[:pos] + bytes([rng.randrange(256)]) + payload[pos + 1 :]
        d = hamming(state_signature(payload), state_signature(edited))
        if d <= STATE_HAMMING_THRESHOLD:
            within += 1
    assert within >= 900
    # cluster-separation invariant across a 10k-signature fuzz
    model = StateModel()
    for _ in range(10_000):
        model.assign(rng.getrandbits(64) & rng.getrandbits(64))
    reps = model.representatives
    for i in range(len(reps)):
        for j in range(i + 1, len(reps)):
            assert hamming(reps[i], reps[j]) > model.theta
    ok(9, f"single-byte edits within theta in {within / 10:.1f}% of cases; "
          f"{len(reps)} representatives pairwise separated")


def test_criterion_10_campaign_determinism(tmp_path):
    stats_texts = []
    keysets = []
    for run in ("one", "two"):
        out = tmp_path / run
        report = campaign("calc", out_dir=out, seed=7, max_passes=None, max_executions=5_000)
        doc = json.loads((out / "stats.json").read_text())
        doc.pop("timestamp")
        stats_texts.append(json.dumps(doc, sort_keys=True))
        keysets.append({e.dedup_key for e in report.crash_entries})
    assert stats_texts[0] == stats_texts[1]
    assert keysets[0] == keysets[1]
    ok(10, "two identical campaigns: stats byte-identical (timestamp aside), "
           "same crash dedup keys")
