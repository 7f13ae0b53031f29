"""Whole-pipeline scenarios beyond the bundled single-fiber targets."""

from envfuzz.engine import Campaign, CampaignConfig, fuzz_campaign, replay_spine, triage
from envfuzz.recorder import EnvScript, FdSource, record
from envfuzz.targets import Fiber, TargetState, bundled_target


class _ReaderFiber(Fiber):
    """Reads its own descriptor until end-of-file, then finishes."""

    __slots__ = ("fd", "seen")

    def __init__(self, tid, fd):
        super().__init__(tid)
        self.fd = fd
        self.seen = 0

    def clone(self):
        dup = _ReaderFiber.__new__(_ReaderFiber)
        self._copy_base(dup)
        dup.fd = self.fd
        dup.seen = self.seen
        return dup

    def advance(self, reply):
        if self.pc == "start":
            self.pc = "reading"
            self.block(10 + self.tid)
            return self.input_call("read", fd=self.fd, capacity=64)
        if reply.ret > 0:
            self.seen += 1
            self.block(20 + self.tid)
            return self.input_call("read", fd=self.fd, capacity=64)
        self.block(30 + self.tid)
        return self.done()


def two_reader_target():
    return TargetState("two_readers", [_ReaderFiber(0, 0), _ReaderFiber(1, 5)])


def two_reader_script():
    return EnvScript(
        {
            0: FdSource("file", "left.txt", [b"alpha"]),
            5: FdSource("file", "right.txt", [b"bravo"]),
        }
    )


def test_multi_fiber_record_interleaves_tids():
    rec = record(two_reader_target(), two_reader_script())
    assert [(r.tid, r.sys, r.fd) for r in rec.records] == [
        (0, "read", 0),
        (1, "read", 5),
        (0, "read", 0),
        (1, "read", 5),
    ]
    assert rec.records[0].buf == b"alpha"
    assert rec.records[1].buf == b"bravo"
    assert rec.records[2].ret == 0  # both streams end in EOF
    assert rec.records[3].ret == 0


def test_multi_fiber_faithful_replay_round_trips():
    rec = record(two_reader_target(), two_reader_script())
    calls, outcome = replay_spine(rec, two_reader_target())
    assert [(c.tid, c.sys, c.fd) for c in calls] == [
        (r.tid, r.sys, r.fd) for r in rec.records
    ]
    assert outcome.status.kind == "exited"


def test_multi_fiber_campaign_forks_at_every_input():
    rec = record(two_reader_target(), two_reader_script())
    report = fuzz_campaign(
        rec, two_reader_target, CampaignConfig(seed=0, max_passes=1)
    )
    assert report.branch_executions == 8 * 4  # all four records are inputs
    assert report.prefix_reexecutions == 0


class _StubbornFiber(Fiber):
    """Reads one command; a command containing '!' sends it into a poll
    loop it never leaves, even after hang-up."""

    __slots__ = ()

    def advance(self, reply):
        if self.pc == "start":
            self.pc = "command"
            self.block(1)
            return self.input_call("read", fd=0, capacity=64)
        if self.pc == "command":
            if b"!" in reply.data:
                self.pc = "spin"
                self.block(2)
                return self.poll_call([(0, 1)])
            self.pc = "exited"
            self.block(3)
            return self.exit_call(0)
        if self.pc == "spin":
            return self.poll_call([(0, 1)])
        return self.process_exit(0)


def stubborn_target():
    return TargetState("stubborn", [_StubbornFiber(0)])


class _SpinReader(Fiber):
    __slots__ = ()

    def advance(self, reply):
        self.block(1)
        return self.input_call("read", fd=0, capacity=8)


def test_campaign_over_truncated_recording_is_bounded():
    # a recording cut off by its own step budget replays as hung, and a
    # campaign over it stays within its per-execution budgets
    target = lambda: TargetState("spin", [_SpinReader(0)])
    rec = record(target(), EnvScript({0: FdSource("file", "f", [])}), step_budget=10)
    assert rec.meta["status"] == "hung"
    assert len(rec.records) == 10

    cfg = CampaignConfig(seed=0, max_passes=1, step_budget=40)
    report = fuzz_campaign(rec, target, cfg)
    assert report.passes == 1
    assert report.branch_executions == 8 * 10  # every truncated read forks
    assert report.crashes_by_fault.get("hang", 0) >= 1  # branches hit the budget


def test_hanging_branches_are_captured_and_triaged():
    script = EnvScript({0: FdSource("file", "cmd.txt", [b"okay"])})
    rec = record(stubborn_target(), script)
    assert rec.meta["status"] == "exited:0"

    cfg = CampaignConfig(
        seed=0, max_passes=None, max_executions=2000, step_budget=200
    )
    camp = Campaign(rec, stubborn_target, cfg)
    report = camp.run()
    hang_entries = [e for e in report.crash_entries if e.fault == "hang"]
    assert hang_entries, "no mutant ever tripped the poll loop"
    assert report.crashes_by_fault["hang"] >= 1

    results = triage(rec, stubborn_target, [("h", e) for e in hang_entries], step_budget=200)
    assert all(r.reproduced for r in results)
