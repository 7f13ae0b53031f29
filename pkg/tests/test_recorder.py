import json

import pytest

from envfuzz.engine import replay_spine
from envfuzz.recorder import (
    EnvScript,
    EnvScriptError,
    FdSource,
    default_env_script,
    record,
)
from envfuzz.targets import Fiber, TargetState, bundled_target
from envfuzz.trace import SyscallClass, init_corpora


def test_calc_recording_matches_expected_shape():
    rec = record(bundled_target("calc"), default_env_script("calc"))
    assert [r.sys for r in rec.records] == [
        "read", "send", "recv", "send", "recv", "write", "exit",
    ]
    assert [r.seq for r in rec.records] == list(range(7))
    assert rec.records[0].buf == b"mode=simple\n"
    assert rec.records[2].buf == b"1+2="
    assert rec.records[4].buf == b"close"
    assert rec.records[0].fd == 0
    assert rec.records[2].fd == 3
    assert rec.meta["status"] == "exited:0"


class _ExitFiber(Fiber):
    __slots__ = ()

    def advance(self, reply):
        if self.pc == "start":
            self.pc = "exited"
            return self.exit_call(0)
        return self.process_exit(0)


def test_immediate_exit_target_records_single_record():
    state = TargetState("trivial", [_ExitFiber(0)])
    rec = record(state, EnvScript({}))
    assert [r.sys for r in rec.records] == ["exit"]


def test_echo_recording_has_poll_recv_send_triples():
    rec = record(bundled_target("echo_server"), default_env_script("echo_server"))
    names = [r.sys for r in rec.records]
    assert names[:9] == ["poll", "recv", "send"] * 3
    assert names[9:] == ["poll", "exit"]
    # terminal poll answered with hang-up
    final_poll = rec.records[9]
    assert final_poll.args[2] == 0x10  # POLLHUP
    # input records carry served bytes and matching returns
    recvs = [r for r in rec.records if r.sys == "recv"]
    assert [r.buf for r in recvs] == [b"hello", b"world", b"ping!"]
    assert all(r.ret == len(r.buf) for r in recvs)


def test_eof_is_zero_return_with_empty_payload():
    rec = record(bundled_target("config_parser"), default_env_script("config_parser"))
    eof = rec.records[1]
    assert eof.kind is SyscallClass.INPUT
    assert (eof.buf, eof.ret) == (b"", 0)


def test_recording_is_deterministic():
    a = record(bundled_target("calc"), default_env_script("calc"))
    b = record(bundled_target("calc"), default_env_script("calc"))
    assert a == b


def test_faithful_replay_closure():
    for name in ("calc", "echo_server", "config_parser"):
        rec = record(bundled_target(name), default_env_script(name))
        calls, outcome = replay_spine(rec, bundled_target(name))
        assert len(calls) == len(rec.records)
        for call, r in zip(calls, rec.records):
            assert (call.sys, call.fd, call.tid) == (r.sys, r.fd, r.tid)
        assert outcome.status.kind == "exited"


def test_corpora_initialized_from_recording():
    rec = record(bundled_target("calc"), default_env_script("calc"))
    corpora = init_corpora(rec)
    assert sorted(corpora) == [0, 2, 4]
    assert all(len(c) == 1 for c in corpora.values())
    assert corpora[2].seeds[0] == b"1+2="


def test_immutable_script_source_flags_records():
    script = EnvScript(
        {
            0: FdSource("file", "/proc/stat", [b"cpu 1 2 3\n" + b"x" * 10]),
            3: FdSource("socket", "socket:ui", [b"1+2=", b"close"]),
        }
    )
    rec = record(bundled_target("calc"), script)
    assert rec.records[0].sys == "read"
    assert not rec.records[0].mutable
    assert rec.records[2].mutable


def test_step_budget_cuts_recording_and_reports_hang():
    class _Spinner(Fiber):
        __slots__ = ()

        def advance(self, reply):
            self.block(1)
            return self.input_call("read", fd=0, capacity=4)

    state = TargetState("spin", [_Spinner(0)])
    rec = record(state, EnvScript({0: FdSource("file", "f", [])}), step_budget=25)
    assert rec.meta["status"] == "hung"
    assert len(rec.records) == 25


def test_stimulus_larger_than_capacity_is_split():
    class _SmallReader(Fiber):
        __slots__ = ("got",)

        def __init__(self):
            super().__init__(0)
            self.got = b""

        def clone(self):
            dup = _SmallReader.__new__(_SmallReader)
            self._copy_base(dup)
            dup.got = self.got
            return dup

        def advance(self, reply):
            if self.pc == "start":
                self.pc = "reading"
                return self.input_call("read", fd=0, capacity=4)
            if self.pc == "reading":
                if reply.ret > 0:
                    self.got += reply.data
                    return self.input_call("read", fd=0, capacity=4)
                self.pc = "exited"
                return self.exit_call(0)
            return self.process_exit(0)

    state = TargetState("reader", [_SmallReader()])
    script = EnvScript({0: FdSource("file", "f", [b"0123456789"])})
    rec = record(state, script)
    reads = [r for r in rec.records if r.sys == "read"]
    assert [r.buf for r in reads] == [b"0123", b"4567", b"89", b""]


# --- env script file format --------------------------------------------------


def test_env_script_json_roundtrip():
    script = default_env_script("calc")
    back = EnvScript.from_json(script.to_json())
    assert back == script


def test_env_script_json_shape():
    doc = json.loads(default_env_script("echo_server").to_json())
    assert doc == {
        "4": {
            "kind": "socket",
            "path": "socket:client",
            "stimuli": ["68656c6c6f", "776f726c64", "70696e6721"],
        }
    }


def test_env_script_rejects_bad_documents():
    with pytest.raises(EnvScriptError):
        EnvScript.from_json("[]")
    with pytest.raises(EnvScriptError):
        EnvScript.from_json('{"x": {"stimuli": []}}')
    with pytest.raises(EnvScriptError):
        EnvScript.from_json('{"0": {"stimuli": ["zz"]}}')
    with pytest.raises(EnvScriptError):
        EnvScript.from_json("{nope")


def test_default_env_script_unknown_target():
    with pytest.raises(EnvScriptError):
        default_env_script("mystery")
