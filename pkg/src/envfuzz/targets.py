"""Deterministic in-process scripted targets.

A target is a set of fibers (logical threads) that interact with the world
only by yielding env-calls and consuming replies. Execution is fully
serialized: one fiber advances per step, switching round-robin at env-call
boundaries, so the whole run is a deterministic function of the reply
sequence. States are plain data and support cheap snapshot/restore, which
gives branch isolation for the fuzzing loop.

See docs/target-guide.md for the authoring conventions (env-call helpers,
block ids, clone rules).
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass

from .trace import SyscallClass, classify

POLLIN = 0x001
POLLOUT = 0x004
POLLHUP = 0x010

FAULT_ARITHMETIC = "arithmetic"
FAULT_MEMORY = "memory"
FAULT_ASSERTION = "assertion"
FAULT_HANG = "hang"


class HarnessError(RuntimeError):
    """Driver bug: mismatched reply, stepping a finished target, etc."""


class TargetError(ValueError):
    pass


@dataclass
class PollEntry:
    fd: int
    events: int
    revents: int = 0


@dataclass
class EnvCall:
    """One interaction request yielded by a target fiber."""

    tid: int
    sys: str
    fd: int | None = None
    args: tuple[int, ...] = ()
    out_buf: bytes | None = None
    in_capacity: int | None = None
    poll_set: list[PollEntry] | None = None
    kind: SyscallClass = None  # derived; set on construction

    def __post_init__(self):
        self.kind = classify(self.sys)


@dataclass
class Reply:
    """The environment's answer to the previously yielded env-call."""

    ret: int
    data: bytes = b""
    poll_set: list[PollEntry] | None = None


@dataclass(frozen=True)
class Status:
    kind: str  # "exited" | "crashed" | "hung"
    code: int = 0
    fault: str = ""

    @staticmethod
    def exited(code: int = 0) -> "Status":
        return Status("exited", code=code)

    @staticmethod
    def crashed(fault: str) -> "Status":
        return Status("crashed", fault=fault)

    @staticmethod
    def hung() -> "Status":
        return Status("hung", fault=FAULT_HANG)

    @property
    def is_fault(self) -> bool:
        return self.kind in ("crashed", "hung")


@dataclass
class TargetOutcome:
    status: Status
    edges: list[tuple[int, int]]
    outputs: list[tuple[int, bytes]]


class _Crash:
    __slots__ = ("fault",)

    def __init__(self, fault: str):
        self.fault = fault


class _ProcessExit:
    __slots__ = ("code",)

    def __init__(self, code: int):
        self.code = code


_FIBER_DONE = object()


class Fiber:
    """One logical thread of a scripted target.

    Subclasses implement advance(reply) as a dispatch on `self.pc`, running
    from one env-call boundary to the next. Instance fields must stay
    scalars/bytes/tuples so the default clone (shallow copy) is sound;
    override clone() when holding mutable containers.
    """

    __slots__ = ("tid", "pc", "last_block", "alive", "waiting",
                 "_banked", "_pending", "_state")

    def __init__(self, tid: int):
        self.tid = tid
        self.pc = "start"
        self.last_block = 0
        self.alive = True
        self.waiting = False
        self._banked: Reply | None = None
        self._pending: EnvCall | None = None
        self._state: "TargetState | None" = None

    def advance(self, reply: Reply | None):
        raise NotImplementedError

    def _copy_base(self, dup: "Fiber") -> "Fiber":
        dup.tid = self.tid
        dup.pc = self.pc
        dup.last_block = self.last_block
        dup.alive = self.alive
        dup.waiting = self.waiting
        dup._banked = self._banked
        dup._pending = self._pending
        dup._state = None
        return dup

    def clone(self) -> "Fiber":
        return copy.copy(self)

    # -- authoring helpers --------------------------------------------------

    def block(self, block_id: int) -> None:
        """Mark entry into basic block `block_id`, emitting a coverage edge."""
        self._state.edges.append((self.last_block, block_id))
        self.last_block = block_id

    def input_call(self, sys: str, fd: int, capacity: int) -> EnvCall:
        return EnvCall(self.tid, sys, fd=fd, args=(fd, capacity), in_capacity=capacity)

    def output_call(self, sys: str, fd: int, data: bytes) -> EnvCall:
        return EnvCall(self.tid, sys, fd=fd, args=(fd, len(data)), out_buf=data)

    def poll_call(self, entries: list[tuple[int, int]]) -> EnvCall:
        return EnvCall(
            self.tid, "poll", poll_set=[PollEntry(fd, events) for fd, events in entries]
        )

    def exit_call(self, code: int) -> EnvCall:
        return EnvCall(self.tid, "exit", args=(code,))

    def crash(self, fault: str) -> _Crash:
        return _Crash(fault)

    def process_exit(self, code: int) -> _ProcessExit:
        return _ProcessExit(code)

    def done(self):
        return _FIBER_DONE


class TargetState:
    """A running scripted target: fibers plus observed edges and outputs."""

    __slots__ = ("name", "fibers", "edges", "outputs", "_await", "_status")

    def __init__(self, name: str, fibers: list[Fiber]):
        self.name = name
        self.fibers = fibers
        for f in fibers:
            f._state = self
        self.edges: list[tuple[int, int]] = []
        self.outputs: list[tuple[int, bytes]] = []
        self._await: int | None = None
        self._status: Status | None = None

    @property
    def finished(self) -> bool:
        return self._status is not None

    def outcome(self) -> TargetOutcome:
        if self._status is None:
            raise HarnessError("target still running")
        return TargetOutcome(self._status, list(self.edges), list(self.outputs))

    def force_outcome(self, status: Status) -> TargetOutcome:
        """Harness-side termination (budget exhaustion, forced branch exit)."""
        self._status = status
        return self.outcome()

    def outcome_hung(self) -> TargetOutcome:
        """Close out a run whose step budget is exhausted."""
        return self.force_outcome(Status.hung())

    def snapshot(self) -> "TargetState":
        """An independent copy; running the copy never perturbs the original."""
        dup = TargetState.__new__(TargetState)
        dup.name = self.name
        dup.fibers = [f.clone() for f in self.fibers]
        for f in dup.fibers:
            f._state = dup
        dup.edges = list(self.edges)
        dup.outputs = list(self.outputs)
        dup._await = self._await
        dup._status = self._status
        return dup

    def _validate_reply(self, call: EnvCall, reply: Reply) -> None:
        kind = call.kind
        if kind is SyscallClass.INPUT:
            if reply.ret >= 0 and reply.ret != len(reply.data):
                raise HarnessError("input reply ret does not match data length")
        elif kind is SyscallClass.READINESS:
            if reply.poll_set is None or len(reply.poll_set) != len(call.poll_set or []):
                raise HarnessError("poll reply does not match requested set")
        elif reply.data:
            raise HarnessError(f"unexpected data in reply to {call.sys}")

    def step(self, reply: Reply | None) -> EnvCall | TargetOutcome:
        """Advance one fiber to its next env-call boundary.

        `reply` answers the previously yielded env-call (None on the first
        step). Returns either the next env-call or the final outcome.
        """
        if self.finished:
            raise HarnessError("step on finished target")
        if self._await is not None:
            if reply is None:
                raise HarnessError("missing reply to pending env-call")
            waiter = self.fibers[self._await]
            self._validate_reply(waiter._pending, reply)
            waiter._banked = reply
            waiter._pending = None
            waiter.waiting = False
            start = self._await + 1
        else:
            if reply is not None:
                raise HarnessError("reply given but no env-call pending")
            start = 0
        self._await = None

        if len(self.fibers) == 1:
            fiber = self.fibers[0]
            if fiber.alive and not fiber.waiting:
                banked, fiber._banked = fiber._banked, None
                action = fiber.advance(banked)
                if isinstance(action, EnvCall):
                    fiber.waiting = True
                    fiber._pending = action
                    self._await = 0
                    if action.kind is SyscallClass.OUTPUT:
                        self.outputs.append((action.fd, action.out_buf or b""))
                    return action
                if isinstance(action, _Crash):
                    self._status = Status.crashed(action.fault)
                    return self.outcome()
                if isinstance(action, _ProcessExit):
                    self._status = Status.exited(action.code)
                    return self.outcome()
                if action is _FIBER_DONE:
                    fiber.alive = False
                    self._status = Status.exited(0)
                    return self.outcome()
                raise HarnessError(f"fiber returned unexpected action {action!r}")

        n = len(self.fibers)
        offset = 0
        while True:
            chosen = None
            for k in range(n):
                i = (start + offset + k) % n
                f = self.fibers[i]
                if f.alive and not f.waiting:
                    chosen = i
                    break
            if chosen is None:
                if not any(f.alive for f in self.fibers):
                    self._status = Status.exited(0)
                    return self.outcome()
                raise HarnessError("all fibers blocked; deadlocked schedule")
            fiber = self.fibers[chosen]
            banked, fiber._banked = fiber._banked, None
            action = fiber.advance(banked)
            if isinstance(action, EnvCall):
                fiber.waiting = True
                fiber._pending = action
                self._await = chosen
                if action.kind is SyscallClass.OUTPUT:
                    self.outputs.append((action.fd, action.out_buf or b""))
                return action
            if isinstance(action, _Crash):
                self._status = Status.crashed(action.fault)
                return self.outcome()
            if isinstance(action, _ProcessExit):
                self._status = Status.exited(action.code)
                return self.outcome()
            if action is _FIBER_DONE:
                fiber.alive = False
                offset = (chosen - start + 1) % n
                continue
            raise HarnessError(f"fiber returned unexpected action {action!r}")


def snapshot(state: TargetState) -> TargetState:
    return state.snapshot()


def restore(snap: TargetState) -> TargetState:
    """Restoring hands back another independent copy, so one snapshot can
    seed any number of branch runs."""
    return snap.snapshot()


# --- bundled targets -------------------------------------------------------

_EXPR_RE = re.compile(rb"^\s*(\d+)\s*([+\-*/])\s*(\d+)")


class _CalcFiber(Fiber):
    """Calculator: config from fd 0, UI protocol on socket fd 3.

    Planted bugs: config line over 64 bytes overflows a fixed buffer;
    dividing by zero; receiving the close command before any expression
    was evaluated trips a bookkeeping assertion.
    """

    B_READ_CONFIG = 1
    B_CONFIG_OK = 2
    B_CONFIG_OVERFLOW = 3
    B_UI_INIT = 4
    B_RECV_CMD = 5
    B_EOF = 6
    B_CLOSE_EARLY = 7
    B_CLOSE = 8
    B_OP = {ord("+"): 9, ord("-"): 10, ord("*"): 11, ord("/"): 12}
    B_DIV_ZERO = 13
    B_RESULT = 14
    B_IGNORED = 15
    B_GOODBYE = 16
    B_EXIT = 17
    B_MODE_RPN = 18
    B_MODE_PLAIN = 19

    __slots__ = ("rpn", "exprs_done")

    def __init__(self):
        super().__init__(tid=0)
        self.rpn = False
        self.exprs_done = 0

    def clone(self):
        dup = _CalcFiber.__new__(_CalcFiber)
        self._copy_base(dup)
        dup.rpn = self.rpn
        dup.exprs_done = self.exprs_done
        return dup

    def advance(self, reply: Reply | None):
        pc = self.pc
        if pc == "start":
            self.block(self.B_READ_CONFIG)
            self.pc = "config"
            return self.input_call("read", fd=0, capacity=256)
        if pc == "config":
            line = reply.data.split(b"\n", 1)[0]
            if len(line) > 64:
                self.block(self.B_CONFIG_OVERFLOW)
                return self.crash(FAULT_MEMORY)
            self.block(self.B_CONFIG_OK)
            mode = line.split(b"=", 1)[1] if b"=" in line else line
            self.rpn = mode.startswith(b"rpn")
            self.block(self.B_MODE_RPN if self.rpn else self.B_MODE_PLAIN)
            self.block(self.B_UI_INIT)
            self.pc = "loop"
            return self.output_call("send", fd=3, data=b"UI:INIT")
        if pc == "loop":
            self.block(self.B_RECV_CMD)
            self.pc = "command"
            return self.input_call("recv", fd=3, capacity=4096)
        if pc == "command":
            if reply.ret == 0:
                self.block(self.B_EOF)
                return self._goodbye()
            cmd = reply.data
            if cmd == b"close":
                if self.exprs_done == 0:
                    self.block(self.B_CLOSE_EARLY)
                    return self.crash(FAULT_ASSERTION)
                self.block(self.B_CLOSE)
                return self._goodbye()
            m = _EXPR_RE.match(cmd)
            if m is None:
                self.block(self.B_IGNORED)
                self.pc = "loop"
                return self.advance(None)
            a, op, b = int(m.group(1)), m.group(2)[0], int(m.group(3))
            self.block(self.B_OP[op])
            if op == ord("/"):
                if b == 0:
                    self.block(self.B_DIV_ZERO)
                    return self.crash(FAULT_ARITHMETIC)
                value = a // b
            elif op == ord("+"):
                value = a + b
            elif op == ord("-"):
                value = a - b
            else:
                value = a * b
            self.exprs_done += 1
            self.block(self.B_RESULT)
            self.pc = "loop"
            prefix = b"RES:" if self.rpn else b"RESULT:"
            return self.output_call("send", fd=3, data=prefix + b"%d" % value)
        if pc == "goodbye":
            self.block(self.B_EXIT)
            self.pc = "exited"
            return self.exit_call(0)
        if pc == "exited":
            return self.process_exit(0)
        raise HarnessError(f"calc: bad pc {pc!r}")

    def _goodbye(self):
        self.block(self.B_GOODBYE)
        self.pc = "goodbye"
        return self.output_call("write", fd=1, data=b"bye\n")


class _EchoFiber(Fiber):
    """Echo server on socket fd 4: poll, recv, echo back, repeat.

    Planted bug: a message starting 0xFF 0xFF and longer than 16 bytes
    overruns the reassembly buffer.
    """

    B_POLL = 20
    B_HUP = 21
    B_RECV = 22
    B_MAGIC = 23
    B_MAGIC_LONG = 24
    B_CTRL = 25
    B_HIGH = 26
    B_TEXT = 27
    B_EMPTY = 28
    B_SHORT = 29
    B_MID = 30
    B_LONG = 31
    B_HIGHBYTE = 32
    B_ECHO = 33
    B_EXIT = 34

    __slots__ = ()

    def __init__(self):
        super().__init__(tid=0)

    def clone(self):
        return self._copy_base(_EchoFiber.__new__(_EchoFiber))

    def advance(self, reply: Reply | None):
        pc = self.pc
        if pc == "start":
            self.block(self.B_POLL)
            self.pc = "polled"
            return self.poll_call([(4, POLLIN)])
        if pc == "polled":
            revents = reply.poll_set[0].revents
            if revents & POLLHUP or not revents & POLLIN:
                self.block(self.B_HUP)
                return self._exit()
            self.block(self.B_RECV)
            self.pc = "received"
            return self.input_call("recv", fd=4, capacity=4096)
        if pc == "received":
            if reply.ret == 0:
                return self._exit()
            msg = reply.data
            first = msg[0]
            if first == 0xFF and len(msg) > 1 and msg[1] == 0xFF:
                self.block(self.B_MAGIC)
                if len(msg) > 16:
                    self.block(self.B_MAGIC_LONG)
                    return self.crash(FAULT_MEMORY)
            elif first < 0x20:
                self.block(self.B_CTRL)
            elif first >= 0x80:
                self.block(self.B_HIGH)
            else:
                self.block(self.B_TEXT)
            if len(msg) <= 8:
                self.block(self.B_SHORT)
            elif len(msg) <= 64:
                self.block(self.B_MID)
            else:
                self.block(self.B_LONG)
            for b in msg[:32]:  # header scan only
                if b >= 0x80:
                    self.block(self.B_HIGHBYTE)
            self.block(self.B_ECHO)
            self.pc = "start"
            return self.output_call("send", fd=4, data=msg)
        if pc == "exited":
            return self.process_exit(0)
        raise HarnessError(f"echo_server: bad pc {pc!r}")

    def _exit(self):
        self.block(self.B_EXIT)
        self.pc = "exited"
        return self.exit_call(0)


class _ConfigParserFiber(Fiber):
    """key=value parser reading fd 0 to EOF.

    Planted bug: a value holding more than 8 commas indexes past a fixed
    field table.
    """

    B_READ = 40
    B_PARSE = 41
    B_SKIP = 42
    B_KEY = 43
    B_VALUE = 44
    B_FIELD_BASE = 45  # blocks 45..53: handler for field slot 0..8
    B_COMMA_OVERFLOW = 54
    B_STORED = 55
    B_SUMMARY = 56
    B_EXIT = 57
    B_TRUNCATED = 58

    MAX_ENTRIES = 16
    MAX_LINES = 256

    __slots__ = ("data", "entries")

    def __init__(self):
        super().__init__(tid=0)
        self.data = b""
        self.entries = 0

    def clone(self):
        dup = _ConfigParserFiber.__new__(_ConfigParserFiber)
        self._copy_base(dup)
        dup.data = self.data
        dup.entries = self.entries
        return dup

    def advance(self, reply: Reply | None):
        pc = self.pc
        if pc == "start":
            self.block(self.B_READ)
            self.pc = "reading"
            return self.input_call("read", fd=0, capacity=4096)
        if pc == "reading":
            if reply.ret > 0:
                self.data += reply.data
                self.block(self.B_READ)
                return self.input_call("read", fd=0, capacity=4096)
            self.block(self.B_PARSE)
            for lineno, line in enumerate(self.data.split(b"\n")):
                if lineno >= self.MAX_LINES or self.entries >= self.MAX_ENTRIES:
                    self.block(self.B_TRUNCATED)
                    break
                if b"=" not in line:
                    self.block(self.B_SKIP)
                    continue
                self.block(self.B_KEY)
                value = line.split(b"=", 1)[1]
                self.block(self.B_VALUE)
                # Each comma dispatches the next slot of an 8-entry field
                # table; the 9th indexes past its end.
                for i in range(value.count(b",")):
                    if i > 8:
                        break
                    self.block(self.B_FIELD_BASE + i)
                    if i == 8:
                        self.block(self.B_COMMA_OVERFLOW)
                        return self.crash(FAULT_MEMORY)
                self.entries += 1
                self.block(self.B_STORED)
            self.block(self.B_SUMMARY)
            self.pc = "summary"
            return self.output_call("write", fd=1, data=b"ok:%d\n" % self.entries)
        if pc == "summary":
            self.block(self.B_EXIT)
            self.pc = "exited"
            return self.exit_call(0)
        if pc == "exited":
            return self.process_exit(0)
        raise HarnessError(f"config_parser: bad pc {pc!r}")


BUNDLED_TARGETS = ("calc", "echo_server", "config_parser")


def bundled_target(name: str) -> TargetState:
    """A fresh state for one of the bundled targets."""
    if name == "calc":
        return TargetState("calc", [_CalcFiber()])
    if name == "echo_server":
        return TargetState("echo_server", [_EchoFiber()])
    if name == "config_parser":
        return TargetState("config_parser", [_ConfigParserFiber()])
    raise TargetError(f"unknown target {name!r}; available: {', '.join(BUNDLED_TARGETS)}")
