"""Faithful and relaxed replay of a recording.

Faithful (spine) replay serves recorded results in global order and treats
any deviation as a fatal integrity error. Relaxed (branch) replay keeps a
diverged execution alive: the unconsumed tail of the recording is
partitioned into per-descriptor miniqueues, readiness is emulated from the
queue heads, inputs and outputs are served in per-descriptor order with
deterministic reordering when the head does not match, and non-I/O calls
fall through a policy table (emulate, forward, fail, or give up and end
the branch).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Callable

from .targets import POLLHUP, POLLIN, POLLOUT, EnvCall, PollEntry, Reply
from .trace import Record, SyscallClass

ENOSYS_RET = -38
MAX_CONSECUTIVE_FAILS = 8

InputFilter = Callable[[Record, bytes], bytes]


class SpineMismatchError(RuntimeError):
    """The target deviated from the recording during faithful replay."""

    def __init__(self, seq: int, detail: str):
        super().__init__(f"spine mismatch at record {seq}: {detail}")
        self.seq = seq


@dataclass
class DivergenceLog:
    """Counters of every way a branch deviated from the recording.

    `non_io_emulated` covers both synthesized results and calls mapped to a
    benign pass-through success.
    """

    reordered_io: int = 0
    extraneous_output: int = 0
    eof_served: int = 0
    non_io_emulated: int = 0
    non_io_failed: int = 0
    forced_exit: int = 0

    def total(self) -> int:
        return sum(self.as_dict().values())

    def as_dict(self) -> dict[str, int]:
        return {
            "reordered_io": self.reordered_io,
            "extraneous_output": self.extraneous_output,
            "eof_served": self.eof_served,
            "non_io_emulated": self.non_io_emulated,
            "non_io_failed": self.non_io_failed,
            "forced_exit": self.forced_exit,
        }


# --- faithful replay ---------------------------------------------------------


def _poll_matches(record: Record, call: EnvCall) -> bool:
    triples = record.args
    entries = call.poll_set or []
    if len(triples) != 3 * len(entries):
        return False
    for i, e in enumerate(entries):
        if triples[3 * i] != e.fd or triples[3 * i + 1] != e.events:
            return False
    return True


def call_matches(record: Record, call: EnvCall) -> bool:
    if record.sys != call.sys or record.tid != call.tid or record.fd != call.fd:
        return False
    if record.kind is SyscallClass.READINESS:
        return _poll_matches(record, call)
    return True


def faithful_step(record: Record, call: EnvCall) -> Reply:
    """Serve one env-call from its record, byte-for-byte."""
    if not call_matches(record, call):
        raise SpineMismatchError(
            record.seq,
            f"recorded {record.sys}(fd={record.fd}) but target issued "
            f"{call.sys}(fd={call.fd}, tid={call.tid})",
        )
    kind = record.kind
    if kind is SyscallClass.INPUT:
        return Reply(record.ret, record.buf if record.ret > 0 else b"")
    if kind is SyscallClass.READINESS:
        filled = [
            PollEntry(record.args[i], record.args[i + 1], record.args[i + 2])
            for i in range(0, len(record.args), 3)
        ]
        return Reply(record.ret, poll_set=filled)
    # Outputs discard the buffer; lifecycle/other return the recorded value.
    return Reply(record.ret)


# --- miniqueues --------------------------------------------------------------


class MiniqueueMap:
    """The recording tail partitioned per descriptor, I/O records only."""

    def __init__(self):
        self.queues: dict[int, deque[Record]] = {}
        self.closed: set[int] = set()

    def queue(self, fd: int) -> deque[Record]:
        q = self.queues.get(fd)
        if q is None:
            q = deque()
            self.queues[fd] = q
        return q

    def head(self, fd: int) -> Record | None:
        """Effective head: None when the queue is drained or the fd closed."""
        if fd in self.closed:
            return None
        q = self.queues.get(fd)
        return q[0] if q else None

    def merged(self) -> list[Record]:
        out = [r for q in self.queues.values() for r in q]
        out.sort(key=lambda r: r.seq)
        return out


def partition_io(suffix: list[Record]) -> dict[int, list[Record]]:
    """Stable partition of the suffix's input/output records by fd."""
    parts: dict[int, list[Record]] = {}
    for r in suffix:
        if r.kind in (SyscallClass.INPUT, SyscallClass.OUTPUT):
            part = parts.get(r.fd)
            if part is None:
                parts[r.fd] = [r]
            else:
                part.append(r)
    return parts


def build_miniqueues(suffix: list[Record]) -> MiniqueueMap:
    """Per-fd miniqueues over the suffix's input/output records."""
    q = MiniqueueMap()
    for fd, part in partition_io(suffix).items():
        q.queues[fd] = deque(part)
    return q


# --- relaxed replay ----------------------------------------------------------


class BranchSession:
    """Relaxed-replay service for one branch execution.

    Every served input payload is either a recorded payload, a mutation of
    a mutable recorded payload (via `input_filter`), a short-read prefix of
    one of those, or a forced end-of-file.
    """

    def __init__(
        self,
        suffix: list[Record],
        input_filter: InputFilter | None = None,
        partition: dict[int, list[Record]] | None = None,
    ):
        if partition is None:
            partition = partition_io(suffix)
        self.q = MiniqueueMap()
        for fd, part in partition.items():
            self.q.queues[fd] = deque(part)
        self.log = DivergenceLog()
        self.input_filter = input_filter
        self._fail_key: tuple | None = None
        self._fail_run = 0

    # -- first reply at the fork point ------------------------------------

    def serve_mutant(self, record: Record, call: EnvCall, payload: bytes) -> Reply:
        """Answer the pending input call at the fork with the mutant payload."""
        return self._deliver_input(record, call, payload)

    def _deliver_input(self, record: Record, call: EnvCall, payload: bytes) -> Reply:
        capacity = call.in_capacity if call.in_capacity is not None else len(payload)
        data = payload[:capacity]
        rest = payload[capacity:]
        if rest:
            # Remainder stays at the queue head as an already-mutated,
            # no-longer-mutable residue of the same interaction.
            self.q.queue(call.fd).appendleft(
                replace(record, buf=rest, ret=len(rest), mutable=False)
            )
        return Reply(len(data), data)

    # -- emulation routines -------------------------------------------------

    def _reorder(self, fd: int, want_input: bool, want_output: bool) -> None:
        """Promote the earliest record matching the request to the head, or
        pop the head when nothing matches (guaranteeing progress)."""
        q = self.q.queue(fd)
        self.log.reordered_io += 1
        for i, rec in enumerate(q):
            if (want_input and rec.kind is SyscallClass.INPUT) or (
                want_output and rec.kind is SyscallClass.OUTPUT
            ):
                if i > 0:
                    del q[i]
                    q.appendleft(rec)
                return
        q.popleft()

    def emulate_poll(self, entries: list[PollEntry]) -> Reply:
        """Readiness from the current queue heads; never blocks.

        Drained or closed descriptors report hang-up; otherwise the head's
        class is matched against the requested events. When no entry is
        ready, one descriptor's queue is deterministically reordered and
        the scan repeats, so the routine always terminates.
        """
        fds = [PollEntry(e.fd, e.events) for e in entries]
        if not fds:
            return Reply(0, poll_set=[])
        while True:
            ready = 0
            hups = 0
            for e in fds:
                head = self.q.head(e.fd)
                if head is None:
                    e.revents = POLLHUP
                    hups += 1
                else:
                    e.revents = e.events & (
                        POLLIN if head.kind is SyscallClass.INPUT else POLLOUT
                    )
                    if e.revents:
                        ready += 1
            if ready > 0 or hups > 0:
                count = sum(1 for e in fds if e.revents)
                return Reply(count, poll_set=fds)
            fd = self._pick(fds)
            events = 0
            for e in fds:
                if e.fd == fd:
                    events |= e.events
            self._reorder(fd, bool(events & POLLIN), bool(events & POLLOUT))

    def _pick(self, fds: list[PollEntry]) -> int:
        """Polled descriptor whose queue head is oldest; falls back to the
        oldest head anywhere if every polled queue is empty."""
        best_fd = None
        best_seq = None
        for e in fds:
            head = self.q.head(e.fd)
            if head is not None and (best_seq is None or head.seq < best_seq):
                best_fd, best_seq = e.fd, head.seq
        if best_fd is not None:
            return best_fd
        for fd in self.q.queues:
            head = self.q.head(fd)
            if head is not None and (best_seq is None or head.seq < best_seq):
                best_fd, best_seq = fd, head.seq
        return best_fd if best_fd is not None else fds[0].fd

    def emulate_input(self, record_call: EnvCall) -> Reply:
        """Implicit single-fd poll, then pop and serve the head record."""
        fd = record_call.fd
        while True:
            head = self.q.head(fd)
            if head is None:
                self.log.eof_served += 1
                return Reply(0)
            if head.kind is SyscallClass.INPUT:
                break
            self._reorder(fd, want_input=True, want_output=False)
        rec = self.q.queue(fd).popleft()
        payload = rec.buf or b""
        if self.input_filter is not None and rec.mutable:
            payload = self.input_filter(rec, payload)
        return self._deliver_input(rec, record_call, payload)

    def emulate_output(self, call: EnvCall) -> Reply:
        """Consume the matching output record if one exists; always succeed."""
        data = call.out_buf or b""
        fd = call.fd
        head = self.q.head(fd)
        if head is not None:
            if head.kind is SyscallClass.OUTPUT:
                self.q.queue(fd).popleft()
            elif any(r.kind is SyscallClass.OUTPUT for r in self.q.queue(fd)):
                self._reorder(fd, want_input=False, want_output=True)
                self.q.queue(fd).popleft()
            else:
                self.log.extraneous_output += 1
        else:
            self.log.extraneous_output += 1
        return Reply(len(data))

    def _reset_fail_streak(self) -> None:
        self._fail_key = None
        self._fail_run = 0

    def emulate_other(self, call: EnvCall) -> Reply | None:
        """Policy-driven handling of non-I/O calls; None ends the branch."""
        sys = call.sys
        if sys == "exit":
            return Reply(0)
        if sys == "close":
            self._reset_fail_streak()
            self.log.non_io_emulated += 1
            if call.fd is not None:
                self.q.closed.add(call.fd)
            return Reply(0)
        if sys in ("open", "socket", "accept"):
            self._reset_fail_streak()
            self.log.non_io_emulated += 1
            return Reply(self._allocate_fd())
        if sys == "connect":
            self._reset_fail_streak()
            self.log.non_io_emulated += 1
            return Reply(0)
        if sys in _FORWARD_AS_SUCCESS:
            self._reset_fail_streak()
            self.log.non_io_emulated += 1
            return Reply(0)
        # Unknown: fail with a not-implemented code; a target that retries
        # the same failing call in a loop gets its branch terminated.
        self.log.non_io_failed += 1
        key = (sys, call.fd, call.args)
        if key == self._fail_key:
            self._fail_run += 1
        else:
            self._fail_key = key
            self._fail_run = 1
        if self._fail_run > MAX_CONSECUTIVE_FAILS:
            self.log.forced_exit += 1
            return None
        return Reply(ENOSYS_RET)

    def _allocate_fd(self) -> int:
        """Lowest descriptor not currently open, kernel-style; reopening a
        closed number resumes whatever records remain in its queue."""
        open_fds = {0, 1, 2}
        open_fds.update(fd for fd in self.q.queues if fd not in self.q.closed)
        fd = 0
        while fd in open_fds:
            fd += 1
        self.q.closed.discard(fd)
        return fd

    def handle(self, call: EnvCall) -> Reply | None:
        kind = call.kind
        if kind is not SyscallClass.OTHER:
            self._reset_fail_streak()
        if kind is SyscallClass.INPUT:
            return self.emulate_input(call)
        if kind is SyscallClass.OUTPUT:
            return self.emulate_output(call)
        if kind is SyscallClass.READINESS:
            return self.emulate_poll(call.poll_set or [])
        return self.emulate_other(call)


_FORWARD_AS_SUCCESS = frozenset(
    {"brk", "mmap", "munmap", "mprotect", "getpid", "gettid", "gettimeofday",
     "clock_gettime", "nanosleep", "sched_yield"}
)


class NoRelaxedSession:
    """Branch service with divergence handling disabled: the tail of the
    recording is served in global order and the branch is cut at the first
    call that no longer matches it."""

    def __init__(self, suffix: list[Record], input_filter: InputFilter | None = None):
        self.suffix = suffix
        self.pos = 0
        self.log = DivergenceLog()
        self.input_filter = input_filter

    def serve_mutant(self, record: Record, call: EnvCall, payload: bytes) -> Reply:
        capacity = call.in_capacity if call.in_capacity is not None else len(payload)
        data = payload[:capacity]
        return Reply(len(data), data)

    def handle(self, call: EnvCall) -> Reply | None:
        if self.pos >= len(self.suffix):
            self.log.forced_exit += 1
            return None
        rec = self.suffix[self.pos]
        if not call_matches(rec, call):
            self.log.forced_exit += 1
            return None
        self.pos += 1
        if rec.kind is SyscallClass.INPUT:
            payload = rec.buf or b""
            if self.input_filter is not None and rec.mutable:
                payload = self.input_filter(rec, payload)
            capacity = call.in_capacity if call.in_capacity is not None else len(payload)
            return Reply(len(payload[:capacity]), payload[:capacity])
        return faithful_step(rec, call)
