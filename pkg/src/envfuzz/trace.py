"""Interaction records, recordings, and the on-disk trace format (ETF).

A recording is the ordered log of every environmental interaction a target
performed: one record per syscall-like event, carrying the name, file
descriptor, payload bytes and return value. Recordings serialize to ETF,
a JSON-Lines format (one header line, then one line per record), and can
also be imported from a simple strace-like text format.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

ETF_VERSION = 1

# Sources whose contents a real environment could never plausibly hand to a
# fuzzer mutated (kernel-backed pseudo-files, self-pipes). Inputs read from
# them keep their recorded payload.
IMMUTABLE_PATH_PREFIXES = ("/proc/", "/dev/", "self-pipe:")


class SyscallClass(Enum):
    INPUT = "input"
    OUTPUT = "output"
    READINESS = "readiness"
    LIFECYCLE = "lifecycle"
    OTHER = "other"


_CLASS_TABLE: dict[str, SyscallClass] = {}
for _name in ("read", "recv", "recvfrom", "recvmsg", "pread"):
    _CLASS_TABLE[_name] = SyscallClass.INPUT
for _name in ("write", "send", "sendto", "sendmsg", "pwrite"):
    _CLASS_TABLE[_name] = SyscallClass.OUTPUT
for _name in ("poll", "select", "epoll_wait"):
    _CLASS_TABLE[_name] = SyscallClass.READINESS
for _name in ("open", "close", "socket", "accept", "connect", "exit"):
    _CLASS_TABLE[_name] = SyscallClass.LIFECYCLE


def classify(sys: str) -> SyscallClass:
    """Map a syscall name to its interaction class (unknown names -> OTHER)."""
    return _CLASS_TABLE.get(sys, SyscallClass.OTHER)


def is_immutable_path(path: str) -> bool:
    return path.startswith(IMMUTABLE_PATH_PREFIXES)


class EtfError(ValueError):
    """Malformed ETF stream; carries the 1-based line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EtfVersionError(EtfError):
    pass


class TraceImportError(ValueError):
    """Malformed text trace; carries 1-based line and column."""

    def __init__(self, line: int, column: int, reason: str):
        super().__init__(f"line {line}, column {column}: {reason}")
        self.line = line
        self.column = column
        self.reason = reason


@dataclass(frozen=True)
class Record:
    """One intercepted environmental interaction."""

    seq: int
    tid: int
    sys: str
    fd: int | None
    args: tuple[int, ...]
    buf: bytes | None
    ret: int
    kind: SyscallClass
    mutable: bool = False

    def __post_init__(self):
        if self.kind is not classify(self.sys):
            raise ValueError(f"record {self.seq}: class does not match syscall {self.sys!r}")
        if self.kind is SyscallClass.INPUT and self.ret >= 0 and self.ret != len(self.buf or b""):
            raise ValueError(f"record {self.seq}: input ret {self.ret} != payload length")


def make_record(
    seq: int,
    tid: int,
    sys: str,
    fd: int | None = None,
    args: tuple[int, ...] = (),
    buf: bytes | None = None,
    ret: int = 0,
    fd_path: str = "",
) -> Record:
    """Build a record, deriving the class and the mutability flag.

    Only input payloads are mutation targets, and only when the backing
    source (`fd_path`) is not on the immutable list.
    """
    kind = classify(sys)
    if kind not in (SyscallClass.INPUT, SyscallClass.OUTPUT):
        buf = None
    elif buf is None:
        buf = b""
    mutable = kind is SyscallClass.INPUT and not is_immutable_path(fd_path)
    return Record(seq, tid, sys, fd, tuple(args), buf, ret, kind, mutable)


@dataclass
class Recording:
    """The ordered interaction log of one target execution.

    `meta` carries campaign notes plus `fd:<n>` keys mapping descriptors to
    source paths; mutability of input records is derived from those paths.
    """

    version: int = ETF_VERSION
    target: str = ""
    meta: dict[str, str] = field(default_factory=dict)
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def fd_path(self, fd: int | None) -> str:
        if fd is None:
            return ""
        return self.meta.get(f"fd:{fd}", "")

    def input_records(self) -> list[Record]:
        return [r for r in self.records if r.kind is SyscallClass.INPUT]


def assemble_recording(
    target: str,
    meta: dict[str, str],
    raw: list[tuple[int, str, int | None, tuple[int, ...], bytes | None, int]],
) -> Recording:
    """Assemble a recording from (tid, sys, fd, args, buf, ret) tuples.

    Sequence numbers are assigned densely from 0; mutability derives from
    the `fd:<n>` paths in `meta`.
    """
    rec = Recording(target=target, meta=dict(meta))
    for seq, (tid, sys, fd, args, buf, ret) in enumerate(raw):
        rec.records.append(
            make_record(seq, tid, sys, fd, args, buf, ret, fd_path=rec.fd_path(fd))
        )
    return rec


# --- ETF (JSON Lines) encoding -------------------------------------------
#
# Line 1: {"etf":1,"target":...,"meta":{...}}   (meta keys sorted)
# Then one object per record with keys in fixed order
# (seq, tid, sys, fd, args, buf, ret, class); buf is lowercase hex.
# Mutability is not stored: it is re-derived from the header's fd paths.


def _record_line(r: Record) -> str:
    return json.dumps(
        {
            "seq": r.seq,
            "tid": r.tid,
            "sys": r.sys,
            "fd": r.fd,
            "args": list(r.args),
            "buf": r.buf.hex() if r.buf is not None else None,
            "ret": r.ret,
            "class": r.kind.value,
        },
        separators=(",", ":"),
    )


def encode_recording(rec: Recording) -> bytes:
    header = json.dumps(
        {"etf": rec.version, "target": rec.target, "meta": rec.meta},
        separators=(",", ":"),
        sort_keys=True,
    )
    lines = [header]
    lines.extend(_record_line(r) for r in rec.records)
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_recording(data: bytes) -> Recording:
    text = data.decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EtfError(1, "empty stream, expected ETF header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise EtfError(1, f"bad header JSON: {e.msg}") from e
    if not isinstance(header, dict) or "etf" not in header:
        raise EtfError(1, "missing 'etf' version field")
    if header["etf"] != ETF_VERSION:
        raise EtfVersionError(1, f"unsupported ETF version {header['etf']!r}")
    rec = Recording(
        version=header["etf"],
        target=header.get("target", ""),
        meta=dict(header.get("meta", {})),
    )
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise EtfError(lineno, f"bad record JSON: {e.msg}") from e
        try:
            seq = obj["seq"]
            buf = bytes.fromhex(obj["buf"]) if obj["buf"] is not None else None
            record = make_record(
                seq,
                obj["tid"],
                obj["sys"],
                obj["fd"],
                tuple(obj["args"]),
                buf,
                obj["ret"],
                fd_path=rec.fd_path(obj["fd"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise EtfError(lineno, f"bad record: {e}") from e
        if record.seq != len(rec.records):
            raise EtfError(lineno, f"seq {record.seq} out of order, expected {len(rec.records)}")
        if record.kind.value != obj["class"]:
            raise EtfError(lineno, f"class {obj['class']!r} does not match syscall {record.sys!r}")
        rec.records.append(record)
    return rec


# --- text trace import ----------------------------------------------------
#
# One record per line:  SEQ TID NAME(ARG, ...) = RET
# Arguments are decimal integers or one double-quoted string with C escapes
# (\n, \t, \xNN, \\, \"). The first integer argument of an input/output
# call is its file descriptor. `open` lines register the returned fd's path
# so mutability matches recorder-produced traces.

_LINE_RE = re.compile(r"^\s*(\d+)\s+(\d+)\s+([a-z_][a-z0-9_]*)\((.*)\)\s*=\s*(-?\d+)\s*$")

_ESCAPES = {"n": b"\n", "t": b"\t", "\\": b"\\", '"': b'"'}


@dataclass
class ImportResult:
    recording: Recording
    unknown_syscalls: int


def _parse_quoted(text: str, lineno: int, start: int) -> tuple[bytes, int]:
    """Parse a double-quoted string starting at `start`; returns (bytes, end)."""
    out = bytearray()
    i = start + 1
    while i < len(text):
        c = text[i]
        if c == '"':
            return bytes(out), i + 1
        if c == "\\":
            if i + 1 >= len(text):
                raise TraceImportError(lineno, i + 2, "dangling escape")
            e = text[i + 1]
            if e in _ESCAPES:
                out += _ESCAPES[e]
                i += 2
            elif e == "x":
                if i + 3 >= len(text) or not re.match(r"[0-9a-fA-F]{2}", text[i + 2 : i + 4]):
                    raise TraceImportError(lineno, i + 3, "bad \\x escape")
                out.append(int(text[i + 2 : i + 4], 16))
                i += 4
            else:
                raise TraceImportError(lineno, i + 2, f"unknown escape \\{e}")
        else:
            out += c.encode("latin-1")
            i += 1
    raise TraceImportError(lineno, len(text) + 1, "unterminated string")


def _parse_args(text: str, lineno: int, offset: int) -> tuple[list[int], bytes | None, str | None]:
    """Parse ARGLIST; returns (int args, buffer bytes or None, path string or None)."""
    ints: list[int] = []
    buf: bytes | None = None
    i = 0
    expecting = True
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c == ",":
            if expecting:
                raise TraceImportError(lineno, offset + i + 1, "empty argument")
            expecting = True
            i += 1
        elif c == '"':
            if buf is not None:
                raise TraceImportError(lineno, offset + i + 1, "more than one string argument")
            buf, end = _parse_quoted(text, lineno, i)
            i = end
            expecting = False
        else:
            m = re.match(r"-?\d+", text[i:])
            if not m:
                raise TraceImportError(lineno, offset + i + 1, f"unexpected character {c!r}")
            ints.append(int(m.group()))
            i += m.end()
            expecting = False
    path = buf.decode("latin-1") if buf is not None else None
    return ints, buf, path


def import_text_trace(text: str) -> ImportResult:
    """Parse a text trace into a recording; unknown names become OTHER."""
    raw: list[tuple[int, str, int | None, tuple[int, ...], bytes | None, int]] = []
    fd_paths: dict[int, str] = {}
    unknown = 0
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        m = _LINE_RE.match(line)
        if not m:
            col = len(line) - len(line.lstrip()) + 1
            raise TraceImportError(lineno, col, "expected 'SEQ TID NAME(ARGS) = RET'")
        _, tid, name, argtext, ret = m.groups()
        kind = classify(name)
        if kind is SyscallClass.OTHER and name not in _CLASS_TABLE:
            unknown += 1
        ints, buf, path = _parse_args(argtext, lineno, m.start(4) + 1)
        fd = ints[0] if ints and kind in (
            SyscallClass.INPUT,
            SyscallClass.OUTPUT,
            SyscallClass.READINESS,
        ) else None
        if kind is SyscallClass.LIFECYCLE and name in ("close", "accept", "connect") and ints:
            fd = ints[0]
        retval = int(ret)
        record_buf = buf if kind in (SyscallClass.INPUT, SyscallClass.OUTPUT) else None
        if kind is SyscallClass.INPUT and record_buf is None:
            record_buf = b""
        if kind is SyscallClass.INPUT and retval >= 0 and retval != len(record_buf):
            raise TraceImportError(
                lineno, 1, f"input return {retval} does not match payload length {len(record_buf)}"
            )
        if name == "open" and path is not None and retval >= 0:
            fd_paths[retval] = path
        raw.append((int(tid), name, fd, tuple(ints), record_buf, retval))
    meta = {f"fd:{fd}": p for fd, p in sorted(fd_paths.items())}
    rec = assemble_recording(target="", meta=meta, raw=raw)
    return ImportResult(rec, unknown)


# --- corpora ---------------------------------------------------------------


@dataclass
class SeedStats:
    times_chosen: int = 0
    last_was_novel: bool = False
    no_novelty_streak: int = 0


@dataclass
class SeedCorpus:
    """The payload corpus attached to one input record."""

    record_index: int
    seeds: list[bytes] = field(default_factory=list)
    stats: list[SeedStats] = field(default_factory=list)
    _seen: set[bytes] = field(default_factory=set)

    def add(self, payload: bytes) -> bool:
        """Add a payload unless an identical one is already present."""
        if payload in self._seen:
            return False
        self._seen.add(payload)
        self.seeds.append(payload)
        self.stats.append(SeedStats())
        return True

    def __len__(self) -> int:
        return len(self.seeds)


def init_corpora(recording: Recording) -> dict[int, SeedCorpus]:
    """One singleton corpus per input record, holding its recorded payload."""
    corpora: dict[int, SeedCorpus] = {}
    for r in recording.input_records():
        corpus = SeedCorpus(record_index=r.seq)
        corpus.add(r.buf or b"")
        corpora[r.seq] = corpus
    return corpora


@dataclass
class CrashEntry:
    """A reproducible crashing or hanging mutant configuration."""

    fault: str
    mutated_payloads: dict[int, bytes]
    dedup_key: int

    @property
    def fork_seq(self) -> int:
        return min(self.mutated_payloads)
