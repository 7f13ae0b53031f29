"""Phase one: run a target against a scripted environment and log everything.

The environment script plays the role of the outside world: it holds the
stimulus bytes each descriptor will produce, answers readiness probes
truthfully from what is still pending, and gives every source a path so
recorded inputs know whether they may ever be mutated.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

from .targets import (
    POLLHUP,
    POLLIN,
    POLLOUT,
    EnvCall,
    PollEntry,
    Reply,
    TargetOutcome,
    TargetState,
)
from .trace import Recording, SyscallClass, assemble_recording

DEFAULT_STEP_BUDGET = 1_000_000


class EnvScriptError(ValueError):
    pass


@dataclass
class FdSource:
    kind: str = "file"
    path: str = ""
    stimuli: list[bytes] = field(default_factory=list)


@dataclass
class EnvScript:
    """Deterministic environment: per-fd stimulus queues plus source table."""

    sources: dict[int, FdSource] = field(default_factory=dict)

    @classmethod
    def from_json(cls, text: str) -> "EnvScript":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise EnvScriptError(f"bad env-script JSON: {e.msg}") from e
        if not isinstance(doc, dict):
            raise EnvScriptError("env script must be an object keyed by fd")
        sources: dict[int, FdSource] = {}
        for key, entry in doc.items():
            try:
                fd = int(key)
            except ValueError:
                raise EnvScriptError(f"fd key {key!r} is not an integer") from None
            if not isinstance(entry, dict):
                raise EnvScriptError(f"fd {fd}: entry must be an object")
            try:
                stimuli = [bytes.fromhex(s) for s in entry.get("stimuli", [])]
            except ValueError:
                raise EnvScriptError(f"fd {fd}: stimuli must be hex strings") from None
            sources[fd] = FdSource(
                kind=entry.get("kind", "file"),
                path=entry.get("path", ""),
                stimuli=stimuli,
            )
        return cls(sources)

    def to_json(self) -> str:
        doc = {
            str(fd): {
                "kind": src.kind,
                "path": src.path,
                "stimuli": [s.hex() for s in src.stimuli],
            }
            for fd, src in sorted(self.sources.items())
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def meta(self) -> dict[str, str]:
        return {f"fd:{fd}": src.path for fd, src in sorted(self.sources.items()) if src.path}


DEFAULT_SCRIPTS: dict[str, EnvScript] = {
    "calc": EnvScript(
        {
            0: FdSource("file", "config.txt", [b"mode=simple\n"]),
            3: FdSource("socket", "socket:ui", [b"1+2=", b"close"]),
        }
    ),
    "echo_server": EnvScript(
        {
            4: FdSource("socket", "socket:client", [b"hello", b"world", b"ping!"]),
        }
    ),
    "config_parser": EnvScript(
        {
            0: FdSource("file", "settings.conf", [b"name=calc\nmode=rpn\n"]),
        }
    ),
}


def default_env_script(target_name: str) -> EnvScript:
    try:
        script = DEFAULT_SCRIPTS[target_name]
    except KeyError:
        raise EnvScriptError(f"no default env script for target {target_name!r}") from None
    return EnvScript(
        {
            fd: FdSource(src.kind, src.path, list(src.stimuli))
            for fd, src in script.sources.items()
        }
    )


class _RecordingEnvironment:
    """Serves env-calls from the script and logs the record tuples."""

    def __init__(self, script: EnvScript):
        self.pending: dict[int, deque[bytes]] = {
            fd: deque(src.stimuli) for fd, src in script.sources.items()
        }
        self.raw: list[tuple[int, str, int | None, tuple[int, ...], bytes | None, int]] = []

    def _has_pending(self, fd: int) -> bool:
        q = self.pending.get(fd)
        return bool(q)

    def serve(self, call: EnvCall) -> Reply:
        kind = call.kind
        if kind is SyscallClass.INPUT:
            q = self.pending.get(call.fd)
            if q:
                stimulus = q.popleft()
                data = stimulus[: call.in_capacity]
                rest = stimulus[call.in_capacity :]
                if rest:
                    q.appendleft(rest)
            else:
                data = b""
            reply = Reply(len(data), data)
            self.raw.append((call.tid, call.sys, call.fd, call.args, data, len(data)))
        elif kind is SyscallClass.OUTPUT:
            data = call.out_buf or b""
            reply = Reply(len(data))
            self.raw.append((call.tid, call.sys, call.fd, call.args, data, len(data)))
        elif kind is SyscallClass.READINESS:
            filled: list[PollEntry] = []
            args: list[int] = []
            ready = 0
            for e in call.poll_set or []:
                revents = 0
                if e.events & POLLIN:
                    revents |= POLLIN if self._has_pending(e.fd) else POLLHUP
                if e.events & POLLOUT:
                    revents |= POLLOUT
                if revents:
                    ready += 1
                filled.append(PollEntry(e.fd, e.events, revents))
                args.extend((e.fd, e.events, revents))
            reply = Reply(ready, poll_set=filled)
            self.raw.append((call.tid, call.sys, None, tuple(args), None, ready))
        else:
            # Lifecycle and everything else succeeds benignly while recording.
            reply = Reply(0)
            self.raw.append((call.tid, call.sys, call.fd, call.args, None, 0))
        return reply


def record(
    target: TargetState,
    script: EnvScript,
    step_budget: int = DEFAULT_STEP_BUDGET,
) -> Recording:
    """Run the target to completion against the script, logging every
    interaction in issue order. The recording ends at exit, crash, or when
    the step budget cuts a run the script can no longer satisfy."""
    env = _RecordingEnvironment(script)
    reply: Reply | None = None
    status = "hung"
    for _ in range(step_budget):
        result = target.step(reply)
        if isinstance(result, TargetOutcome):
            s = result.status
            status = f"{s.kind}:{s.fault or s.code}"
            break
        reply = env.serve(result)
    meta = script.meta()
    meta["status"] = status
    return assemble_recording(target.name, meta, env.raw)
