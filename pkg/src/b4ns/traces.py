"""Syscall-trace analysis: reconstruct per-fd socket lifecycles.

Input is line-delimited JSON (one decoded syscall event per line); the
analyzer simulates each process's fd table, follows fork/clone fd
replication and accept derivation, classifies every operation into the
seven socket-syscall classes, and reports per-socket operation sequences,
a class histogram, and the set of configuration syscalls observed.
"""

import json
import re
from dataclasses import dataclass, field
from typing import Optional

from .errors import EmptyTrace
from .registry import SyscallClass, classify_syscall

STREAM_TYPES = (None, "SOCK_STREAM")  # untyped events pass the stream filter

_DUP_SYSCALLS = ("dup", "dup2", "dup3")
_FORK_SYSCALLS = ("fork", "clone")


@dataclass
class TraceEvent:
    ts: int
    pid: int
    tid: int
    syscall: str
    args: dict
    ret: int


@dataclass
class SocketLifecycle:
    origin: str  # "socket-call" | "accept-derived" | "fork-inherited" | "dup-derived" | "orphan"
    owner_pid: int
    fd: int
    ops: list = field(default_factory=list)  # (syscall, SyscallClass)
    closed: bool = False
    first_ts: Optional[int] = None

    def append(self, ev: TraceEvent, cls: SyscallClass):
        if self.first_ts is None:
            self.first_ts = ev.ts
        self.ops.append((ev.syscall, cls))

    def key(self):
        return (self.first_ts if self.first_ts is not None else -1,
                self.owner_pid, self.fd)


def parse_trace(stream):
    """Parse line-delimited JSON events; malformed lines are skipped and
    counted.  Raises EmptyTrace when nothing valid remains."""
    events = []
    skipped = 0
    for line in stream:
        line = line.strip()
        if not line:
            continue
        try:
            d = json.loads(line)
            ev = TraceEvent(
                ts=int(d["ts"]), pid=int(d["pid"]), tid=int(d["tid"]),
                syscall=str(d["syscall"]), args=dict(d.get("args") or {}),
                ret=int(d["ret"]),
            )
        except (ValueError, KeyError, TypeError):
            skipped += 1
            continue
        events.append(ev)
    if not events:
        raise EmptyTrace("no valid events in trace")
    events.sort(key=lambda e: e.ts)
    return events, skipped


def reconstruct(events):
    """Simulate per-process fd tables and emit one lifecycle per socket fd.

    fork/clone (ret = child pid) replicate the parent's table into the
    child as fork-inherited lifecycles; accept/accept4 derive connected
    sockets; dup* are treated as derivation too (fd aliasing would corrupt
    lifecycles otherwise) and flagged by their distinct origin.  Events on
    unknown fds become orphan lifecycles rather than being dropped.
    """
    tables = {}  # pid -> {fd -> SocketLifecycle}
    lifecycles = []
    orphans = {}  # (pid, fd) -> lifecycle

    def table(pid):
        return tables.setdefault(pid, {})

    def new_lifecycle(origin, pid, fd):
        lc = SocketLifecycle(origin=origin, owner_pid=pid, fd=fd)
        lifecycles.append(lc)
        table(pid)[fd] = lc
        return lc

    def orphan_for(ev, fd):
        key = (ev.pid, fd)
        lc = orphans.get(key)
        if lc is None or lc.closed:
            lc = SocketLifecycle(origin="orphan", owner_pid=ev.pid, fd=fd)
            lifecycles.append(lc)
            orphans[key] = lc
        return lc

    for ev in events:
        cls = classify_syscall(ev.syscall)
        fd = ev.args.get("fd")

        if ev.syscall == "socket":
            if ev.ret < 0:
                continue
            if ev.args.get("type") not in STREAM_TYPES:
                # non-stream sockets are out of scope; drop from tracking
                table(ev.pid).pop(ev.ret, None)
                continue
            lc = new_lifecycle("socket-call", ev.pid, ev.ret)
            lc.append(ev, cls)
            continue

        if ev.syscall in _FORK_SYSCALLS and ev.ret > 0:
            child = ev.ret
            for pfd, plc in list(table(ev.pid).items()):
                if plc.closed:
                    continue
                clc = new_lifecycle("fork-inherited", child, pfd)
                clc.append(ev, SyscallClass.DERIVATION)
            continue

        if ev.syscall in ("accept", "accept4"):
            listener = table(ev.pid).get(fd) if fd is not None else None
            if listener is not None and not listener.closed:
                listener.append(ev, cls)
                if ev.ret >= 0:
                    dlc = new_lifecycle("accept-derived", ev.pid, ev.ret)
                    dlc.first_ts = ev.ts
            elif fd is not None:
                orphan_for(ev, fd).append(ev, cls)
            continue

        if ev.syscall in _DUP_SYSCALLS:
            src = table(ev.pid).get(fd) if fd is not None else None
            if src is not None and not src.closed and ev.ret >= 0:
                src.append(ev, SyscallClass.DERIVATION)
                dlc = new_lifecycle("dup-derived", ev.pid, ev.ret)
                dlc.first_ts = ev.ts
            continue

        if cls is SyscallClass.NOT_HOOKED or fd is None:
            continue

        lc = table(ev.pid).get(fd)
        if lc is None or lc.closed:
            lc = orphan_for(ev, fd)
        lc.append(ev, cls)
        if cls is SyscallClass.CLOSE:
            lc.closed = True
            table(ev.pid).pop(fd, None)

    lifecycles.sort(key=SocketLifecycle.key)
    return lifecycles


@dataclass
class Report:
    lifecycles: list
    class_histogram: dict
    configuration_syscalls: list
    orphan_count: int
    dup_derived_count: int

    def to_json(self):
        return json.dumps({
            "lifecycles": [
                {
                    "origin": lc.origin,
                    "pid": lc.owner_pid,
                    "fd": lc.fd,
                    "closed": lc.closed,
                    "ops": [[name, cls.value] for name, cls in lc.ops],
                }
                for lc in self.lifecycles
            ],
            "class_histogram": self.class_histogram,
            "configuration_syscalls": self.configuration_syscalls,
            "orphan_count": self.orphan_count,
            "dup_derived_count": self.dup_derived_count,
        }, indent=2, sort_keys=True)

    def to_text(self):
        lines = []
        for lc in self.lifecycles:
            seq = " -> ".join(name for name, _ in lc.ops) or "(no ops)"
            flag = "" if lc.origin in ("socket-call", "accept-derived",
                                       "fork-inherited") else f" [{lc.origin}]"
            lines.append(f"pid {lc.owner_pid} fd {lc.fd}{flag}: {seq}")
        lines.append("")
        lines.append("class histogram:")
        for name in sorted(self.class_histogram):
            lines.append(f"  {name:>14}: {self.class_histogram[name]}")
        lines.append(f"configuration syscalls observed: "
                     f"{', '.join(self.configuration_syscalls) or '(none)'}")
        if self.orphan_count:
            lines.append(f"orphan lifecycles (fd never seen created): "
                         f"{self.orphan_count}")
        return "\n".join(lines) + "\n"


def report(lifecycles):
    histogram = {}
    config = set()
    for lc in lifecycles:
        for name, cls in lc.ops:
            histogram[cls.value] = histogram.get(cls.value, 0) + 1
            if cls is SyscallClass.CONFIGURATION:
                config.add(name)
    return Report(
        lifecycles=lifecycles,
        class_histogram=histogram,
        configuration_syscalls=sorted(config),
        orphan_count=sum(1 for lc in lifecycles if lc.origin == "orphan"),
        dup_derived_count=sum(1 for lc in lifecycles if lc.origin == "dup-derived"),
    )


# ---------------------------------------------------------------------------
# ingestion helper: strace -f -ttt style text

_STRACE_RE = re.compile(
    r"^(?:\[pid\s+(?P<pid1>\d+)\]\s+|(?P<pid2>\d+)\s+)?"
    r"(?P<ts>\d+\.\d+)\s+"
    r"(?P<syscall>\w+)\((?P<args>.*)\)\s+=\s+(?P<ret>-?\d+)"
)


def convert_strace(lines, default_pid=1):
    """Convert strace-ish text lines to the neutral JSONL event schema.

    Best-effort: only the fd (first bare-integer argument) and sockaddr
    text are extracted; unparseable lines are skipped.
    """
    out = []
    for line in lines:
        m = _STRACE_RE.match(line.strip())
        if not m:
            continue
        pid = int(m.group("pid1") or m.group("pid2") or default_pid)
        args_text = m.group("args")
        args = {}
        first = args_text.split(",")[0].strip() if args_text else ""
        if first.isdigit():
            args["fd"] = int(first)
        addr_m = re.search(r'inet_addr\("([^"]+)"\)', args_text)
        if addr_m:
            args["addr"] = addr_m.group(1)
        if "SOCK_STREAM" in args_text:
            args["type"] = "SOCK_STREAM"
        elif "SOCK_DGRAM" in args_text:
            args["type"] = "SOCK_DGRAM"
        out.append({
            "ts": int(float(m.group("ts")) * 1e9),
            "pid": pid,
            "tid": pid,
            "syscall": m.group("syscall"),
            "args": args,
            "ret": int(m.group("ret")),
        })
    return out
