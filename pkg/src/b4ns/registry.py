"""Per-(pid, fd) socket registry and the seven-class syscall taxonomy.

Sockets are discovered lazily: creation is never intercepted, so the first
hooked syscall naming an unknown fd triggers a probe of the duplicated fd.
Configuration syscalls are recorded for replay onto the host-side socket at
switch time.
"""

import enum
import errno
import fcntl as _fcntl
import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Optional

from .errors import FdNotAvailable, ReplayFailed
from .sockaddr import probe_socket_kind

log = logging.getLogger(__name__)

FIONBIO = 0x5421
F_SETFL = _fcntl.F_SETFL
F_SETFD = _fcntl.F_SETFD
O_NONBLOCK = 0o4000


class SyscallClass(enum.Enum):
    CREATION = "creation"
    CONFIGURATION = "configuration"
    CONNECTION = "connection"
    STATUS = "status"
    DERIVATION = "derivation"
    COMMUNICATION = "communication"
    CLOSE = "close"
    NOT_HOOKED = "not_hooked"


_CLASS_TABLE = {
    "socket": SyscallClass.CREATION,
    "fcntl": SyscallClass.CONFIGURATION,
    "setsockopt": SyscallClass.CONFIGURATION,
    "ioctl": SyscallClass.CONFIGURATION,
    "connect": SyscallClass.CONNECTION,
    "bind": SyscallClass.CONNECTION,
    "getsockopt": SyscallClass.STATUS,
    "getsockname": SyscallClass.STATUS,
    "getpeername": SyscallClass.STATUS,
    "accept": SyscallClass.DERIVATION,
    "accept4": SyscallClass.DERIVATION,
    "clone": SyscallClass.DERIVATION,
    "poll": SyscallClass.COMMUNICATION,
    "recvfrom": SyscallClass.COMMUNICATION,
    "sendfile": SyscallClass.COMMUNICATION,
    "write": SyscallClass.COMMUNICATION,
    "select": SyscallClass.COMMUNICATION,
    "read": SyscallClass.COMMUNICATION,
    "listen": SyscallClass.COMMUNICATION,
    "lseek": SyscallClass.COMMUNICATION,
    "readv": SyscallClass.COMMUNICATION,
    "writev": SyscallClass.COMMUNICATION,
    "epoll_ctl": SyscallClass.COMMUNICATION,
    "epoll_wait": SyscallClass.COMMUNICATION,
    "close": SyscallClass.CLOSE,
    "shutdown": SyscallClass.CLOSE,
}


def classify_syscall(name):
    """Total classification: the 26 socket-related syscalls map to their
    class, everything else to NOT_HOOKED."""
    return _CLASS_TABLE.get(name, SyscallClass.NOT_HOOKED)


class SocketStatus(enum.Enum):
    UNKNOWN = "unknown"
    NON_SWITCHABLE = "non_switchable"
    TRACKABLE = "trackable"
    SWITCHED = "switched"
    CLOSED = "closed"


_LEGAL_TRANSITIONS = {
    SocketStatus.UNKNOWN: {SocketStatus.NON_SWITCHABLE, SocketStatus.TRACKABLE},
    SocketStatus.NON_SWITCHABLE: set(),
    SocketStatus.TRACKABLE: {SocketStatus.SWITCHED, SocketStatus.NON_SWITCHABLE,
                             SocketStatus.CLOSED},
    SocketStatus.SWITCHED: {SocketStatus.CLOSED},
    SocketStatus.CLOSED: set(),
}


class IllegalTransition(Exception):
    pass


@dataclass
class OptionEvent:
    """One recorded configuration syscall, replayable onto a host socket.

    kind: "setsockopt" (level, optname, optval bytes), "fcntl" (cmd, arg),
    or "ioctl" (request, int arg).
    """

    kind: str
    args: tuple
    sequence: int = 0

    def apply(self, sock: socket.socket):
        if self.kind == "setsockopt":
            level, optname, optval = self.args
            sock.setsockopt(level, optname, optval)
        elif self.kind == "fcntl":
            cmd, arg = self.args
            _fcntl.fcntl(sock.fileno(), cmd, arg)
        elif self.kind == "ioctl":
            request, arg = self.args
            if request != FIONBIO:
                raise ReplayFailed(self)
            sock.setblocking(arg == 0)
        else:
            raise ReplayFailed(self)


@dataclass
class SocketRecord:
    pid: int
    fd: int
    status: SocketStatus = SocketStatus.UNKNOWN
    options: list = field(default_factory=list)
    spoofed_peer: Optional[tuple] = None  # (addr, port)
    switch_outcome: Optional[int] = None  # supervisor-side host socket fd
    _next_seq: int = 0

    def transition(self, new_status):
        if new_status not in _LEGAL_TRANSITIONS[self.status]:
            raise IllegalTransition(
                f"({self.pid},{self.fd}): {self.status.value} -> {new_status.value}")
        self.status = new_status

    def add_option(self, ev: OptionEvent):
        if self.status is not SocketStatus.TRACKABLE:
            return False
        ev.sequence = self._next_seq
        self._next_seq += 1
        self.options.append(ev)
        return True


RECORDABLE_FCNTL_CMDS = (F_SETFL, F_SETFD)


class SocketRegistry:
    """Shared map of live socket records, serialized per record.

    A coarse lock is enough at the event rates a single supervised container
    produces; per-record ordering falls out of it.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._records = {}

    def get(self, pid, fd):
        with self._lock:
            return self._records.get((pid, fd))

    def ensure_registered(self, pid, fd, mem):
        """Return the record for (pid, fd), probing the fd on first sight.

        Probe outcome: not a socket or not SOCK_STREAM -> non-switchable;
        already connected (derived fd) -> non-switchable; otherwise trackable.
        Probe failure always degrades to non-switchable, never errors the
        intercepted syscall.
        """
        with self._lock:
            rec = self._records.get((pid, fd))
            if rec is not None:
                return rec
            rec = SocketRecord(pid=pid, fd=fd)
            dup = None
            try:
                dup = mem.acquire_fd(pid, fd)
            except FdNotAvailable as e:
                log.debug("probe of (%d,%d) failed: %s", pid, fd, e)
            if dup is None:
                rec.transition(SocketStatus.NON_SWITCHABLE)
            else:
                try:
                    is_sock, domain, sotype, connected = probe_socket_kind(dup.local_fd)
                    if not is_sock or sotype != socket.SOCK_STREAM:
                        rec.transition(SocketStatus.NON_SWITCHABLE)
                    elif connected:
                        rec.transition(SocketStatus.NON_SWITCHABLE)
                    else:
                        rec.transition(SocketStatus.TRACKABLE)
                finally:
                    dup.close()
            self._records[(pid, fd)] = rec
            return rec

    def record_option(self, rec: SocketRecord, ev: OptionEvent):
        with self._lock:
            return rec.add_option(ev)

    def mark_non_switchable(self, rec):
        with self._lock:
            if rec.status is SocketStatus.TRACKABLE:
                rec.transition(SocketStatus.NON_SWITCHABLE)

    def mark_switched(self, rec, host_fd, spoofed_peer=None):
        with self._lock:
            rec.transition(SocketStatus.SWITCHED)
            rec.switch_outcome = host_fd
            rec.spoofed_peer = spoofed_peer

    def on_close(self, pid, fd):
        """Evict the record; the fd number becomes fresh for reuse."""
        with self._lock:
            rec = self._records.pop((pid, fd), None)
            if rec is None:
                return None
            if rec.status in (SocketStatus.TRACKABLE, SocketStatus.SWITCHED):
                rec.transition(SocketStatus.CLOSED)
            return rec

    def evict_pid(self, pid):
        with self._lock:
            for key in [k for k in self._records if k[0] == pid]:
                del self._records[key]

    def snapshot(self):
        with self._lock:
            return [
                {
                    "pid": rec.pid,
                    "fd": rec.fd,
                    "status": rec.status.value,
                    "options": len(rec.options),
                }
                for rec in self._records.values()
            ]


def replay_options(rec: SocketRecord, host_socket: socket.socket):
    """Apply the recorded configuration sequence to a fresh host socket.

    Any failure raises ReplayFailed and the caller must abort the switch;
    a half-configured switched socket is never acceptable.
    """
    for ev in sorted(rec.options, key=lambda e: e.sequence):
        try:
            ev.apply(host_socket)
        except ReplayFailed:
            raise
        except OSError as e:
            raise ReplayFailed(ev) from e
