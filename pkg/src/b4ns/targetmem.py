"""Remote access to the supervised process: memory and file descriptors.

Memory goes through /proc/<pid>/mem (directly, or via a reduced-privilege
agent that re-opens it with the target's credentials and passes the fd back
over a unix socket).  Fd duplicates come from pidfd_getfd(2).
"""

import array
import ctypes
import errno
import logging
import os
import socket
import struct
import sys
from dataclasses import dataclass

from .errors import AgentFailed, FdNotAvailable, MemFault, ReadOnlyMapping, TargetGone

log = logging.getLogger(__name__)

_libc = ctypes.CDLL(None, use_errno=True)

SYS_pidfd_open = 434
SYS_pidfd_getfd = 438

MAX_RW = 4096  # sockaddr-scale transfers only


class MemHandle:
    """Read/write window into one target's address space.

    source is "direct" (we opened /proc/pid/mem ourselves) or "agent"
    (an in-credentials helper opened it for us).
    """

    def __init__(self, pid, mem_fd, source="direct"):
        self.pid = pid
        self.source = source
        self._fd = mem_fd

    def read(self, addr, length):
        if length > MAX_RW:
            raise ValueError(f"read of {length} bytes exceeds {MAX_RW}")
        if addr == 0:
            raise MemFault("null target address")
        try:
            data = os.pread(self._fd, length, addr)
        except OSError as e:
            raise _mem_oserr(e, self.pid)
        if len(data) != length:
            raise MemFault(f"short read at {addr:#x}")
        return data

    def write(self, addr, data):
        if len(data) > MAX_RW:
            raise ValueError(f"write of {len(data)} bytes exceeds {MAX_RW}")
        if addr == 0:
            raise MemFault("null target address")
        try:
            n = os.pwrite(self._fd, data, addr)
        except OSError as e:
            if e.errno == errno.EACCES:
                raise ReadOnlyMapping(f"read-only mapping at {addr:#x}")
            raise _mem_oserr(e, self.pid)
        if n != len(data):
            raise MemFault(f"short write at {addr:#x}")

    def close(self):
        try:
            os.close(self._fd)
        except OSError:
            pass


def _mem_oserr(e, pid):
    if e.errno in (errno.ESRCH, errno.ENOENT):
        return TargetGone(f"pid {pid} exited")
    if e.errno in (errno.EIO, errno.EFAULT):
        return MemFault(str(e))
    if e.errno == errno.EPERM:
        return PermissionError(str(e))
    return e


def open_mem(pid):
    """Open the target's memory directly.  PermissionError propagates so the
    caller can fall back to the agent path."""
    try:
        fd = os.open(f"/proc/{pid}/mem", os.O_RDWR)
    except FileNotFoundError:
        raise TargetGone(f"pid {pid} exited")
    return MemHandle(pid, fd, source="direct")


def _tgid_of(pid):
    """Thread-group leader of pid (pid itself if already the leader)."""
    try:
        with open(f"/proc/{pid}/status") as f:
            for line in f:
                if line.startswith("Tgid:"):
                    return int(line.split()[1])
    except (FileNotFoundError, ProcessLookupError):
        raise TargetGone(f"pid {pid} exited")
    return pid


def _pidfd_open(pid):
    fd = _libc.syscall(SYS_pidfd_open, pid, 0)
    if fd < 0:
        e = ctypes.get_errno()
        if e == errno.ESRCH:
            raise TargetGone(f"pid {pid} exited")
        # notifications carry thread ids; pidfd_open wants the group leader
        # (threads share one fd table, so the leader's pidfd is equivalent)
        tgid = _tgid_of(pid)
        if tgid != pid:
            return _pidfd_open(tgid)
        raise OSError(e, "pidfd_open")
    return fd


@dataclass
class RemoteFd:
    """Supervisor-side duplicate of a target fd (same open file description)."""

    pid: int
    remote_fd: int
    local_fd: int

    def close(self):
        try:
            os.close(self.local_fd)
        except OSError:
            pass


def acquire_fd(pid, remote_fd, pidfd_cache=None):
    """Duplicate the target's fd into this process via pidfd_getfd(2).

    Failure is never fatal to the intercepted syscall: callers mark the fd
    non-switchable instead.
    """
    pidfd = None
    cached = pidfd_cache is not None and pid in pidfd_cache
    try:
        if cached:
            pidfd = pidfd_cache[pid]
        else:
            pidfd = _pidfd_open(pid)
            if pidfd_cache is not None:
                pidfd_cache[pid] = pidfd
        local = _libc.syscall(SYS_pidfd_getfd, pidfd, remote_fd, 0)
        if local < 0:
            e = ctypes.get_errno()
            raise FdNotAvailable(
                f"pidfd_getfd(pid={pid}, fd={remote_fd}): {os.strerror(e)}")
        os.set_inheritable(local, False)
        return RemoteFd(pid, remote_fd, local)
    except TargetGone:
        raise FdNotAvailable(f"pid {pid} exited")
    finally:
        if pidfd is not None and pidfd_cache is None:
            os.close(pidfd)


# ---------------------------------------------------------------------------
# privileged-memory agent: re-open /proc/pid/mem with the target's own
# credentials when the supervisor's uid cannot.

def _agent_main(sock_fd, pid):
    """Runs in the forked helper: adopt the target's uid/gid, open its memory,
    pass the fd back.  Exits nonzero on any failure."""
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM, fileno=sock_fd)
    try:
        with open(f"/proc/{pid}/status") as f:
            fields = dict(
                line.split(":", 1) for line in f if ":" in line)
        uid = int(fields["Uid"].split()[0])
        gid = int(fields["Gid"].split()[0])
        if os.getgid() != gid:
            os.setgid(gid)
        if os.getuid() != uid:
            os.setuid(uid)
        fd = os.open(f"/proc/{pid}/mem", os.O_RDWR)
        s.sendmsg([b"M"], [(socket.SOL_SOCKET, socket.SCM_RIGHTS,
                            array.array("i", [fd]))])
        os._exit(0)
    except Exception:
        try:
            s.sendall(b"E")
        except OSError:
            pass
        os._exit(1)


def open_mem_via_agent(pid, spawn=None):
    """Memory handle through a helper running with the target's credentials.

    Used after a direct open failed with a permission error (target setuid'd
    inside its sandbox).  ``spawn`` is injectable for fault tests.
    """
    sup, agent = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        if spawn is None:
            child = os.fork()
            if child == 0:
                sup.close()
                _agent_main(agent.detach(), pid)
                os._exit(1)  # unreachable
            agent.close()
        else:
            spawn(agent, pid)
            agent.close()
        sup.settimeout(5.0)
        try:
            msg, anc, _, _ = sup.recvmsg(1, socket.CMSG_LEN(4))
        except (socket.timeout, OSError) as e:
            raise AgentFailed(f"agent handshake failed for pid {pid}: {e}")
        if msg != b"M":
            raise AgentFailed(f"agent could not open memory of pid {pid}")
        fds = []
        for level, ctype, data in anc:
            if level == socket.SOL_SOCKET and ctype == socket.SCM_RIGHTS:
                fds.extend(array.array("i", data))
        if not fds:
            raise AgentFailed(f"agent reply carried no fd for pid {pid}")
        if spawn is None:
            os.waitpid(child, 0)
        return MemHandle(pid, fds[0], source="agent")
    finally:
        sup.close()


class MemService:
    """Per-target memory handles with lazy agent fallback and caching."""

    def __init__(self):
        self._handles = {}
        self.pidfd_cache = {}

    def handle(self, pid):
        h = self._handles.get(pid)
        if h is not None:
            return h
        try:
            h = open_mem(pid)
        except PermissionError:
            log.info("direct memory open denied for pid %d; using agent", pid)
            h = open_mem_via_agent(pid)
        self._handles[pid] = h
        return h

    def read(self, pid, addr, length):
        return self.handle(pid).read(addr, length)

    def write(self, pid, addr, data):
        self.handle(pid).write(addr, data)

    def acquire_fd(self, pid, remote_fd):
        return acquire_fd(pid, remote_fd, pidfd_cache=self.pidfd_cache)

    def forget(self, pid):
        h = self._handles.pop(pid, None)
        if h is not None:
            h.close()
        pidfd = self.pidfd_cache.pop(pid, None)
        if pidfd is not None:
            try:
                os.close(pidfd)
            except OSError:
                pass

    def close(self):
        for pid in list(self._handles):
            self.forget(pid)
        for pid, fd in list(self.pidfd_cache.items()):
            try:
                os.close(fd)
            except OSError:
                pass
        self.pidfd_cache.clear()
