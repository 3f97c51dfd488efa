"""Seccomp user-space notification channel.

Wraps the kernel's receive-event / send-response / check-id-valid / add-fd
commands and the runtime->supervisor handoff of the notification fd.
"""

import array
import errno
import fcntl
import logging
import os
import select
import socket
import struct
from dataclasses import dataclass, field
from typing import Optional

from .errors import ChannelClosed, HandoffFailed, StaleCookie, UnsupportedKernel

log = logging.getLogger(__name__)

ACK_BYTE = b"\x4f"

# struct seccomp_notif: id, pid, flags, struct seccomp_data{nr, arch, ip, args[6]}
_NOTIF_FMT = "<QIIiIQ6Q"
_NOTIF_SIZE = struct.calcsize(_NOTIF_FMT)  # 80
# struct seccomp_notif_resp: id, val, error, flags
_RESP_FMT = "<QqiI"
# struct seccomp_notif_addfd: id, flags, srcfd, newfd, newfd_flags
_ADDFD_FMT = "<QIIII"
_ADDFD_SIZE = struct.calcsize(_ADDFD_FMT)  # 24


def _ioc(direction, nr, size):
    # _IOC with type '!' (seccomp)
    return (direction << 30) | (size << 16) | (0x21 << 8) | nr


IOCTL_NOTIF_RECV = _ioc(3, 0, _NOTIF_SIZE)
IOCTL_NOTIF_SEND = _ioc(3, 1, struct.calcsize(_RESP_FMT))
IOCTL_NOTIF_ID_VALID = _ioc(1, 2, 8)
IOCTL_NOTIF_ADDFD = _ioc(1, 3, _ADDFD_SIZE)

RESP_FLAG_CONTINUE = 1  # SECCOMP_USER_NOTIF_FLAG_CONTINUE
ADDFD_FLAG_SETFD = 1    # SECCOMP_ADDFD_FLAG_SETFD


@dataclass(frozen=True)
class NotificationEvent:
    """One intercepted syscall, pending a response."""

    cookie: int
    pid: int
    tid: int
    syscall_nr: int
    arch: int
    args: tuple

    @property
    def fd_arg(self):
        """arg0 as an fd number (all hooked syscalls take the fd first)."""
        return self.args[0] & 0xFFFFFFFF


@dataclass(frozen=True)
class Response:
    """Verdict for one event.

    kind: "continue" lets the kernel execute the (possibly modified) syscall;
    "success" / "error" synthesize a result without executing it.
    injected_fd, when set, installs host_fd into the target's fd table before
    the response is delivered.
    """

    kind: str  # "continue" | "success" | "error"
    value: int = 0
    err: int = 0
    injected_fd: Optional[tuple] = None  # (host_fd, desired_target_fd, replace)

    def __post_init__(self):
        if self.kind not in ("continue", "success", "error"):
            raise ValueError(f"bad response kind {self.kind!r}")
        if self.kind == "error" and self.injected_fd is not None:
            raise ValueError("error responses cannot inject an fd")

    @classmethod
    def cont(cls):
        return cls("continue")

    @classmethod
    def success(cls, value=0):
        return cls("success", value=value)

    @classmethod
    def failure(cls, err):
        return cls("error", err=err)


class NotificationChannel:
    """Live notification channel to one supervised process tree.

    ``ioctl_fn`` is injectable so tests can simulate feature-masked or
    misbehaving kernels.
    """

    def __init__(self, notify_fd, ioctl_fn=fcntl.ioctl, probe_addfd=True):
        self.fd = notify_fd
        self._ioctl = ioctl_fn
        self._responded = set()  # cookie audit, bounded by in-flight count
        if probe_addfd and not self.supports_addfd():
            os.close(notify_fd)
            raise UnsupportedKernel("kernel lacks the add-fd notification command")

    def supports_addfd(self):
        """Probe fd-injection support without a pending event.

        A supporting kernel rejects a bogus cookie with ENOENT; a kernel
        without the command rejects the ioctl itself (EINVAL/ENOTTY).
        """
        req = struct.pack(_ADDFD_FMT, 0, ADDFD_FLAG_SETFD, 0, 0, 0)
        try:
            self._ioctl(self.fd, IOCTL_NOTIF_ADDFD, req)
        except OSError as e:
            return e.errno == errno.ENOENT
        return True  # a zero cookie should never be live; treat as supported

    def next_event(self, timeout=None):
        """Block until the next pending event or channel closure."""
        while True:
            try:
                r, _, x = select.select([self.fd], [], [self.fd], timeout)
            except OSError as e:
                if e.errno == errno.EBADF:
                    raise ChannelClosed("notification fd closed")
                raise
            if not r and not x:
                raise TimeoutError("no notification within timeout")
            buf = bytearray(_NOTIF_SIZE)
            try:
                self._ioctl(self.fd, IOCTL_NOTIF_RECV, buf)
            except OSError as e:
                if e.errno == errno.ENOENT:
                    # event vanished between poll and recv (target died mid-
                    # syscall); poll again, EOF shows up as ENOENT+no waiters
                    if self._hup():
                        raise ChannelClosed("all supervised tasks exited")
                    continue
                if e.errno in (errno.EBADF, errno.EIO):
                    raise ChannelClosed("notification channel closed")
                raise
            cookie, pid, flags, nr, arch, ip, *args = struct.unpack_from(_NOTIF_FMT, buf)
            return NotificationEvent(
                cookie=cookie, pid=pid, tid=pid, syscall_nr=nr,
                arch=arch, args=tuple(args),
            )

    def _hup(self):
        p = select.poll()
        p.register(self.fd, select.POLLIN)
        ev = p.poll(0)
        return any(flags & (select.POLLHUP | select.POLLERR) for _, flags in ev)

    def validate(self, event):
        """True iff the cookie still denotes a live, pending notification.

        Must be re-checked after every target-memory read that feeds a
        security decision (partial TOCTOU mitigation).
        """
        req = struct.pack("<Q", event.cookie)
        try:
            self._ioctl(self.fd, IOCTL_NOTIF_ID_VALID, req)
        except OSError:
            return False
        return True

    def inject_fd(self, event, host_fd, target_fd, replace=True):
        """Install host_fd into the target's fd table (before responding)."""
        flags = ADDFD_FLAG_SETFD if replace else 0
        req = struct.pack(_ADDFD_FMT, event.cookie, flags, host_fd,
                          target_fd if replace else 0, 0)
        try:
            r = self._ioctl(self.fd, IOCTL_NOTIF_ADDFD, bytearray(req))
        except OSError as e:
            if e.errno == errno.ENOENT:
                raise StaleCookie(f"cookie {event.cookie:#x} gone during addfd")
            raise
        return r

    def respond(self, event, response: Response):
        """Deliver the verdict; exactly one respond per event.

        A stale cookie (target died) is swallowed and logged -- the event
        loop must survive it.
        """
        if event.cookie in self._responded:
            raise StaleCookie(f"cookie {event.cookie:#x} already responded")
        if response.injected_fd is not None:
            host_fd, target_fd, replace = response.injected_fd
            try:
                self.inject_fd(event, host_fd, target_fd, replace)
            except StaleCookie:
                log.warning("target died before fd injection (cookie %#x)",
                            event.cookie)
                self._responded.add(event.cookie)
                return
        flags = RESP_FLAG_CONTINUE if response.kind == "continue" else 0
        err = -response.err if response.kind == "error" else 0
        val = response.value if response.kind == "success" else 0
        buf = struct.pack(_RESP_FMT, event.cookie, val, err, flags)
        self._responded.add(event.cookie)
        if len(self._responded) > 4096:
            self._responded.clear()
        try:
            self._ioctl(self.fd, IOCTL_NOTIF_SEND, buf)
        except OSError as e:
            if e.errno == errno.ENOENT:
                log.warning("stale cookie %#x on respond; target gone",
                            event.cookie)
                return
            raise

    def close(self):
        try:
            os.close(self.fd)
        except OSError:
            pass


def attach(handoff_path, timeout=10.0, ioctl_fn=fcntl.ioctl):
    """Receive the notification fd over the runtime handoff socket.

    Binds a local stream socket at ``handoff_path``, accepts exactly one
    connection carrying one ancillary fd, acks with 0x4F, and returns a live
    channel.  Refuses to start on kernels without fd injection.
    """
    try:
        os.unlink(handoff_path)
    except FileNotFoundError:
        pass
    srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    srv.bind(handoff_path)
    srv.listen(1)
    srv.settimeout(timeout)
    try:
        conn, _ = srv.accept()
    except socket.timeout:
        srv.close()
        raise HandoffFailed(f"no runtime connected to {handoff_path}")
    finally:
        srv.close()
    with conn:
        conn.settimeout(timeout)
        try:
            msg, anc, _, _ = conn.recvmsg(1, socket.CMSG_LEN(4))
        except socket.timeout:
            raise HandoffFailed("handoff connection sent nothing")
        fds = []
        for level, ctype, data in anc:
            if level == socket.SOL_SOCKET and ctype == socket.SCM_RIGHTS:
                fds.extend(array.array("i", data[: len(data) - len(data) % 4]))
        if not fds:
            raise HandoffFailed("handoff message carried no ancillary fd")
        notify_fd = fds[0]
        for extra in fds[1:]:
            os.close(extra)
        chan = NotificationChannel(notify_fd, ioctl_fn=ioctl_fn)
        conn.sendall(ACK_BYTE)
    return chan
