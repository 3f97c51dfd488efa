"""Classic-BPF seccomp filter construction and installation.

Only the target (sandboxed) side uses this module: it installs a filter
that routes the hooked syscall set to user-space notification and returns
the listener fd, which the runtime shim then hands to the supervisor.
"""

import ctypes
import os

from .sysnr import AUDIT_ARCH_X86_64, HOOKED_NRS

_libc = ctypes.CDLL(None, use_errno=True)

SYS_seccomp = 317
SECCOMP_SET_MODE_FILTER = 1
SECCOMP_FILTER_FLAG_NEW_LISTENER = 1 << 3
SECCOMP_RET_ALLOW = 0x7FFF0000
SECCOMP_RET_USER_NOTIF = 0x7FC00000
PR_SET_NO_NEW_PRIVS = 38

BPF_LD = 0x00
BPF_W = 0x00
BPF_ABS = 0x20
BPF_JMP = 0x05
BPF_JEQ = 0x10
BPF_K = 0x00
BPF_RET = 0x06

_OFF_NR = 0     # struct seccomp_data.nr
_OFF_ARCH = 4   # struct seccomp_data.arch


class SockFilter(ctypes.Structure):
    _fields_ = [
        ("code", ctypes.c_uint16),
        ("jt", ctypes.c_uint8),
        ("jf", ctypes.c_uint8),
        ("k", ctypes.c_uint32),
    ]


class SockFprog(ctypes.Structure):
    _fields_ = [
        ("len", ctypes.c_uint16),
        ("filter", ctypes.POINTER(SockFilter)),
    ]


def _stmt(code, k):
    return SockFilter(code, 0, 0, k)


def _jeq(k, jt, jf):
    return SockFilter(BPF_JMP | BPF_JEQ | BPF_K, jt, jf, k)


def build_notify_filter(hooked_nrs=HOOKED_NRS):
    """Filter program: hooked syscalls -> USER_NOTIF, everything else ALLOW.

    Wrong-arch syscalls are allowed rather than killed: the supervisor is a
    performance aid, not a security boundary, and must never break the target.
    """
    nrs = list(hooked_nrs)
    insns = [
        _stmt(BPF_LD | BPF_W | BPF_ABS, _OFF_ARCH),
        # non-x86_64 -> jump over the whole match chain to ALLOW
        _jeq(AUDIT_ARCH_X86_64, 0, len(nrs) + 2),
        _stmt(BPF_LD | BPF_W | BPF_ABS, _OFF_NR),
    ]
    for i, nr in enumerate(nrs):
        remaining = len(nrs) - i - 1
        insns.append(_jeq(nr, remaining + 1, 0))
    insns.append(_stmt(BPF_RET, SECCOMP_RET_ALLOW))
    insns.append(_stmt(BPF_RET, SECCOMP_RET_USER_NOTIF))
    return insns


def install_notify_filter(hooked_nrs=HOOKED_NRS):
    """Install the notification filter on the calling process.

    Returns the new listener fd.  Requires no privileges beyond
    PR_SET_NO_NEW_PRIVS (or CAP_SYS_ADMIN).
    """
    insns = build_notify_filter(hooked_nrs)
    arr = (SockFilter * len(insns))(*insns)
    prog = SockFprog(len(insns), arr)
    if _libc.prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0:
        raise OSError(ctypes.get_errno(), "prctl(NO_NEW_PRIVS)")
    fd = _libc.syscall(
        SYS_seccomp,
        SECCOMP_SET_MODE_FILTER,
        SECCOMP_FILTER_FLAG_NEW_LISTENER,
        ctypes.byref(prog),
    )
    if fd < 0:
        raise OSError(ctypes.get_errno(), "seccomp(SET_MODE_FILTER)")
    # no fcntl/ioctl on the fd here: those syscalls are already being
    # filtered and nobody is consuming notifications yet
    return fd
