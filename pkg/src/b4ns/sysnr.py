"""x86_64 syscall numbers for the socket-related syscalls we care about."""

AUDIT_ARCH_X86_64 = 0xC000003E

NR = {
    "read": 0,
    "write": 1,
    "close": 3,
    "poll": 7,
    "lseek": 8,
    "ioctl": 16,
    "readv": 19,
    "writev": 20,
    "select": 23,
    "socket": 41,
    "connect": 42,
    "accept": 43,
    "recvfrom": 45,
    "shutdown": 48,
    "bind": 49,
    "listen": 50,
    "getsockname": 51,
    "getpeername": 52,
    "setsockopt": 54,
    "getsockopt": 55,
    "clone": 56,
    "fork": 57,
    "fcntl": 72,
    "sendfile": 40,
    "epoll_wait": 232,
    "epoll_ctl": 233,
    "accept4": 288,
    "dup": 32,
    "dup2": 33,
    "dup3": 292,
    "seccomp": 317,
    "pidfd_open": 434,
    "pidfd_getfd": 438,
}

NAME_BY_NR = {v: k for k, v in NR.items()}

# The exact set delivered to the supervisor: Configuration, Connection,
# Status and Close classes.  Creation, Derivation and Communication are
# deliberately left unfiltered for performance.
HOOKED_SYSCALLS = (
    "fcntl", "setsockopt", "ioctl",
    "connect", "bind",
    "getsockopt", "getsockname", "getpeername",
    "close", "shutdown",
)

HOOKED_NRS = tuple(NR[n] for n in HOOKED_SYSCALLS)
