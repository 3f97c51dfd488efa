"""Switch decision and execution.

On every Connection-class syscall the engine decides between:

- switch:  destination is an external endpoint (outside the sandbox
  networks) or the bind port is published -- create a host socket,
  replay recorded options, inject it under the target's fd number;
- rewrite: destination is another sandbox's published port that is already
  switched -- additionally rewrite the destination sockaddr in target
  memory to the host mapping and remember the original peer for spoofing;
- ignore:  stay on the in-namespace path (always the safe fallback).
"""

import errno
import ipaddress
import logging
import socket
import struct
from dataclasses import dataclass, field
from typing import Optional

from .errors import MemFault, ReplayFailed, StaleCookie, TargetGone
from .notify import Response
from .registry import SocketStatus, replay_options
from .sockaddr import SOCKADDR_IN_SIZE, pack_sockaddr_in, parse_sockaddr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PublishMapping:
    """(container address:port) -> (host address:port)."""

    container_addr: str
    container_port: int
    host_addr: str
    host_port: int

    @classmethod
    def parse(cls, text, container_addr="0.0.0.0", host_addr="0.0.0.0"):
        """Parse the 'host_port:container_port' flag form."""
        host_port, _, container_port = text.partition(":")
        if not container_port:
            raise ValueError(f"publish flag needs host:container, got {text!r}")
        return cls(container_addr, int(container_port), host_addr, int(host_port))


@dataclass
class NetEnvironment:
    container_cidrs: list = field(default_factory=list)  # ip_network or str
    published_ports: list = field(default_factory=list)
    host_loopback_allowed: bool = False
    unprivileged: bool = True

    def __post_init__(self):
        self.container_cidrs = [
            ipaddress.ip_network(c) if isinstance(c, str) else c
            for c in self.container_cidrs
        ]
        for i, a in enumerate(self.container_cidrs):
            for b in self.container_cidrs[i + 1:]:
                if a.overlaps(b):
                    raise ValueError(f"overlapping container CIDRs: {a}, {b}")
        seen = set()
        for m in self.published_ports:
            if m.container_port in seen:
                raise ValueError(f"duplicate published container port {m.container_port}")
            seen.add(m.container_port)
            if self.unprivileged and m.host_port < 1024:
                raise ValueError(
                    f"host port {m.host_port} not bindable without privileges")

    def is_container_addr(self, addr):
        ip = ipaddress.ip_address(addr)
        return any(ip in net for net in self.container_cidrs)

    def find_published(self, port, addr=None):
        for m in self.published_ports:
            if m.container_port == port and (addr is None or m.container_addr == addr):
                return m
        return None


@dataclass(frozen=True)
class SwitchDecision:
    verdict: str  # "switch" | "ignore" | "rewrite"
    new_dest: Optional[tuple] = None   # (addr, port) to rewrite to
    spoof_peer: Optional[tuple] = None  # original (addr, port) for getpeername

    IGNORE = None  # filled below


SwitchDecision.IGNORE = SwitchDecision("ignore")


def decide(rec, op, env: NetEnvironment, probes=None, multinode=None):
    """Verdict for one connect/bind attempt.  Uncertainty degrades to
    ignore: the unswitched path is slow but always correct."""
    kind, family, addr, port = op
    if rec.status is not SocketStatus.TRACKABLE:
        return SwitchDecision.IGNORE
    if family != socket.AF_INET or addr is None:
        return SwitchDecision.IGNORE

    if kind == "bind":
        m = env.find_published(port)
        if m is not None:
            return SwitchDecision("switch")
        return SwitchDecision.IGNORE

    if kind != "connect":
        return SwitchDecision.IGNORE

    ip = ipaddress.ip_address(addr)
    if ip.is_loopback and not env.host_loopback_allowed:
        # host loopback from inside the sandbox is a policy decision,
        # off by default
        return SwitchDecision.IGNORE
    if not env.is_container_addr(addr):
        return SwitchDecision("switch")

    # in-sandbox destination: only rewrite toward known switched published ports
    m = env.find_published(port, addr)
    if m is not None:
        if probes is not None and probes.reachable(addr, port) is not True:
            return SwitchDecision.IGNORE
        return SwitchDecision(
            "rewrite", new_dest=(m.host_addr, m.host_port), spoof_peer=(addr, port))
    if multinode is not None:
        remote = multinode.resolve(addr, port)
        if remote is not None:
            return SwitchDecision(
                "rewrite", new_dest=remote, spoof_peer=(addr, port))
    return SwitchDecision.IGNORE


def _read_sockaddr(mem, pid, addr_ptr, addrlen):
    if addr_ptr == 0 or addrlen <= 0:
        raise MemFault("bad sockaddr pointer")
    raw = mem.read(pid, addr_ptr, min(addrlen, 128))
    return raw


def parse_connection_args(mem, event):
    """Decode the (fd, sockaddr) of a connect/bind event from target memory.

    Returns (raw_bytes, family, addr, port); raises MemFault/TargetGone.
    """
    addr_ptr, addrlen = event.args[1], event.args[2]
    raw = _read_sockaddr(mem, event.pid, addr_ptr, addrlen)
    family, addr, port = parse_sockaddr(raw)
    return raw, family, addr, port


def execute_switch(event, rec, decision, chan, mem, registry):
    """Carry out a switch/rewrite verdict for a connect.

    All fallible steps (socket creation, option replay, memory rewrite,
    cookie validation) happen before the irreversible fd injection; any
    failure rolls back to the untouched in-namespace path.

    Returns the supervisor-held host socket on success, None on rollback
    (the event has been responded to either way).
    """
    host_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        try:
            replay_options(rec, host_sock)
        except ReplayFailed as e:
            log.warning("option replay failed on (%d,%d): %s; staying unswitched",
                        rec.pid, rec.fd, e)
            registry.mark_non_switchable(rec)
            host_sock.close()
            chan.respond(event, Response.cont())
            return None

        spoof_peer = None
        if decision.verdict == "rewrite":
            addr_ptr = event.args[1]
            addrlen = event.args[2]
            try:
                orig = mem.read(event.pid, addr_ptr, min(addrlen, 128))
            except (MemFault, TargetGone):
                host_sock.close()
                chan.respond(event, Response.cont())
                return None
            new_raw = pack_sockaddr_in(*decision.new_dest)
            if len(new_raw) > len(orig):
                # never grow the target's sockaddr buffer
                host_sock.close()
                chan.respond(event, Response.cont())
                return None
            try:
                mem.write(event.pid, addr_ptr, new_raw)
            except Exception:
                host_sock.close()
                chan.respond(event, Response.cont())
                return None
            if not chan.validate(event):
                # switch aborted; restore the bytes best-effort and bail
                try:
                    mem.write(event.pid, addr_ptr, orig[: len(new_raw)])
                except Exception:
                    pass
                host_sock.close()
                chan.respond(event, Response.cont())
                return None
            spoof_peer = decision.spoof_peer

        if not chan.validate(event):
            host_sock.close()
            chan.respond(event, Response.cont())
            return None

        try:
            chan.inject_fd(event, host_sock.fileno(), event.fd_arg, replace=True)
        except StaleCookie:
            host_sock.close()
            chan.respond(event, Response.cont())
            return None
        registry.mark_switched(rec, host_sock.fileno(), spoofed_peer=spoof_peer)
        chan.respond(event, Response.cont())
        return host_sock
    except Exception:
        host_sock.close()
        raise


def execute_bind_switch(event, rec, mapping, chan, mem, registry):
    """Switch a bind to a published port: bind a host socket to the host
    mapping, inject it, and synthesize bind's success (the original bind is
    never executed; an already-bound injected socket would refuse it)."""
    host_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        host_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            replay_options(rec, host_sock)
        except ReplayFailed as e:
            log.warning("option replay failed on bind (%d,%d): %s",
                        rec.pid, rec.fd, e)
            registry.mark_non_switchable(rec)
            host_sock.close()
            chan.respond(event, Response.cont())
            return None
        try:
            host_sock.bind((mapping.host_addr, mapping.host_port))
        except OSError as e:
            log.warning("host bind %s:%d failed: %s; staying unswitched",
                        mapping.host_addr, mapping.host_port, e)
            host_sock.close()
            chan.respond(event, Response.cont())
            return None
        if not chan.validate(event):
            host_sock.close()
            chan.respond(event, Response.cont())
            return None
        try:
            chan.inject_fd(event, host_sock.fileno(), event.fd_arg, replace=True)
        except StaleCookie:
            host_sock.close()
            chan.respond(event, Response.cont())
            return None
        registry.mark_switched(rec, host_sock.fileno())
        chan.respond(event, Response.success(0))
        return host_sock
    except Exception:
        host_sock.close()
        raise


def handle_status(event, rec, chan, mem, syscall_name):
    """Spoof getpeername on switched sockets with a rewritten destination;
    everything else passes through to the kernel."""
    if (
        syscall_name == "getpeername"
        and rec is not None
        and rec.status is SocketStatus.SWITCHED
        and rec.spoofed_peer is not None
    ):
        addr_ptr, addrlen_ptr = event.args[1], event.args[2]
        if addr_ptr == 0 or addrlen_ptr == 0:
            chan.respond(event, Response.failure(errno.EINVAL))
            return
        try:
            (socklen,) = struct.unpack("<I", mem.read(event.pid, addrlen_ptr, 4))
        except (MemFault, TargetGone):
            chan.respond(event, Response.failure(errno.EFAULT))
            return
        if socklen == 0:
            chan.respond(event, Response.failure(errno.EINVAL))
            return
        raw = pack_sockaddr_in(*rec.spoofed_peer)
        try:
            mem.write(event.pid, addr_ptr, raw[: min(socklen, len(raw))])
            mem.write(event.pid, addrlen_ptr, struct.pack("<I", SOCKADDR_IN_SIZE))
        except (MemFault, TargetGone):
            chan.respond(event, Response.failure(errno.EFAULT))
            return
        if not chan.validate(event):
            chan.respond(event, Response.cont())
            return
        chan.respond(event, Response.success(0))
        return
    chan.respond(event, Response.cont())
