"""Per-container supervisor: the event loop joining the notification
channel, socket registry, switch engine, probes and multi-node cache."""

import errno
import logging
import struct
import threading

from . import engine
from .errors import ChannelClosed, MemFault, StaleCookie, TargetGone
from .notify import Response
from .registry import (
    FIONBIO,
    RECORDABLE_FCNTL_CMDS,
    OptionEvent,
    SocketRegistry,
    SocketStatus,
    classify_syscall,
    SyscallClass,
)
from .sysnr import NAME_BY_NR
from .targetmem import MemService

log = logging.getLogger(__name__)

MAX_OPTVAL = 256
MAX_AUDIT = 100_000


class Counters:
    def __init__(self):
        self.events_handled = 0
        self.sockets_switched = 0
        self.switches_rolled_back = 0

    def as_dict(self):
        return {
            "events_handled": self.events_handled,
            "sockets_switched": self.sockets_switched,
            "switches_rolled_back": self.switches_rolled_back,
        }


class SupervisorInstance:
    """Single-threaded event loop over one notification channel.

    The channel must already be attached; ``run`` blocks until the target
    tree exits.  ``audit`` records (cookie, syscall, action) per event so
    tests can assert exactly-once response delivery and filter exactness.
    """

    def __init__(self, chan, env, probes=None, multinode=None, mem=None,
                 registry=None, keep_audit=False):
        self.chan = chan
        self.env = env
        self.probes = probes
        self.multinode = multinode
        self.mem = mem or MemService()
        self.registry = registry or SocketRegistry()
        self.counters = Counters()
        self.audit = [] if keep_audit else None
        self._held = {}  # (pid, fd) -> host socket kept alive while switched
        self._thread = None
        self.running = False

    # -- lifecycle -----------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self.run, daemon=True,
                                        name="b4ns-supervisor")
        self._thread.start()
        return self._thread

    def join(self, timeout=None):
        if self._thread is not None:
            self._thread.join(timeout)

    def run(self):
        self.running = True
        try:
            while True:
                try:
                    event = self.chan.next_event()
                except ChannelClosed:
                    break
                self.counters.events_handled += 1
                try:
                    self._dispatch(event)
                except StaleCookie as e:
                    log.warning("stale cookie mid-handling: %s", e)
                except Exception:
                    log.exception("handler error; continuing target syscall")
                    try:
                        self.chan.respond(event, Response.cont())
                    except Exception:
                        pass
        finally:
            self.running = False
            self._teardown()

    def _teardown(self):
        for sock in self._held.values():
            try:
                sock.close()
            except OSError:
                pass
        self._held.clear()
        self.mem.close()
        self.chan.close()

    # -- event handling ------------------------------------------------------

    def _audit(self, event, name, action):
        if self.audit is not None and len(self.audit) < MAX_AUDIT:
            self.audit.append((event.cookie, name, action))

    def _dispatch(self, event):
        name = NAME_BY_NR.get(event.syscall_nr, f"nr{event.syscall_nr}")
        cls = classify_syscall(name)
        if cls is SyscallClass.CLOSE:
            self._on_close(event, name)
            return
        if cls not in (SyscallClass.CONFIGURATION, SyscallClass.CONNECTION,
                       SyscallClass.STATUS):
            # not in the hooked set; the filter should make this unreachable
            log.warning("unexpected notification for %s", name)
            self._audit(event, name, "continue")
            self.chan.respond(event, Response.cont())
            return

        rec = self.registry.ensure_registered(event.pid, event.fd_arg, self.mem)
        if cls is SyscallClass.CONFIGURATION:
            self._on_configuration(event, name, rec)
        elif cls is SyscallClass.CONNECTION:
            self._on_connection(event, name, rec)
        else:
            self._audit(event, name, "status")
            engine.handle_status(event, rec, self.chan, self.mem, name)

    def _on_close(self, event, name):
        key = (event.pid, event.fd_arg)
        if name == "close":
            self.registry.on_close(*key)
            held = self._held.pop(key, None)
            if held is not None:
                held.close()
        self._audit(event, name, "continue")
        self.chan.respond(event, Response.cont())

    def _on_configuration(self, event, name, rec):
        """Record replayable options; the syscall always continues so the
        in-namespace socket stays correctly configured for the unswitched
        path (and, post-switch, the continued call configures the host
        socket directly)."""
        if rec.status is SocketStatus.TRACKABLE:
            try:
                self._record_configuration(event, name, rec)
            except (MemFault, TargetGone) as e:
                log.debug("option read failed on (%d,%d): %s",
                          event.pid, event.fd_arg, e)
        self._audit(event, name, "continue")
        self.chan.respond(event, Response.cont())

    def _record_configuration(self, event, name, rec):
        if name == "setsockopt":
            level, optname = event.args[1], event.args[2]
            optval_ptr, optlen = event.args[3], event.args[4]
            if optlen > MAX_OPTVAL:
                self.registry.mark_non_switchable(rec)
                return
            optval = (self.mem.read(event.pid, optval_ptr, optlen)
                      if optlen else b"")
            self.registry.record_option(
                rec, OptionEvent("setsockopt", (level, optname, optval)))
        elif name == "fcntl":
            cmd, arg = event.args[1], event.args[2]
            if cmd in RECORDABLE_FCNTL_CMDS:
                self.registry.record_option(rec, OptionEvent("fcntl", (cmd, arg)))
        elif name == "ioctl":
            request = event.args[1]
            if request == FIONBIO:
                (val,) = struct.unpack(
                    "<i", self.mem.read(event.pid, event.args[2], 4))
                self.registry.record_option(
                    rec, OptionEvent("ioctl", (FIONBIO, val)))
            else:
                # unreplayable ioctl: this socket can no longer be switched
                # faithfully
                self.registry.mark_non_switchable(rec)

    def _on_connection(self, event, name, rec):
        if rec.status is not SocketStatus.TRACKABLE:
            self._audit(event, name, "continue")
            self.chan.respond(event, Response.cont())
            return
        try:
            raw, family, addr, port = engine.parse_connection_args(self.mem, event)
        except (MemFault, TargetGone):
            self._audit(event, name, "continue")
            self.chan.respond(event, Response.cont())
            return
        # the sockaddr just read feeds a security decision: revalidate
        if not self.chan.validate(event):
            self._audit(event, name, "stale")
            self.chan.respond(event, Response.cont())
            return
        decision = engine.decide(
            rec, (name, family, addr, port), self.env,
            probes=self.probes, multinode=self.multinode)
        if decision.verdict == "ignore":
            self._audit(event, name, "ignore")
            self.chan.respond(event, Response.cont())
            return
        if name == "bind":
            mapping = self.env.find_published(port)
            sock = engine.execute_bind_switch(
                event, rec, mapping, self.chan, self.mem, self.registry)
        else:
            sock = engine.execute_switch(
                event, rec, decision, self.chan, self.mem, self.registry)
        if sock is not None:
            self._held[(event.pid, event.fd_arg)] = sock
            self.counters.sockets_switched += 1
            self._audit(event, name, decision.verdict)
        else:
            self.counters.switches_rolled_back += 1
            self._audit(event, name, "rolled_back")
