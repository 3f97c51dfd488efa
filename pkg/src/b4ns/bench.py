"""Desk-scale loopback benchmarks: relay vs bypass vs direct.

The relay mode reproduces the architectural bottleneck of userspace
port-forwarding (per-connection copy loops with a fixed buffer); the
bypass mode runs a supervised client in a fresh network namespace whose
sockets get switched to host sockets; direct is the unsupervised baseline.
Every transfer is digest-verified end to end -- a throughput number
without a matching digest is discarded.
"""

import hashlib
import json
import os
import select
import socket
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .engine import NetEnvironment
from .errors import SetupFailed, SwitchDidNotHappen
from .notify import attach
from .supervisor import SupervisorInstance
from .target_shim import BLOCK

RELAY_BUF = 32 * 1024
MIN_PAYLOAD = 1 << 20
MODES = ("relay", "bypass", "direct")


@dataclass
class BenchConfig:
    payload_bytes: int
    parallel_streams: int = 1
    mode: str = "direct"
    latency: bool = False
    latency_count: int = 2000
    latency_size: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 1 <= self.parallel_streams <= 8:
            raise ValueError("parallel_streams must be in [1, 8]")
        if not self.latency and self.payload_bytes < MIN_PAYLOAD:
            raise ValueError("throughput runs need at least 1 MiB of payload")


@dataclass
class BenchResult:
    mode: str
    throughput_bps: float
    mean_latency_us: Optional[float]
    cpu_self_fraction: float
    payload_bytes: int
    streams: int
    per_stream_bps: list = field(default_factory=list)
    digest_ok: bool = True


def pattern_digest(nbytes):
    h = hashlib.blake2b(digest_size=16)
    left = nbytes
    while left > 0:
        chunk = BLOCK[: min(len(BLOCK), left)]
        h.update(chunk)
        left -= len(chunk)
    return h.hexdigest()


class _DigestServer:
    """Accepts N connections, records the receive window (first byte in,
    last byte in) for timing, and digests each stream.

    Streams up to ``buffer_cap`` bytes are received into a preallocated
    buffer and hashed after the transfer completes, so the digest check
    never throttles the receive path it is supposed to validate; larger
    streams fall back to hashing inline.
    """

    def __init__(self, streams, expected_bytes=0, host="127.0.0.1",
                 buffer_cap=2 << 30):
        self.srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.srv.bind((host, 0))
        self.srv.listen(streams)
        self.port = self.srv.getsockname()[1]
        self.streams = streams
        self.expected_bytes = expected_bytes
        self.buffered = 0 < expected_bytes * streams <= buffer_cap
        self.digests = []
        self.byte_counts = []
        self.t_first = None
        self.t_last = None
        self._lock = threading.Lock()
        self._threads = []

    def _recv_buffered(self, conn):
        buf = bytearray(self.expected_bytes)
        view = memoryview(buf)
        total = 0
        t_first = t_last = None
        while True:
            n = conn.recv_into(view[total:] if total < len(buf) else
                               bytearray(1 << 20))
            if n == 0:
                break
            t_last = time.monotonic()
            if t_first is None:
                t_first = t_last
            total += n
        h = hashlib.blake2b(digest_size=16)
        h.update(view[:min(total, len(buf))])
        return h.hexdigest(), total, t_first, t_last

    def _recv_inline(self, conn):
        h = hashlib.blake2b(digest_size=16)
        buf = bytearray(1 << 20)
        total = 0
        t_first = t_last = None
        while True:
            n = conn.recv_into(buf)
            if n == 0:
                break
            t_last = time.monotonic()
            if t_first is None:
                t_first = t_last
            h.update(memoryview(buf)[:n])
            total += n
        return h.hexdigest(), total, t_first, t_last

    def _serve_one(self, conn):
        with conn:
            if self.buffered:
                digest, total, t_first, t_last = self._recv_buffered(conn)
            else:
                digest, total, t_first, t_last = self._recv_inline(conn)
        with self._lock:
            if t_first is not None and (self.t_first is None
                                        or t_first < self.t_first):
                self.t_first = t_first
            if t_last is not None and (self.t_last is None
                                       or t_last > self.t_last):
                self.t_last = t_last
            self.digests.append(digest)
            self.byte_counts.append(total)

    def start(self):
        def accept_loop():
            for _ in range(self.streams):
                try:
                    conn, _ = self.srv.accept()
                except OSError:
                    return
                t = threading.Thread(target=self._serve_one, args=(conn,),
                                     daemon=True)
                t.start()
                self._threads.append(t)

        self._acceptor = threading.Thread(target=accept_loop, daemon=True)
        self._acceptor.start()
        return self

    def wait(self, timeout=300.0):
        self._acceptor.join(timeout)
        for t in self._threads:
            t.join(timeout)
        self.srv.close()

    @property
    def window(self):
        if self.t_first is None or self.t_last is None:
            return None
        return max(self.t_last - self.t_first, 1e-6)


class _EchoServer:
    def __init__(self, host="127.0.0.1"):
        self.srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.srv.bind((host, 0))
        self.srv.listen(8)
        self.port = self.srv.getsockname()[1]
        threading.Thread(target=self._loop, daemon=True).start()

    def _loop(self):
        while True:
            try:
                conn, _ = self.srv.accept()
            except OSError:
                return
            threading.Thread(target=self._echo, args=(conn,), daemon=True).start()

    def _echo(self, conn):
        with conn:
            while True:
                try:
                    data = conn.recv(1 << 16)
                except OSError:
                    return
                if not data:
                    return
                conn.sendall(data)

    def close(self):
        self.srv.close()


class _Relay:
    """Per-connection bidirectional copy loop with a fixed 32 KiB buffer,
    emulating the userspace port-forwarding path: a single thread
    multiplexes both directions with select(2) and stages every chunk
    through an internal buffer before writing it out, mirroring the
    read-into-forwarder / write-out-of-forwarder copy pair that makes
    usermode networking slow."""

    def __init__(self, upstream_port, host="127.0.0.1"):
        self.upstream = (host, upstream_port)
        self.srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.srv.bind((host, 0))
        self.srv.listen(8)
        self.port = self.srv.getsockname()[1]
        threading.Thread(target=self._loop, daemon=True).start()

    def _loop(self):
        while True:
            try:
                client, _ = self.srv.accept()
            except OSError:
                return
            threading.Thread(target=self._relay_conn, args=(client,),
                             daemon=True).start()

    def _relay_conn(self, client):
        try:
            up = socket.create_connection(self.upstream)
        except OSError:
            client.close()
            return
        client.setblocking(False)
        up.setblocking(False)
        buf = bytearray(RELAY_BUF)
        peer = {client: up, up: client}
        done = set()
        try:
            while len(done) < 2:
                readable, _, _ = select.select(
                    [s for s in peer if s not in done], [], [], 1.0)
                for src in readable:
                    dst = peer[src]
                    try:
                        n = src.recv_into(buf)
                    except BlockingIOError:
                        continue
                    except OSError:
                        done.update(peer)
                        break
                    if n == 0:
                        done.add(src)
                        try:
                            dst.shutdown(socket.SHUT_WR)
                        except OSError:
                            pass
                        continue
                    staged = memoryview(bytes(memoryview(buf)[:n]))
                    while staged:
                        try:
                            sent = dst.send(staged)
                        except BlockingIOError:
                            select.select([], [dst], [], 1.0)
                            continue
                        except OSError:
                            done.update(peer)
                            break
                        staged = staged[sent:]
        finally:
            client.close()
            up.close()

    def close(self):
        self.srv.close()


def _cpu_window():
    t = os.times()
    return t.user + t.system


# Senders run as separate processes in every mode (the supervised mode
# necessarily uses one), so the measured path is never slowed down by the
# sender contending with the receiver inside one interpreter.
_SENDER_SRC = """\
import socket, sys
port, nbytes = int(sys.argv[1]), int(sys.argv[2])
block = bytes(range(256)) * 4096
view = memoryview(block)
s = socket.create_connection(("127.0.0.1", port))
sent = 0
while sent < nbytes:
    chunk = view[: min(len(block), nbytes - sent)]
    s.sendall(chunk)
    sent += len(chunk)
s.close()
"""


def _client_procs(port, nbytes, streams):
    procs = [subprocess.Popen(
        [sys.executable, "-c", _SENDER_SRC, str(port), str(nbytes)],
        stderr=subprocess.PIPE, text=True) for _ in range(streams)]
    for p in procs:
        try:
            _, err = p.communicate(timeout=300)
        except subprocess.TimeoutExpired:
            p.kill()
            raise SetupFailed("client stream timed out")
        if p.returncode != 0:
            raise SetupFailed(f"client stream failed: {err[-500:]}")


def _throughput_result(mode, cfg, server, cpu_used, wall):
    per_stream = cfg.payload_bytes // cfg.parallel_streams
    expected = pattern_digest(per_stream)
    ok = (len(server.digests) == cfg.parallel_streams
          and all(d == expected for d in server.digests))
    window = server.window or wall
    total = sum(server.byte_counts)
    bps = total * 8 / window
    if not ok:
        raise SetupFailed(f"{mode}: transfer digest mismatch; result discarded")
    return BenchResult(
        mode=mode,
        throughput_bps=bps,
        mean_latency_us=None,
        cpu_self_fraction=cpu_used / max(wall, 1e-6),
        payload_bytes=cfg.payload_bytes,
        streams=cfg.parallel_streams,
        per_stream_bps=[n * 8 / window for n in server.byte_counts],
        digest_ok=ok,
    )


def run_direct(cfg: BenchConfig):
    if cfg.latency:
        return _run_latency_local(cfg, relay=False)
    per_stream = cfg.payload_bytes // cfg.parallel_streams
    server = _DigestServer(cfg.parallel_streams, per_stream).start()
    cpu0, t0 = _cpu_window(), time.monotonic()
    _client_procs(server.port, per_stream, cfg.parallel_streams)
    server.wait()
    cpu, wall = _cpu_window() - cpu0, time.monotonic() - t0
    return _throughput_result("direct", cfg, server, cpu, wall)


def run_relay(cfg: BenchConfig):
    if cfg.latency:
        return _run_latency_local(cfg, relay=True)
    per_stream = cfg.payload_bytes // cfg.parallel_streams
    server = _DigestServer(cfg.parallel_streams, per_stream).start()
    relay = _Relay(server.port)
    try:
        cpu0, t0 = _cpu_window(), time.monotonic()
        _client_procs(relay.port, per_stream, cfg.parallel_streams)
        server.wait()
        cpu, wall = _cpu_window() - cpu0, time.monotonic() - t0
    finally:
        relay.close()
    return _throughput_result("relay", cfg, server, cpu, wall)


def _spawn_bypass_client(handoff, script_path, env: NetEnvironment):
    proc = subprocess.Popen(
        [sys.executable, "-m", "b4ns.target_shim", "--handoff", handoff,
         "--netns", "new", "--script", script_path],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    chan = attach(handoff, timeout=10.0)
    sup = SupervisorInstance(chan, env)
    sup.start()
    return proc, sup


def run_bypass(cfg: BenchConfig, workdir=None):
    """Supervised clients in fresh namespaces; invalid unless every stream
    was actually switched."""
    env = NetEnvironment(container_cidrs=["10.255.255.0/24"],
                         host_loopback_allowed=True)
    tmp = workdir or tempfile.mkdtemp(prefix="b4ns-bench-")
    if cfg.latency:
        echo = _EchoServer()
        script = [
            {"op": "socket"},
            {"op": "connect", "host": "127.0.0.1", "port": echo.port},
            {"op": "pingpong", "count": cfg.latency_count, "size": cfg.latency_size},
            {"op": "close"},
        ]
        path = os.path.join(tmp, "lat.json")
        with open(path, "w") as f:
            json.dump(script, f)
        handoff = os.path.join(tmp, "lat.sock")
        proc, sup = _spawn_bypass_client(handoff, path, env)
        out, err = proc.communicate(timeout=300)
        echo.close()
        sup.join(5.0)
        if proc.returncode != 0:
            raise SetupFailed(f"bypass latency client failed: {err[-500:]}")
        if sup.counters.sockets_switched < 1:
            raise SwitchDidNotHappen("no socket switched during latency run")
        line = next(json.loads(l) for l in out.splitlines()
                    if json.loads(l).get("op") == "pingpong")
        return BenchResult(
            mode="bypass", throughput_bps=0.0,
            mean_latency_us=line["mean_latency_us"],
            cpu_self_fraction=0.0, payload_bytes=0, streams=1)

    per_stream = cfg.payload_bytes // cfg.parallel_streams
    server = _DigestServer(cfg.parallel_streams, per_stream).start()
    procs = []
    cpu0, t0 = _cpu_window(), time.monotonic()
    for i in range(cfg.parallel_streams):
        script = [
            {"op": "socket"},
            {"op": "connect", "host": "127.0.0.1", "port": server.port},
            {"op": "send_pattern", "bytes": per_stream},
            {"op": "close"},
        ]
        path = os.path.join(tmp, f"stream{i}.json")
        with open(path, "w") as f:
            json.dump(script, f)
        handoff = os.path.join(tmp, f"stream{i}.sock")
        procs.append(_spawn_bypass_client(handoff, path, env))
    switched = 0
    for proc, sup in procs:
        out, err = proc.communicate(timeout=300)
        if proc.returncode != 0:
            raise SetupFailed(f"bypass client failed: {err[-500:]}")
        sup.join(10.0)
        switched += sup.counters.sockets_switched
    server.wait()
    cpu, wall = _cpu_window() - cpu0, time.monotonic() - t0
    if switched < cfg.parallel_streams:
        raise SwitchDidNotHappen(
            f"only {switched}/{cfg.parallel_streams} streams switched")
    return _throughput_result("bypass", cfg, server, cpu, wall)


def _run_latency_local(cfg, relay):
    echo = _EchoServer()
    front_port = echo.port
    r = None
    if relay:
        r = _Relay(echo.port)
        front_port = r.port
    try:
        s = socket.create_connection(("127.0.0.1", front_port))
        payload = BLOCK[: cfg.latency_size]
        t0 = time.monotonic()
        for _ in range(cfg.latency_count):
            s.sendall(payload)
            got = 0
            while got < cfg.latency_size:
                got += len(s.recv(cfg.latency_size - got))
        dt = time.monotonic() - t0
        s.close()
    finally:
        if r is not None:
            r.close()
        echo.close()
    return BenchResult(
        mode="relay" if relay else "direct", throughput_bps=0.0,
        mean_latency_us=dt / cfg.latency_count * 1e6,
        cpu_self_fraction=0.0, payload_bytes=0, streams=1)


def run_mode(mode, cfg_kwargs):
    cfg = BenchConfig(mode=mode, **cfg_kwargs)
    return {"relay": run_relay, "bypass": run_bypass, "direct": run_direct}[mode](cfg)


def median_result(mode, cfg_kwargs, runs=3):
    results = [run_mode(mode, cfg_kwargs) for _ in range(runs)]
    results.sort(key=lambda r: r.throughput_bps)
    return results[len(results) // 2]


def report(results):
    """Deterministic comparison table (text + JSON) with bypass ratios."""
    by_mode = {r.mode: r for r in results}

    def fmt_bps(v):
        return f"{v / 1e9:8.3f} Gbps" if v else "        -"

    lines = [f"{'mode':>8} {'throughput':>14} {'latency_us':>11} {'cpu':>6}"]
    for mode in MODES:
        r = by_mode.get(mode)
        if r is None:
            lines.append(f"{mode:>8} {'-':>14} {'-':>11} {'-':>6}")
            continue
        lat = f"{r.mean_latency_us:11.1f}" if r.mean_latency_us else f"{'-':>11}"
        lines.append(f"{mode:>8} {fmt_bps(r.throughput_bps):>14} {lat} "
                     f"{r.cpu_self_fraction:6.2f}")
    ratios = {}
    b = by_mode.get("bypass")
    if b is not None and b.throughput_bps:
        for other in ("relay", "direct"):
            o = by_mode.get(other)
            if o is not None and o.throughput_bps:
                ratios[f"bypass/{other}"] = b.throughput_bps / o.throughput_bps
    for name, v in sorted(ratios.items()):
        lines.append(f"{name}: {v:.2f}x")
    payload = {
        "results": [
            {
                "mode": r.mode,
                "throughput_bps": r.throughput_bps,
                "mean_latency_us": r.mean_latency_us,
                "cpu_self_fraction": r.cpu_self_fraction,
                "payload_bytes": r.payload_bytes,
                "streams": r.streams,
                "per_stream_bps": r.per_stream_bps,
                "digest_ok": r.digest_ok,
            }
            for r in sorted(results, key=lambda r: MODES.index(r.mode))
        ],
        "ratios": ratios,
    }
    return "\n".join(lines) + "\n", payload
