"""Target memory and fd acquisition against real cooperative children."""

import os
import signal
import socket
import struct
import subprocess
import sys

import pytest

from b4ns.errors import AgentFailed, FdNotAvailable, MemFault, TargetGone
from b4ns.sockaddr import probe_socket_kind
from b4ns.targetmem import (
    MAX_RW,
    MemService,
    acquire_fd,
    open_mem,
    open_mem_via_agent,
)

CHILD_SRC = r"""
import ctypes, socket, sys
buf = ctypes.create_string_buffer(b"hello-target-mem", 64)
srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
print(ctypes.addressof(buf))
print(srv.fileno())
sys.stdout.flush()
sys.stdin.readline()
print(bytes(buf.value).decode())
sys.stdout.flush()
"""


@pytest.fixture
def child():
    proc = subprocess.Popen([sys.executable, "-c", CHILD_SRC],
                            stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                            text=True)
    addr = int(proc.stdout.readline())
    sock_fd = int(proc.stdout.readline())
    yield proc, addr, sock_fd
    if proc.poll() is None:
        proc.kill()
    proc.wait()


class TestMemHandle:
    def test_read_roundtrip(self, child):
        proc, addr, _ = child
        h = open_mem(proc.pid)
        try:
            assert h.read(addr, 16) == b"hello-target-mem"
        finally:
            h.close()

    def test_write_is_visible_to_target(self, child):
        proc, addr, _ = child
        h = open_mem(proc.pid)
        try:
            h.write(addr, b"WRITTEN-BY-TESTS")
        finally:
            h.close()
        proc.stdin.write("\n")
        proc.stdin.flush()
        assert proc.stdout.readline().strip() == "WRITTEN-BY-TESTS"

    def test_null_address_faults(self, child):
        proc, _, _ = child
        h = open_mem(proc.pid)
        try:
            with pytest.raises(MemFault):
                h.read(0, 4)
            with pytest.raises(MemFault):
                h.write(0, b"x")
        finally:
            h.close()

    def test_unmapped_address_faults(self, child):
        proc, _, _ = child
        h = open_mem(proc.pid)
        try:
            with pytest.raises(MemFault):
                h.read(0x10, 4)
        finally:
            h.close()

    def test_oversized_transfer_rejected(self, child):
        proc, addr, _ = child
        h = open_mem(proc.pid)
        try:
            with pytest.raises(ValueError):
                h.read(addr, MAX_RW + 1)
            with pytest.raises(ValueError):
                h.write(addr, b"x" * (MAX_RW + 1))
        finally:
            h.close()

    def test_dead_target(self, child):
        proc, addr, _ = child
        h = open_mem(proc.pid)
        proc.kill()
        proc.wait()
        try:
            with pytest.raises((TargetGone, MemFault)):
                h.read(addr, 4)
        finally:
            h.close()

    def test_open_of_dead_pid(self):
        proc = subprocess.Popen([sys.executable, "-c", "pass"])
        proc.wait()
        with pytest.raises(TargetGone):
            open_mem(proc.pid)


class TestAcquireFd:
    def test_socket_fd_duplicates_and_probes(self, child):
        proc, _, sock_fd = child
        dup = acquire_fd(proc.pid, sock_fd)
        try:
            is_sock, domain, sotype, connected = probe_socket_kind(dup.local_fd)
            assert is_sock
            assert domain == socket.AF_INET
            assert sotype == socket.SOCK_STREAM
            assert not connected
        finally:
            dup.close()

    def test_nonexistent_fd(self, child):
        proc, _, _ = child
        with pytest.raises(FdNotAvailable):
            acquire_fd(proc.pid, 777)

    def test_dead_pid(self):
        proc = subprocess.Popen([sys.executable, "-c", "pass"])
        proc.wait()
        with pytest.raises(FdNotAvailable):
            acquire_fd(proc.pid, 0)


class TestAgent:
    def test_agent_opens_memory(self, child):
        proc, addr, _ = child
        h = open_mem_via_agent(proc.pid)
        try:
            assert h.source == "agent"
            assert h.read(addr, 16) == b"hello-target-mem"
        finally:
            h.close()

    def test_agent_dies_before_reply(self, child):
        proc, _, _ = child

        def broken_spawn(agent_sock, pid):
            pass  # both ends closed without any reply

        with pytest.raises(AgentFailed):
            open_mem_via_agent(proc.pid, spawn=broken_spawn)

    def test_agent_reports_failure(self, child):
        proc, _, _ = child

        def failing_spawn(agent_sock, pid):
            agent_sock.send(b"E")

        with pytest.raises(AgentFailed):
            open_mem_via_agent(proc.pid, spawn=failing_spawn)


class TestMemService:
    def test_handles_are_cached_per_pid(self, child):
        proc, addr, _ = child
        svc = MemService()
        try:
            assert svc.read(proc.pid, addr, 5) == b"hello"
            h1 = svc.handle(proc.pid)
            h2 = svc.handle(proc.pid)
            assert h1 is h2
        finally:
            svc.close()

    def test_forget_drops_handle(self, child):
        proc, addr, _ = child
        svc = MemService()
        try:
            svc.read(proc.pid, addr, 4)
            svc.forget(proc.pid)
            assert proc.pid not in svc._handles
        finally:
            svc.close()
