"""Trace analyzer vs an independently written fd-table simulator."""

import io
import json

import pytest

from b4ns import traces
from b4ns.errors import EmptyTrace

from oracle_fdtable import simulate
from tracegen import generate, make_event


def to_stream(events):
    return io.StringIO("\n".join(json.dumps(e) for e in events) + "\n")


def canonical(lifecycles_from_impl):
    out = []
    for lc in lifecycles_from_impl:
        out.append({
            "origin": lc.origin,
            "pid": lc.owner_pid,
            "fd": lc.fd,
            "ops": [(name, cls.value) for name, cls in lc.ops],
            "closed": lc.closed,
        })
    return out


def canon_key(lc):
    return (lc["pid"], lc["fd"], lc["origin"], json.dumps(lc["ops"]),
            lc["closed"])


def assert_matches_oracle(events):
    parsed, skipped = traces.parse_trace(to_stream(events))
    assert skipped == 0
    got = sorted(canonical(traces.reconstruct(parsed)), key=canon_key)
    want = sorted(simulate(events), key=canon_key)
    assert got == want


class TestParse:
    def test_malformed_lines_skipped_and_counted(self):
        stream = io.StringIO(
            json.dumps(make_event(1, 1, "socket", ret=3)) + "\n"
            + "this is not json\n"
            + '{"ts": "NaNsense"}\n'
            + "\n"
            + json.dumps(make_event(2, 1, "close", fd=3)) + "\n")
        events, skipped = traces.parse_trace(stream)
        assert len(events) == 2
        assert skipped == 2

    def test_empty_trace_raises(self):
        with pytest.raises(EmptyTrace):
            traces.parse_trace(io.StringIO("garbage\n"))
        with pytest.raises(EmptyTrace):
            traces.parse_trace(io.StringIO(""))

    def test_events_sorted_by_timestamp(self):
        stream = to_stream([make_event(5, 1, "close", fd=3),
                            make_event(1, 1, "socket", ret=3)])
        events, _ = traces.parse_trace(stream)
        assert [e.ts for e in events] == [1, 5]


class TestReconstruct:
    def test_basic_lifecycle(self):
        events = [
            make_event(1, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(2, 10, "setsockopt", fd=3),
            make_event(3, 10, "connect", fd=3, addr="10.4.0.2"),
            make_event(4, 10, "write", fd=3, ret=100),
            make_event(5, 10, "close", fd=3),
        ]
        assert_matches_oracle(events)
        parsed, _ = traces.parse_trace(to_stream(events))
        (lc,) = traces.reconstruct(parsed)
        assert lc.origin == "socket-call"
        assert [n for n, _ in lc.ops] == ["socket", "setsockopt", "connect",
                                          "write", "close"]
        assert lc.closed

    def test_datagram_sockets_dropped(self):
        events = [make_event(1, 10, "socket", ret=3, type="SOCK_DGRAM"),
                  make_event(2, 10, "connect", fd=3),
                  make_event(3, 10, "socket", ret=4, type="SOCK_STREAM")]
        parsed, _ = traces.parse_trace(to_stream(events))
        lcs = traces.reconstruct(parsed)
        # fd 3 lives on only as an orphan (its connect had no known creation)
        origins = sorted(lc.origin for lc in lcs)
        assert origins == ["orphan", "socket-call"]

    def test_fork_inherits_open_fds(self):
        events = [
            make_event(1, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(2, 10, "socket", ret=4, type="SOCK_STREAM"),
            make_event(3, 10, "close", fd=4),
            make_event(4, 10, "fork", ret=20),
            make_event(5, 20, "connect", fd=3),
        ]
        assert_matches_oracle(events)
        parsed, _ = traces.parse_trace(to_stream(events))
        lcs = traces.reconstruct(parsed)
        inherited = [lc for lc in lcs if lc.origin == "fork-inherited"]
        assert len(inherited) == 1  # only the still-open fd crossed the fork
        assert inherited[0].owner_pid == 20
        assert ("connect", traces.SyscallClass.CONNECTION) in inherited[0].ops

    def test_accept_derivation(self):
        events = [
            make_event(1, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(2, 10, "bind", fd=3),
            make_event(3, 10, "listen", fd=3),
            make_event(4, 10, "accept", fd=3, ret=7),
            make_event(5, 10, "write", fd=7, ret=5),
            make_event(6, 10, "close", fd=7),
        ]
        assert_matches_oracle(events)
        parsed, _ = traces.parse_trace(to_stream(events))
        lcs = traces.reconstruct(parsed)
        derived = [lc for lc in lcs if lc.origin == "accept-derived"]
        assert len(derived) == 1 and derived[0].fd == 7 and derived[0].closed

    def test_dup_derivation_flagged(self):
        events = [
            make_event(1, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(2, 10, "dup", fd=3, ret=9),
            make_event(3, 10, "write", fd=9, ret=1),
        ]
        assert_matches_oracle(events)
        parsed, _ = traces.parse_trace(to_stream(events))
        rep = traces.report(traces.reconstruct(parsed))
        assert rep.dup_derived_count == 1

    def test_fd_reuse_splits_lifecycles(self):
        events = [
            make_event(1, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(2, 10, "close", fd=3),
            make_event(3, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(4, 10, "connect", fd=3),
        ]
        assert_matches_oracle(events)
        parsed, _ = traces.parse_trace(to_stream(events))
        lcs = traces.reconstruct(parsed)
        assert len([lc for lc in lcs if lc.origin == "socket-call"]) == 2

    def test_unknown_fd_becomes_orphan(self):
        events = [make_event(1, 10, "getpeername", fd=42)]
        parsed, _ = traces.parse_trace(to_stream(events))
        lcs = traces.reconstruct(parsed)
        assert lcs[0].origin == "orphan"
        rep = traces.report(lcs)
        assert rep.orphan_count == 1


class TestAgainstOracle:
    @pytest.mark.parametrize("seed", range(12))
    def test_random_traces_match(self, seed):
        assert_matches_oracle(generate(seed, n_events=200))

    def test_large_trace_matches(self):
        assert_matches_oracle(generate(999, n_events=2000))


class TestReport:
    def _report(self, events):
        parsed, _ = traces.parse_trace(to_stream(events))
        return traces.report(traces.reconstruct(parsed))

    def test_histogram_and_config_set(self):
        rep = self._report([
            make_event(1, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(2, 10, "setsockopt", fd=3),
            make_event(3, 10, "fcntl", fd=3),
            make_event(4, 10, "connect", fd=3),
            make_event(5, 10, "close", fd=3),
        ])
        assert rep.class_histogram["configuration"] == 2
        assert rep.class_histogram["connection"] == 1
        assert rep.configuration_syscalls == ["fcntl", "setsockopt"]

    def test_json_roundtrip(self):
        rep = self._report(generate(3, 100))
        payload = json.loads(rep.to_json())
        assert set(payload) == {"lifecycles", "class_histogram",
                                "configuration_syscalls", "orphan_count",
                                "dup_derived_count"}
        assert payload["class_histogram"] == rep.class_histogram

    def test_text_output_mentions_every_lifecycle(self):
        rep = self._report([
            make_event(1, 10, "socket", ret=3, type="SOCK_STREAM"),
            make_event(2, 10, "connect", fd=3),
        ])
        text = rep.to_text()
        assert "pid 10 fd 3" in text
        assert "socket -> connect" in text


class TestConvertStrace:
    def test_basic_lines(self):
        lines = [
            '1700000000.000001 socket(AF_INET, SOCK_STREAM, IPPROTO_TCP) = 3',
            '[pid  1234] 1700000000.000002 connect(3, {sa_family=AF_INET, '
            'sin_port=htons(80), sin_addr=inet_addr("10.4.0.2")}, 16) = 0',
            'not a trace line',
        ]
        events = traces.convert_strace(lines)
        assert len(events) == 2
        assert events[0]["syscall"] == "socket"
        assert events[0]["args"]["type"] == "SOCK_STREAM"
        assert events[1]["pid"] == 1234
        assert events[1]["args"]["fd"] == 3
        assert events[1]["args"]["addr"] == "10.4.0.2"
