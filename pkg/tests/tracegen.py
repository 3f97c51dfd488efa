"""Deterministic synthetic trace generator: realistic socket workloads with
fork/accept/dup/close interleavings, driven by a seeded RNG."""

import random


def make_event(ts, pid, syscall, ret=0, fd=None, **extra_args):
    args = dict(extra_args)
    if fd is not None:
        args["fd"] = fd
    return {"ts": ts, "pid": pid, "tid": pid, "syscall": syscall,
            "args": args, "ret": ret}


def generate(seed, n_events=200):
    """Emit roughly n_events valid events exercising every lifecycle shape:
    socket creation, configuration, connect/bind, fork inheritance, accept
    and dup derivation, close, fd reuse, and operations on unknown fds."""
    rng = random.Random(seed)
    events = []
    ts = 1_000_000
    next_pid = [100]
    # per-pid live fds and the per-pid next fd number
    live = {100: set()}
    next_fd = {100: 3}

    def emit(pid, syscall, ret=0, fd=None, **extra):
        nonlocal ts
        ts += rng.randint(1, 50)
        events.append(make_event(ts, pid, syscall, ret=ret, fd=fd, **extra))

    def new_fd(pid):
        fd = next_fd[pid]
        next_fd[pid] = fd + 1
        return fd

    while len(events) < n_events:
        pid = rng.choice(list(live))
        fds = sorted(live[pid])
        roll = rng.random()
        if roll < 0.18 or not fds:
            fd = new_fd(pid)
            emit(pid, "socket", ret=fd, type="SOCK_STREAM")
            live[pid].add(fd)
        elif roll < 0.30:
            fd = rng.choice(fds)
            emit(pid, rng.choice(["setsockopt", "fcntl", "ioctl"]), fd=fd)
        elif roll < 0.42:
            fd = rng.choice(fds)
            emit(pid, rng.choice(["connect", "bind"]), fd=fd,
                 addr=f"10.4.0.{rng.randint(1, 9)}")
        elif roll < 0.52:
            fd = rng.choice(fds)
            emit(pid, rng.choice(["read", "write", "poll", "sendfile"]), fd=fd,
                 ret=rng.randint(0, 4096))
        elif roll < 0.60:
            fd = rng.choice(fds)
            new = new_fd(pid)
            emit(pid, "accept", fd=fd, ret=new)
            live[pid].add(new)
        elif roll < 0.66:
            fd = rng.choice(fds)
            new = new_fd(pid)
            emit(pid, rng.choice(["dup", "dup3"]), fd=fd, ret=new)
            live[pid].add(new)
        elif roll < 0.72 and len(live) < 4:
            child = next_pid[0] = next_pid[0] + 1
            emit(pid, "fork", ret=child)
            live[child] = set(live[pid])
            next_fd[child] = next_fd[pid]
        elif roll < 0.80:
            fd = rng.choice(fds)
            emit(pid, rng.choice(["getsockname", "getpeername", "getsockopt"]),
                 fd=fd)
        elif roll < 0.88:
            fd = rng.choice(fds)
            emit(pid, "close", fd=fd)
            live[pid].discard(fd)
            if rng.random() < 0.4:  # immediate fd-number reuse
                emit(pid, "socket", ret=fd, type="SOCK_STREAM")
                live[pid].add(fd)
        elif roll < 0.94:
            # operation on an fd this analyzer never saw created
            emit(pid, rng.choice(["getpeername", "setsockopt", "shutdown"]),
                 fd=900 + rng.randint(0, 5))
        else:
            emit(pid, rng.choice(["openat", "mmap", "futex"]),
                 ret=rng.randint(0, 20))
    return events[:n_events]
