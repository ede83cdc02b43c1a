"""Point-to-point transports and the rank runner.

Both transports give reliable, FIFO, blocking delivery per ordered
``(sender, receiver)`` pair. Every message carries a three-part tag
``(phase, depth, group_id)``; a receiver that expects a different tag raises
:class:`ProtocolError` instead of silently consuming the wrong message.
"""

from __future__ import annotations

import logging
import queue
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from ..errors import ProtocolError, TransportError
from ..tensor import as_tensor, from_bytes, to_bytes

log = logging.getLogger(__name__)

Tag = tuple[int, int, int]

MAGIC = 0xAD5C0DE1
_FRAME = struct.Struct("<IHHH")
HEADER_SIZE = _FRAME.size + 6
_HANDSHAKE = struct.Struct("<Q")
DEFAULT_TIMEOUT = 120.0


def _check_tag(expected: Tag, got: Tag, src: int) -> None:
    if tuple(got) != tuple(expected):
        raise ProtocolError(f"tag mismatch from rank {src}: expected {expected}, got {tuple(got)}")


@dataclass
class RankContext:
    """A rank's identity plus its transport endpoint."""

    rank: int
    size: int
    transport: Any

    def __post_init__(self):
        if self.size < 1 or not 0 <= self.rank < self.size:
            raise ValueError(f"invalid rank {self.rank} for world size {self.size}")

    def send(self, dest: int, t: np.ndarray, tag: Tag) -> None:
        self.transport.send(dest, t, tag)

    def recv(self, src: int, tag: Tag) -> np.ndarray:
        return self.transport.recv(src, tag)


# --- in-process -------------------------------------------------------------


class InProcNetwork:
    """Per-ordered-pair FIFO queues shared by threads of one process.

    With ``seed`` set, each sender sleeps for a random few microseconds before
    enqueueing, which permutes delivery order across different pairs while
    keeping every pair FIFO.
    """

    def __init__(self, size: int, seed: int | None = None, timeout: float = DEFAULT_TIMEOUT,
                 max_jitter: float = 2e-4):
        self.size = size
        self.timeout = timeout
        self.seed = seed
        self.max_jitter = max_jitter
        self._queues = {(s, d): queue.Queue() for s in range(size) for d in range(size) if s != d}
        self._aborted = threading.Event()

    def endpoint(self, rank: int) -> "InProcTransport":
        rng = random.Random(self.seed * 1_000_003 + rank) if self.seed is not None else None
        return InProcTransport(self, rank, rng)

    def abort(self) -> None:
        self._aborted.set()


class InProcTransport:
    def __init__(self, net: InProcNetwork, rank: int, rng: random.Random | None):
        self.net = net
        self.rank = rank
        self._rng = rng

    def send(self, dest: int, t: np.ndarray, tag: Tag) -> None:
        if self.net._aborted.is_set():
            raise TransportError("network aborted")
        if self._rng is not None:
            time.sleep(self._rng.random() * self.net.max_jitter)
        # Copy so the receiver never aliases the sender's buffer.
        self.net._queues[(self.rank, dest)].put((tuple(tag), np.array(t, copy=True)))

    def recv(self, src: int, tag: Tag) -> np.ndarray:
        q = self.net._queues[(src, self.rank)]
        deadline = time.monotonic() + self.net.timeout
        while True:
            if self.net._aborted.is_set():
                raise TransportError("network aborted")
            try:
                got, payload = q.get(timeout=0.05)
                break
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise TransportError(f"rank {self.rank} timed out waiting for rank {src} {tag}")
        _check_tag(tag, got, src)
        return payload

    def close(self) -> None:
        pass


# --- TCP --------------------------------------------------------------------


def encode_frame(t: np.ndarray, tag: Tag) -> bytes:
    payload = to_bytes(t)
    phase, depth, group = tag
    return _FRAME.pack(MAGIC, phase, depth, group) + len(payload).to_bytes(6, "little") + payload


def decode_header(header: bytes) -> tuple[Tag, int]:
    magic, phase, depth, group = _FRAME.unpack_from(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic:#x}")
    return (phase, depth, group), int.from_bytes(header[_FRAME.size:HEADER_SIZE], "little")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise TransportError("peer closed the connection")
        got += k
    return bytes(buf)


class TCPTransport:
    """Full-mesh TCP transport.

    Rank ``r`` listens on ``base_port + r``. For every pair the lower rank
    connects and sends its rank id as an 8-byte little-endian handshake. A
    reader thread per peer drains frames into a queue so that simultaneous
    large sends in both directions cannot deadlock on socket buffers.
    """

    def __init__(self, rank: int, size: int, base_port: int, host: str = "127.0.0.1",
                 timeout: float = DEFAULT_TIMEOUT, connect_timeout: float = 30.0):
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self._socks: dict[int, socket.socket] = {}
        self._inbox: dict[int, queue.Queue] = {p: queue.Queue() for p in range(size) if p != rank}
        self._closed = False

        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((host, base_port + rank))
        except OSError as exc:
            listener.close()
            raise TransportError(f"rank {rank} cannot bind port {base_port + rank}: {exc}") from exc
        listener.listen(size)
        try:
            for peer in range(rank + 1, size):
                self._socks[peer] = self._connect(host, base_port + peer, connect_timeout)
                self._socks[peer].sendall(_HANDSHAKE.pack(rank))
            listener.settimeout(connect_timeout)
            for _ in range(rank):
                conn, _addr = listener.accept()
                conn.settimeout(None)
                (peer,) = _HANDSHAKE.unpack(_recv_exact(conn, _HANDSHAKE.size))
                if not 0 <= peer < rank or peer in self._socks:
                    raise ProtocolError(f"unexpected handshake rank {peer}")
                self._socks[peer] = conn
        except socket.timeout as exc:
            raise TransportError(f"rank {rank}: mesh setup timed out") from exc
        finally:
            listener.close()
        self._readers = []
        for peer, sock in self._socks.items():
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            th = threading.Thread(target=self._reader, args=(peer, sock), daemon=True)
            th.start()
            self._readers.append(th)

    @staticmethod
    def _connect(host: str, port: int, timeout: float) -> socket.socket:
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                sock.settimeout(None)
                return sock
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(f"cannot connect to {host}:{port}")
                time.sleep(0.01)

    def _reader(self, peer: int, sock: socket.socket) -> None:
        inbox = self._inbox[peer]
        try:
            while True:
                tag, length = decode_header(_recv_exact(sock, HEADER_SIZE))
                inbox.put((tag, _recv_exact(sock, length)))
        except Exception as exc:
            inbox.put((None, exc))

    def send(self, dest: int, t: np.ndarray, tag: Tag) -> None:
        try:
            self._socks[dest].sendall(encode_frame(as_tensor(t), tag))
        except OSError as exc:
            raise TransportError(f"send to rank {dest} failed: {exc}") from exc

    def recv(self, src: int, tag: Tag) -> np.ndarray:
        try:
            got, payload = self._inbox[src].get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"rank {self.rank} timed out waiting for rank {src} {tag}") from None
        if got is None:
            if self._closed:
                raise TransportError("transport closed")
            raise TransportError(f"connection to rank {src} failed: {payload}")
        _check_tag(tag, got, src)
        return from_bytes(payload)

    def close(self, linger: float = 5.0) -> None:
        if self._closed:
            return
        self._closed = True
        # Half-close first and let readers see the peer's FIN, so no queued
        # data is discarded by a reset.
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        deadline = time.monotonic() + linger
        for th in getattr(self, "_readers", []):
            th.join(max(0.0, deadline - time.monotonic()))
        for sock in self._socks.values():
            sock.close()


def find_free_base_port(size: int, start: int = 21000, stop: int = 60000) -> int:
    """Find ``size`` consecutive bindable loopback ports."""
    rng = random.Random()
    for _ in range(200):
        base = rng.randrange(start, stop - size)
        socks = []
        try:
            for r in range(size):
                s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                socks.append(s)
                s.bind(("127.0.0.1", base + r))
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise TransportError("no free port range found")


# --- runner -----------------------------------------------------------------


def run_ranks(size: int, fn: Callable[[RankContext], Any], *, transport: str = "inproc",
              seed: int | None = None, base_port: int | None = None,
              timeout: float = DEFAULT_TIMEOUT) -> list[Any]:
    """Run ``fn(ctx)`` on ``size`` ranks, one thread each; return per-rank results.

    The first failure aborts the network so blocked peers unwind, and is then
    re-raised in the caller.
    """
    results: list[Any] = [None] * size
    errors: list[tuple[int, BaseException]] = []
    lock = threading.Lock()

    if transport == "inproc":
        net = InProcNetwork(size, seed=seed, timeout=timeout)
        make = net.endpoint
        abort = net.abort
    elif transport == "tcp":
        port = base_port if base_port is not None else find_free_base_port(size)
        endpoints: dict[int, TCPTransport] = {}

        def make(rank):
            ep = TCPTransport(rank, size, port, timeout=timeout)
            with lock:
                endpoints[rank] = ep
            return ep

        def abort():
            with lock:
                for ep in endpoints.values():
                    ep.close()
    else:
        raise ValueError(f"unknown transport {transport!r}")

    def worker(rank):
        ep = None
        try:
            ep = make(rank)
            results[rank] = fn(RankContext(rank, size, ep))
        except BaseException as exc:
            with lock:
                errors.append((rank, exc))
            abort()
        finally:
            if ep is not None and transport == "tcp":
                ep.close()

    threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # Prefer the root cause over the aborts it triggered on other ranks.
        primary = [e for e in errors if not isinstance(e[1], TransportError)] or errors
        rank, exc = primary[0]
        log.debug("rank %d failed: %r", rank, exc)
        raise exc
    return results
