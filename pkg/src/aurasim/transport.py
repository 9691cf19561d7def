"""Rank-to-rank messaging: in-process queues or TCP sockets.

Both implementations present the same contract: tagged point-to-point
messages with per-(src, dst, tag) FIFO order and exactly-once delivery,
payload batching into bounded chunks, an allgather collective built from
gather-to-root plus broadcast, speculative receive tokens that can be
cancelled without losing data, and an abort channel that tears the whole
world down. The engine never knows which implementation it is running on;
result bytes must not depend on it.

Chunk envelope (little-endian): src u32 | dst u32 | tag u16 | batch_index
u32 | batch_total u32 | chunk_length u64, followed by the chunk.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from collections import deque
from enum import IntEnum

from .wire import BufferPool, PoolBuffer, WireStats

ENVELOPE = struct.Struct("<IIHIIQ")
HELLO = struct.Struct("<4sIH")
HELLO_MAGIC = b"TAH0"
BYTE_ORDER_PROBE = 0x0102


class Tag(IntEnum):
    AURA = 1
    MIGRATE = 2
    LOOKUP_REQ = 3
    LOOKUP_RESP = 4
    LB = 5
    CONTROL = 6


class TransportError(Exception):
    pass


class TransportDown(TransportError):
    """The world is gone: a peer aborted, hung up, or timed out."""


class CollectiveMismatch(TransportError):
    """Ranks entered a collective with different phase ids."""


class _Mailbox:
    """Receive side of one rank: chunk reassembly plus ready queues."""

    def __init__(self, pool: BufferPool) -> None:
        self.pool = pool
        self.cond = threading.Condition()
        self.ready: dict[tuple[int, int], deque[PoolBuffer]] = {}
        self.partial: dict[tuple[int, int], tuple[PoolBuffer, int, int]] = {}
        self.aborted: str | None = None

    def push_chunk(self, src: int, tag: int, index: int, total: int, chunk) -> None:
        key = (src, tag)
        with self.cond:
            if key in self.partial:
                buf, expect, expect_total = self.partial.pop(key)
            else:
                buf, expect, expect_total = self.pool.acquire(), 0, total
            if index != expect or total != expect_total:
                raise TransportError(
                    f"chunk {index}/{total} from rank {src} tag {tag}, expected {expect}/{expect_total}"
                )
            buf.data += chunk
            if index + 1 == total:
                self.ready.setdefault(key, deque()).append(buf)
                self.cond.notify_all()
            else:
                self.partial[key] = (buf, index + 1, total)

    def abort(self, reason: str) -> None:
        with self.cond:
            self.aborted = reason
            self.cond.notify_all()

    def pop(self, src: int, tag: int, timeout: float | None) -> PoolBuffer:
        key = (src, tag)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self.cond:
            while True:
                q = self.ready.get(key)
                if q:
                    return q.popleft()
                if self.aborted is not None:
                    raise TransportDown(self.aborted)
                if deadline is None:
                    self.cond.wait()
                else:
                    remain = deadline - time.monotonic()
                    if remain <= 0:
                        raise TransportDown(
                            f"timeout waiting for tag {Tag(tag).name} from rank {src}"
                        )
                    self.cond.wait(remain)

    def try_pop(self, src: int, tag: int) -> PoolBuffer | None:
        with self.cond:
            if self.aborted is not None:
                raise TransportDown(self.aborted)
            q = self.ready.get((src, tag))
            return q.popleft() if q else None


class ReceiveToken:
    """A posted expectation of one message. Cancelling never discards data:
    anything already queued stays queued for the next receiver."""

    def __init__(self, transport: "Transport", src: int, tag: int) -> None:
        self._transport = transport
        self.src = src
        self.tag = tag
        self.cancelled = False

    def wait(self, timeout: float | None = None) -> PoolBuffer:
        if self.cancelled:
            raise TransportError("receive token was cancelled")
        return self._transport.recv(self.src, self.tag, timeout)

    def test(self) -> PoolBuffer | None:
        if self.cancelled:
            raise TransportError("receive token was cancelled")
        return self._transport.try_recv(self.src, self.tag)

    def cancel(self) -> None:
        self.cancelled = True


class Transport:
    """Common machinery; subclasses provide _deliver (the actual send)."""

    def __init__(self, rank: int, size: int, batch_bytes: int, pool: BufferPool | None = None):
        self.rank = rank
        self.size = size
        self.batch_bytes = max(1, int(batch_bytes))
        self.pool = pool or BufferPool(WireStats())
        self.mailbox = _Mailbox(self.pool)
        self._count_lock = threading.Lock()
        self.sent_bytes: dict[int, int] = {t: 0 for t in Tag}
        self.recv_bytes: dict[int, int] = {t: 0 for t in Tag}

    # -- to be provided by implementations ----------------------------------

    def _deliver(self, dst: int, frames: list[bytes]) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # -- sending -------------------------------------------------------------

    def isend(self, dst: int, tag: int, payload) -> None:
        """Queue a message; never blocks on the receiver."""
        if not (0 <= dst < self.size):
            raise TransportError(f"destination rank {dst} outside world of {self.size}")
        view = memoryview(payload.data if isinstance(payload, PoolBuffer) else payload)
        total = max(1, -(-len(view) // self.batch_bytes))
        frames = []
        sent = 0
        for i in range(total):
            chunk = view[i * self.batch_bytes : (i + 1) * self.batch_bytes]
            env = ENVELOPE.pack(self.rank, dst, tag, i, total, len(chunk))
            frames.append(env + chunk.tobytes())
            sent += len(env) + len(chunk)
        self._deliver(dst, frames)
        with self._count_lock:
            self.sent_bytes[tag] += sent

    # -- receiving -----------------------------------------------------------

    def recv(self, src: int, tag: int, timeout: float | None = None) -> PoolBuffer:
        buf = self.mailbox.pop(src, tag, timeout)
        with self._count_lock:
            self.recv_bytes[tag] += len(buf.data)
        return buf

    def try_recv(self, src: int, tag: int) -> PoolBuffer | None:
        buf = self.mailbox.try_pop(src, tag)
        if buf is not None:
            with self._count_lock:
                self.recv_bytes[tag] += len(buf.data)
        return buf

    def post_recv(self, src: int, tag: int) -> ReceiveToken:
        return ReceiveToken(self, src, tag)

    # -- collectives -----------------------------------------------------------

    def allgather(
        self,
        payload: bytes,
        phase_id: int,
        tags: tuple[int, int] = (Tag.LB, Tag.LB),
        timeout: float | None = None,
    ) -> list[bytes]:
        """Every rank contributes a blob; every rank gets all blobs in rank
        order. Gather to rank 0, then broadcast. Phase ids must agree."""
        gather_tag, bcast_tag = tags
        phase = struct.pack("<Q", phase_id)
        if self.size == 1:
            return [bytes(payload)]
        if self.rank == 0:
            parts: list[bytes] = [bytes(payload)]
            for src in range(1, self.size):
                buf = self.recv(src, gather_tag, timeout)
                data = bytes(buf.data)
                self.pool.release(buf)
                (got_phase,) = struct.unpack_from("<Q", data, 0)
                if got_phase != phase_id:
                    self.abort(f"collective phase mismatch: rank {src} sent {got_phase}, expected {phase_id}")
                    raise CollectiveMismatch(
                        f"rank {src} entered phase {got_phase}, rank 0 is in {phase_id}"
                    )
                parts.append(data[8:])
            blob = bytearray(phase)
            blob += struct.pack("<I", self.size)
            for p in parts:
                blob += struct.pack("<Q", len(p))
            for p in parts:
                blob += p
            for dst in range(1, self.size):
                self.isend(dst, bcast_tag, blob)
            return parts
        self.isend(0, gather_tag, phase + bytes(payload))
        buf = self.recv(0, bcast_tag, timeout)
        data = bytes(buf.data)
        self.pool.release(buf)
        (got_phase,) = struct.unpack_from("<Q", data, 0)
        if got_phase != phase_id:
            raise CollectiveMismatch(
                f"broadcast is for phase {got_phase}, this rank is in {phase_id}"
            )
        (count,) = struct.unpack_from("<I", data, 8)
        if count != self.size:
            raise CollectiveMismatch(f"broadcast names {count} ranks, world has {self.size}")
        lens = struct.unpack_from(f"<{count}Q", data, 12)
        parts = []
        off = 12 + 8 * count
        for n in lens:
            parts.append(data[off : off + n])
            off += n
        return parts

    # -- failure ---------------------------------------------------------------

    def abort(self, reason: str) -> None:
        """Broadcast a shutdown; local and remote pending receives fail fast."""
        for dst in range(self.size):
            if dst != self.rank:
                try:
                    self.isend(dst, Tag.CONTROL, reason.encode())
                except TransportError:
                    pass
        self.mailbox.abort(f"aborted by rank {self.rank}: {reason}")


# ---------------------------------------------------------------------------
# In-process transport (threads in one interpreter)
# ---------------------------------------------------------------------------


class InProcWorld:
    """Shared state for a world of thread ranks inside one process."""

    def __init__(self, size: int, batch_bytes: int = 65536) -> None:
        self.size = size
        self.batch_bytes = batch_bytes
        self._lock = threading.Lock()
        self._transports: list[InProcTransport | None] = [None] * size

    def transport(self, rank: int, pool: BufferPool | None = None) -> "InProcTransport":
        with self._lock:
            t = self._transports[rank]
            if t is None:
                t = InProcTransport(self, rank, pool)
                self._transports[rank] = t
            return t

    def _mailbox_of(self, dst: int) -> _Mailbox:
        t = self._transports[dst]
        if t is None:
            t = self.transport(dst)
        return t.mailbox


class InProcTransport(Transport):
    def __init__(self, world: InProcWorld, rank: int, pool: BufferPool | None = None) -> None:
        super().__init__(rank, world.size, world.batch_bytes, pool)
        self.world = world

    def _deliver(self, dst: int, frames: list[bytes]) -> None:
        box = self.world._mailbox_of(dst)
        for frame in frames:
            src, _dst, tag, index, total, n = ENVELOPE.unpack_from(frame, 0)
            chunk = frame[ENVELOPE.size : ENVELOPE.size + n]
            if tag == Tag.CONTROL:
                box.abort(f"aborted by rank {src}: {chunk.decode(errors='replace')}")
            else:
                box.push_chunk(src, tag, index, total, chunk)


# ---------------------------------------------------------------------------
# TCP transport (one process per rank)
# ---------------------------------------------------------------------------


def load_roster(path: str) -> list[tuple[str, int]]:
    """Roster file: {"world": [{"rank": 0, "host": "...", "port": N}, ...]}"""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    world = sorted(doc["world"], key=lambda e: e["rank"])
    if [e["rank"] for e in world] != list(range(len(world))):
        raise TransportError("roster ranks are not contiguous from 0")
    return [(e["host"], int(e["port"])) for e in world]


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    out = bytearray()
    while len(out) < n:
        got = sock.recv(n - len(out))
        if not got:
            return None
        out += got
    return bytes(out)


class TcpTransport(Transport):
    """Full mesh over loopback-or-LAN sockets; rank i dials every j > i."""

    CONNECT_RETRY_S = 0.05
    CONNECT_TIMEOUT_S = 30.0

    def __init__(
        self,
        rank: int,
        roster: list[tuple[str, int]],
        batch_bytes: int = 65536,
        pool: BufferPool | None = None,
    ) -> None:
        super().__init__(rank, len(roster), batch_bytes, pool)
        self.roster = roster
        self._socks: dict[int, socket.socket] = {}
        self._send_queues: dict[int, deque] = {}
        self._send_conds: dict[int, threading.Condition] = {}
        self._threads: list[threading.Thread] = []
        self._closing = False
        if self.size > 1:
            self._connect_mesh()

    # -- mesh construction ---------------------------------------------------

    def _connect_mesh(self) -> None:
        host, port = self.roster[self.rank]
        listener = socket.create_server((host, port), backlog=self.size)
        listener.settimeout(self.CONNECT_TIMEOUT_S)
        expected_in = self.rank  # every lower rank dials us
        accepted = 0
        try:
            # Dial higher ranks while accepting lower ones; do the dialing
            # from a helper thread so neither side deadlocks.
            dialer = threading.Thread(target=self._dial_higher, daemon=True)
            dialer.start()
            while accepted < expected_in:
                conn, _addr = listener.accept()
                self._handshake_accept(conn)
                accepted += 1
            dialer.join(self.CONNECT_TIMEOUT_S)
            if dialer.is_alive():
                raise TransportError("timed out dialing higher ranks")
        finally:
            listener.close()
        missing = [p for p in range(self.size) if p != self.rank and p not in self._socks]
        if missing:
            raise TransportError(f"mesh incomplete, no connection to ranks {missing}")
        for peer, sock in self._socks.items():
            self._start_peer_threads(peer, sock)

    def _dial_higher(self) -> None:
        for peer in range(self.rank + 1, self.size):
            host, port = self.roster[peer]
            deadline = time.monotonic() + self.CONNECT_TIMEOUT_S
            while True:
                try:
                    sock = socket.create_connection((host, port), timeout=2.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        return
                    time.sleep(self.CONNECT_RETRY_S)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(HELLO.pack(HELLO_MAGIC, self.rank, BYTE_ORDER_PROBE))
            reply = _recv_exact(sock, HELLO.size)
            if reply is None:
                return
            magic, peer_rank, probe = HELLO.unpack(reply)
            if magic != HELLO_MAGIC or probe != BYTE_ORDER_PROBE or peer_rank != peer:
                sock.close()
                return
            self._socks[peer] = sock

    def _handshake_accept(self, conn: socket.socket) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        hello = _recv_exact(conn, HELLO.size)
        if hello is None:
            conn.close()
            raise TransportError("peer hung up during handshake")
        magic, peer_rank, probe = HELLO.unpack(hello)
        if magic != HELLO_MAGIC:
            conn.close()
            raise TransportError(f"bad handshake magic {magic!r}")
        if probe != BYTE_ORDER_PROBE:
            conn.close()
            raise TransportError("peer byte order probe mismatch")
        conn.sendall(HELLO.pack(HELLO_MAGIC, self.rank, BYTE_ORDER_PROBE))
        self._socks[peer_rank] = conn

    def _start_peer_threads(self, peer: int, sock: socket.socket) -> None:
        self._send_queues[peer] = deque()
        self._send_conds[peer] = threading.Condition()
        reader = threading.Thread(target=self._read_loop, args=(peer, sock), daemon=True)
        writer = threading.Thread(target=self._write_loop, args=(peer, sock), daemon=True)
        reader.start()
        writer.start()
        self._threads += [reader, writer]

    # -- data plane ------------------------------------------------------------

    def _deliver(self, dst: int, frames: list[bytes]) -> None:
        if dst == self.rank:
            for frame in frames:
                src, _d, tag, index, total, n = ENVELOPE.unpack_from(frame, 0)
                self.mailbox.push_chunk(src, tag, index, total, frame[ENVELOPE.size :])
            return
        cond = self._send_conds.get(dst)
        if cond is None:
            raise TransportDown(f"no connection to rank {dst}")
        with cond:
            self._send_queues[dst].extend(frames)
            cond.notify()

    def _write_loop(self, peer: int, sock: socket.socket) -> None:
        cond = self._send_conds[peer]
        q = self._send_queues[peer]
        try:
            while True:
                with cond:
                    while not q and not self._closing:
                        cond.wait(0.5)
                    if not q:
                        if self._closing:
                            return
                        continue
                    frame = q.popleft()
                    if not q:
                        cond.notify_all()  # wakes close() waiting for drain
                sock.sendall(frame)
        except OSError:
            if not self._closing:
                self.mailbox.abort(f"connection to rank {peer} failed while sending")

    def _read_loop(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                head = _recv_exact(sock, ENVELOPE.size)
                if head is None:
                    break
                src, _dst, tag, index, total, n = ENVELOPE.unpack(head)
                chunk = _recv_exact(sock, n) if n else b""
                if chunk is None:
                    break
                if tag == Tag.CONTROL:
                    self.mailbox.abort(
                        f"aborted by rank {src}: {chunk.decode(errors='replace')}"
                    )
                    continue
                self.mailbox.push_chunk(src, tag, index, total, chunk)
        except OSError:
            pass
        except TransportError as exc:
            self.mailbox.abort(str(exc))
            return
        if not self._closing:
            self.mailbox.abort(f"connection to rank {peer} dropped")

    def close(self) -> None:
        self._closing = True
        for cond in self._send_conds.values():
            with cond:
                cond.notify_all()
        # Give writers a moment to drain before tearing sockets down.
        deadline = time.monotonic() + 5.0
        for peer, q in self._send_queues.items():
            cond = self._send_conds[peer]
            with cond:
                while q and time.monotonic() < deadline:
                    cond.wait(0.05)
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
