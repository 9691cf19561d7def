"""Delta encoding of agent batches against a per-peer reference.

Between two iterations most agents in an exchange survive with small field
changes, so instead of resending whole batches each side keeps the previous
message as a reference and ships only differences. The sender reorders the
outgoing batch to match the reference slot for slot (by global id), XORs
surviving same-length encodings against their slot bytes, marks departures,
appends newcomers as a complete embedded message, and compresses the result.
Both sides then rebuild the identical reconstructed message, which becomes
the next reference: no ordering metadata ever crosses the wire.

Frame layout (little-endian):

    magic "AGD0" | epoch u32 | slot_count u32 | ref_checksum u64 |
    body_checksum u64 | raw_len u64 | comp_len u64 | appended_len u64 |
    compressed body

Body: one entry per reference slot followed by the appended region.
Entry markers: 0x00 survivor, same length (XOR bytes, length implied by the
slot); 0x02 survivor, resized (u64 length then the raw element); 0xFF gone.
"""

from __future__ import annotations

import hashlib
import struct
import zlib

from .wire import HEADER, MAGIC, AgentBatch, decode, encode_bytes, encode_element

FRAME = struct.Struct("<4sIIQQQQQ")
FRAME_MAGIC = b"AGD0"

MARK_SAME = 0x00
MARK_RESIZED = 0x02
MARK_GONE = 0xFF

_U64 = struct.Struct("<Q")

COMPRESS_LEVEL = 6


class DeltaError(Exception):
    pass


class DeltaMismatch(DeltaError):
    """Sender and receiver disagree about the reference state."""


class CorruptDelta(DeltaError):
    pass


def hash64(data) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def compress_message(raw: bytes) -> bytes:
    """Plain whole-message compression (the non-delta compressed channel)."""
    return zlib.compress(bytes(raw), COMPRESS_LEVEL)


def decompress_message(comp: bytes) -> bytes:
    try:
        return zlib.decompress(bytes(comp))
    except zlib.error as exc:
        raise CorruptDelta(f"compressed message does not inflate: {exc}") from exc


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(
        len(a), "little"
    )


def _batch_slots(msg: bytes) -> list[tuple[int, int, int]]:
    """(gid, start, end) spans of each element in a batch message, where the
    span includes the element's class-id prefix."""
    batch = decode(msg).root
    if batch.wire_cls is not AgentBatch:
        raise DeltaError(f"reference message is a {batch.wire_cls.__name__}, not an AgentBatch")
    out = []
    for elem in batch.agents:
        try:
            gid = elem.gid
        except AttributeError as exc:
            raise DeltaError(f"{elem.wire_cls.__name__} has no gid; cannot delta-encode") from exc
        out.append((gid, elem.span[0] - 4, elem.span[1]))
    return out


_EMPTY_MSG = None


def _empty_message() -> bytes:
    global _EMPTY_MSG
    if _EMPTY_MSG is None:
        _EMPTY_MSG = encode_bytes(AgentBatch([]))
    return _EMPTY_MSG


class DeltaCodec:
    """One direction of one peer link. Sender and receiver each hold one and
    must feed it every frame in order; the epoch counter trips DeltaMismatch
    if they drift."""

    def __init__(self) -> None:
        self.epoch = 0
        self._ref = _empty_message()
        self._slots = _batch_slots(self._ref)
        self._ref_checksum = hash64(self._ref)

    @property
    def reference_bytes(self) -> bytes:
        return self._ref

    def reset(self) -> None:
        """Drop the reference; the next frame is a pure append (used on the
        refresh schedule both sides derive from the iteration number)."""
        self._ref = _empty_message()
        self._slots = _batch_slots(self._ref)
        self._ref_checksum = hash64(self._ref)

    # -- sending ----------------------------------------------------------

    def encode(self, agents, refresh: bool = False) -> bytes:
        if refresh:
            self.reset()
        by_gid = {}
        for agent in agents:
            try:
                gid = agent.gid
            except AttributeError as exc:
                raise DeltaError(
                    f"{type(agent).__name__} has no gid; cannot delta-encode"
                ) from exc
            if gid in by_gid:
                raise DeltaError(f"duplicate gid {gid} in outgoing batch")
            by_gid[gid] = agent
        body = bytearray()
        survivors: list[bytes] = []
        for gid, start, end in self._slots:
            agent = by_gid.pop(gid, None)
            if agent is None:
                body.append(MARK_GONE)
                continue
            enc = encode_element(agent)
            slot_bytes = self._ref[start:end]
            if len(enc) == len(slot_bytes):
                body.append(MARK_SAME)
                body += _xor(enc, slot_bytes)
            else:
                body.append(MARK_RESIZED)
                body += _U64.pack(len(enc))
                body += enc
            survivors.append(enc)
        appended_agents = [by_gid[g] for g in sorted(by_gid)]
        appended_msg = encode_bytes(AgentBatch(appended_agents))
        body += appended_msg
        raw = bytes(body)
        comp = zlib.compress(raw, COMPRESS_LEVEL)
        frame = FRAME.pack(
            FRAME_MAGIC,
            self.epoch,
            len(self._slots),
            self._ref_checksum,
            hash64(raw),
            len(raw),
            len(comp),
            len(appended_msg),
        ) + comp
        self._install_reference(survivors, appended_msg)
        self.epoch += 1
        return frame

    # -- receiving --------------------------------------------------------

    def decode(self, frame, refresh: bool = False) -> bytes:
        """Rebuild the full batch message a frame describes; returns wire
        bytes identical to what the sender would have sent uncompressed."""
        if refresh:
            self.reset()
        frame = bytes(frame)
        if len(frame) < FRAME.size:
            raise CorruptDelta(f"frame shorter than header: {len(frame)} bytes")
        magic, epoch, slot_count, ref_sum, body_sum, raw_len, comp_len, appended_len = (
            FRAME.unpack_from(frame, 0)
        )
        if magic != FRAME_MAGIC:
            raise CorruptDelta(f"bad frame magic {magic!r}")
        if epoch != self.epoch:
            raise DeltaMismatch(f"frame epoch {epoch}, codec expects {self.epoch}")
        if slot_count != len(self._slots):
            raise DeltaMismatch(
                f"frame carries {slot_count} slots, reference has {len(self._slots)}"
            )
        if ref_sum != self._ref_checksum:
            raise DeltaMismatch("reference checksum differs; peers are out of sync")
        if len(frame) != FRAME.size + comp_len:
            raise CorruptDelta("frame length does not match comp_len")
        try:
            raw = zlib.decompress(frame[FRAME.size :])
        except zlib.error as exc:
            raise CorruptDelta(f"body does not inflate: {exc}") from exc
        if len(raw) != raw_len:
            raise CorruptDelta(f"inflated body is {len(raw)} bytes, header says {raw_len}")
        if hash64(raw) != body_sum:
            raise CorruptDelta("body checksum mismatch")

        survivors: list[bytes] = []
        off = 0
        for gid, start, end in self._slots:
            if off >= len(raw):
                raise CorruptDelta("body ends inside the slot stream")
            marker = raw[off]
            off += 1
            if marker == MARK_GONE:
                continue
            if marker == MARK_SAME:
                n = end - start
                if off + n > len(raw):
                    raise CorruptDelta("truncated XOR entry")
                survivors.append(_xor(raw[off : off + n], self._ref[start:end]))
                off += n
            elif marker == MARK_RESIZED:
                if off + 8 > len(raw):
                    raise CorruptDelta("truncated resize entry")
                n = _U64.unpack_from(raw, off)[0]
                off += 8
                if off + n > len(raw):
                    raise CorruptDelta("truncated resized element")
                survivors.append(raw[off : off + n])
                off += n
            else:
                raise CorruptDelta(f"unknown slot marker 0x{marker:02x}")
        appended_msg = raw[off:]
        if len(appended_msg) != appended_len:
            raise CorruptDelta(
                f"appended region is {len(appended_msg)} bytes, header says {appended_len}"
            )
        msg = self._install_reference(survivors, appended_msg)
        self.epoch += 1
        return msg

    # -- shared reference update -------------------------------------------

    def _install_reference(self, survivors: list[bytes], appended_msg: bytes) -> bytes:
        """Assemble the reconstructed message (survivors in slot order, then
        appended agents) and make it the new reference. Byte-identical on
        both sides by construction."""
        appended_elems: list[tuple[int, int]] = []
        appended = decode(appended_msg).root
        if appended.wire_cls is not AgentBatch:
            raise CorruptDelta("appended region is not a batch message")
        for elem in appended.agents:
            appended_elems.append((elem.span[0] - 4, elem.span[1]))
        count = len(survivors) + len(appended_elems)
        payload = bytearray()
        payload += _U64.pack(count)
        for enc in survivors:
            payload += enc
        for start, end in appended_elems:
            payload += appended_msg[start:end]
        msg = HEADER.pack(MAGIC, AgentBatch.wire_schema.class_id, len(payload)) + bytes(
            payload
        )
        self._ref = msg
        self._slots = _batch_slots(msg)
        self._ref_checksum = hash64(msg)
        return msg
