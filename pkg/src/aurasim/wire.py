"""Zero-parse tree serialization for agent messages.

A message is one header plus a linear run of node blocks in depth-first
pre-order. Scalars are little-endian and fixed-width, references are an
8-byte presence flag (0 absent, 1 present) followed by the child block,
polymorphic children carry a u32 class-id prefix, and sequences are a u64
count followed by the elements inline. Because layout is fully determined
by the class schemas, decoding is a single linear walk that reads only
structure (counts, class ids, presence flags); field values stay in the
receive buffer untouched until someone asks for them through a view.

Decoded views are mutable: scalar and vec3 fields write straight back into
the buffer, and growing a sequence relocates its elements to fresh storage
(releasing their in-buffer blocks at that moment). Reclamation is counted
per block: every node block of a DecodedMessage must be released exactly
once, and when the last one goes the backing buffer returns to its pool.
Double releases and handles from other messages are errors, and the pool
tracks a live high-water mark so leak regressions show up as a number.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

MAGIC = b"AGT0"
HEADER = struct.Struct("<4sIQ")  # magic, root class id, payload length

_SCALAR_FMT = {
    "f64": struct.Struct("<d"),
    "u64": struct.Struct("<Q"),
    "i64": struct.Struct("<q"),
    "u32": struct.Struct("<I"),
    "u16": struct.Struct("<H"),
    "u8": struct.Struct("<B"),
    # an agent reference travels as the referee's global id only; decoding
    # yields the bare id and the engine re-binds it locally
    "gid": struct.Struct("<Q"),
}
_VEC3 = struct.Struct("<3d")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class WireError(Exception):
    pass


class SchemaError(WireError):
    pass


class CorruptFrame(WireError):
    pass


class DoubleRelease(WireError):
    pass


class ForeignHandle(WireError):
    pass


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    cls: type | None = None  # for ref/seq: element class, None means polymorphic

    @property
    def poly(self) -> bool:
        return self.kind in ("ref", "seq") and self.cls is None


class WireSchema:
    def __init__(self, class_id: int, cls: type, fields: list[Field]) -> None:
        if not (1 <= class_id <= 0xFFFFFFFF):
            raise SchemaError(f"class id {class_id} outside [1, 2^32)")
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {cls.__name__}")
        for f in fields:
            if f.kind not in ("vec3", "ref", "seq", "bytes") and f.kind not in _SCALAR_FMT:
                raise SchemaError(f"unknown field kind {f.kind!r}")
        self.class_id = class_id
        self.cls = cls
        self.fields = tuple(fields)
        self.index = {f.name: i for i, f in enumerate(fields)}


class WireRegistry:
    def __init__(self) -> None:
        self._by_id: dict[int, WireSchema] = {}

    def add(self, schema: WireSchema) -> None:
        old = self._by_id.get(schema.class_id)
        if old is not None and old.cls is not schema.cls:
            raise SchemaError(
                f"class id {schema.class_id} already bound to {old.cls.__name__}"
            )
        self._by_id[schema.class_id] = schema

    def by_id(self, class_id: int) -> WireSchema:
        schema = self._by_id.get(class_id)
        if schema is None:
            raise SchemaError(f"unknown class id {class_id}")
        return schema


DEFAULT_REGISTRY = WireRegistry()


def wire_class(class_id: int, *field_specs, registry: WireRegistry | None = None):
    """Class decorator binding a wire schema: specs are (name, kind) or
    (name, "ref"/"seq", element_class_or_None)."""

    def deco(cls):
        fields = []
        for spec in field_specs:
            if len(spec) == 2:
                fields.append(Field(spec[0], spec[1]))
            elif len(spec) == 3:
                fields.append(Field(spec[0], spec[1], spec[2]))
            else:
                raise SchemaError(f"bad field spec {spec!r}")
        schema = WireSchema(class_id, cls, fields)
        (registry or DEFAULT_REGISTRY).add(schema)
        cls.wire_schema = schema
        return cls

    return deco


def schema_of(obj) -> WireSchema:
    if isinstance(obj, NodeView):
        return obj._schema
    schema = getattr(type(obj), "wire_schema", None)
    if schema is None:
        raise SchemaError(f"{type(obj).__name__} has no wire schema")
    return schema


# ---------------------------------------------------------------------------
# Accounting pool
# ---------------------------------------------------------------------------


class WireStats:
    """Shared counters; thread-safe because transports touch them from
    receiver threads."""

    __slots__ = (
        "lock",
        "acquisitions",
        "releases",
        "live",
        "live_hwm",
        "payload_copies",
        "decoded_messages",
        "decoded_blocks",
        "materializations",
    )

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.acquisitions = 0
        self.releases = 0
        self.live = 0
        self.live_hwm = 0
        self.payload_copies = 0
        self.decoded_messages = 0
        self.decoded_blocks = 0
        self.materializations = 0

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "acquisitions": self.acquisitions,
                "releases": self.releases,
                "live": self.live,
                "live_hwm": self.live_hwm,
                "payload_copies": self.payload_copies,
                "decoded_messages": self.decoded_messages,
                "decoded_blocks": self.decoded_blocks,
                "materializations": self.materializations,
            }


class PoolBuffer:
    __slots__ = ("data", "_pool", "_live")

    def __init__(self, data: bytearray, pool: "BufferPool") -> None:
        self.data = data
        self._pool = pool
        self._live = True

    def __len__(self) -> int:
        return len(self.data)

    @property
    def live(self) -> bool:
        return self._live


class BufferPool:
    """Checked allocator for message buffers, with a free list for reuse."""

    def __init__(self, stats: WireStats | None = None) -> None:
        self.stats = stats or WireStats()
        self._free: list[bytearray] = []

    def acquire(self) -> PoolBuffer:
        data = self._free.pop() if self._free else bytearray()
        del data[:]
        st = self.stats
        with st.lock:
            st.acquisitions += 1
            st.live += 1
            if st.live > st.live_hwm:
                st.live_hwm = st.live
        return PoolBuffer(data, self)

    def release(self, buf: PoolBuffer) -> None:
        if not isinstance(buf, PoolBuffer) or buf._pool is not self:
            raise ForeignHandle("buffer does not belong to this pool")
        if not buf._live:
            raise DoubleRelease("buffer already released")
        buf._live = False
        st = self.stats
        with st.lock:
            st.releases += 1
            st.live -= 1
        self._free.append(buf.data)
        buf.data = bytearray()


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def encode(obj, pool: BufferPool) -> PoolBuffer:
    """Serialize an object tree into a pooled buffer (exactly one acquisition)."""
    schema = schema_of(obj)
    buf = pool.acquire()
    data = buf.data
    data += HEADER.pack(MAGIC, schema.class_id, 0)
    _encode_node(data, obj, schema)
    struct.pack_into("<Q", data, 8, len(data) - HEADER.size)
    return buf


def encode_bytes(obj) -> bytes:
    """Serialize without pool accounting; for long-lived reference copies."""
    schema = schema_of(obj)
    data = bytearray()
    data += HEADER.pack(MAGIC, schema.class_id, 0)
    _encode_node(data, obj, schema)
    struct.pack_into("<Q", data, 8, len(data) - HEADER.size)
    return bytes(data)


def encode_element(obj) -> bytes:
    """One polymorphic sequence element exactly as it appears inside a
    message: u32 class-id prefix followed by the node block."""
    schema = schema_of(obj)
    data = bytearray()
    data += _U32.pack(schema.class_id)
    _encode_node(data, obj, schema)
    return bytes(data)


def _encode_node(data: bytearray, obj, schema: WireSchema) -> None:
    for f in schema.fields:
        value = getattr(obj, f.name)
        kind = f.kind
        if kind in _SCALAR_FMT:
            try:
                data += _SCALAR_FMT[kind].pack(value)
            except (struct.error, TypeError) as exc:
                raise SchemaError(f"{schema.cls.__name__}.{f.name}: {exc}") from exc
        elif kind == "vec3":
            data += _VEC3.pack(value[0], value[1], value[2])
        elif kind == "ref":
            if value is None:
                data += _U64.pack(0)
            else:
                data += _U64.pack(1)
                child_schema = schema_of(value)
                if f.poly:
                    data += _U32.pack(child_schema.class_id)
                elif child_schema.cls is not f.cls:
                    raise SchemaError(
                        f"{schema.cls.__name__}.{f.name}: expected {f.cls.__name__},"
                        f" got {child_schema.cls.__name__}"
                    )
                _encode_node(data, value, child_schema)
        elif kind == "seq":
            data += _U64.pack(len(value))
            for elem in value:
                child_schema = schema_of(elem)
                if f.poly:
                    data += _U32.pack(child_schema.class_id)
                elif child_schema.cls is not f.cls:
                    raise SchemaError(
                        f"{schema.cls.__name__}.{f.name}: expected {f.cls.__name__},"
                        f" got {child_schema.cls.__name__}"
                    )
                _encode_node(data, elem, child_schema)
        elif kind == "bytes":
            raw = bytes(value) if not isinstance(value, (bytes, bytearray, memoryview)) else value
            data += _U64.pack(len(raw))
            data += raw
        else:  # pragma: no cover - schema constructor rejects unknown kinds
            raise SchemaError(f"unknown kind {kind}")


# ---------------------------------------------------------------------------
# Decoding (views, no payload copies)
# ---------------------------------------------------------------------------


class NodeView:
    """Window onto one node block inside a message buffer.

    Attribute access unpacks scalars on demand; nothing is copied out of the
    buffer. Scalar and vec3 assignment packs straight back into the buffer,
    so a mutated view re-encodes with the new value. Reference, sequence,
    and bytes fields cannot be rebound (grow sequences through their view).
    """

    __slots__ = ("_buf", "_schema", "_slots", "_msg", "span")

    def __init__(self, buf, schema: WireSchema, slots: list, span: tuple[int, int]) -> None:
        object.__setattr__(self, "_buf", buf)
        object.__setattr__(self, "_schema", schema)
        object.__setattr__(self, "_slots", slots)
        object.__setattr__(self, "_msg", None)
        object.__setattr__(self, "span", span)

    @property
    def wire_id(self) -> int:
        return self._schema.class_id

    @property
    def wire_cls(self) -> type:
        return self._schema.cls

    def _check_usable(self) -> None:
        msg = self._msg
        if msg is not None and msg.reclaimed:
            raise WireError("message buffer already reclaimed")

    def __getattr__(self, name: str):
        idx = self._schema.index.get(name)
        if idx is None:
            raise AttributeError(f"{self._schema.cls.__name__} view has no field {name!r}")
        self._check_usable()
        f = self._schema.fields[idx]
        slot = self._slots[idx]
        kind = f.kind
        if kind in _SCALAR_FMT:
            return _SCALAR_FMT[kind].unpack_from(self._buf, slot)[0]
        if kind == "vec3":
            return _VEC3.unpack_from(self._buf, slot)
        if kind == "bytes":
            off, n = slot
            return memoryview(self._buf)[off : off + n]
        return slot  # ref: NodeView|None, seq: SeqView

    def __setattr__(self, name, value):
        idx = self._schema.index.get(name)
        if idx is None:
            raise AttributeError(f"{self._schema.cls.__name__} view has no field {name!r}")
        self._check_usable()
        f = self._schema.fields[idx]
        if f.kind not in _SCALAR_FMT and f.kind != "vec3":
            raise WireError(
                f"cannot rebind {f.kind} field {self._schema.cls.__name__}.{name};"
                " views mutate scalars and vec3 in place only"
            )
        try:
            if f.kind == "vec3":
                _VEC3.pack_into(self._buf, self._slots[idx], value[0], value[1], value[2])
            else:
                _SCALAR_FMT[f.kind].pack_into(self._buf, self._slots[idx], value)
        except TypeError as exc:
            if isinstance(self._buf, (bytes, memoryview)):
                raise WireError(
                    "buffer is read-only; decode from a pooled buffer to mutate"
                ) from exc
            raise SchemaError(f"{self._schema.cls.__name__}.{name}: {exc}") from exc
        except struct.error as exc:
            raise SchemaError(f"{self._schema.cls.__name__}.{name}: {exc}") from exc

    def __repr__(self) -> str:
        return f"<NodeView {self._schema.cls.__name__}>"


class SeqView:
    """Sequence field of a decoded node.

    Reads go to the in-buffer element blocks. The first append relocates the
    sequence to fresh storage: elements are copied out as native objects and
    their buffer blocks are released right then, which keeps the message's
    block accounting exact. Further appends are plain list appends.
    """

    __slots__ = ("_msg", "_views", "_items")

    def __init__(self, views: list) -> None:
        self._msg = None
        self._views = views
        self._items = None

    @property
    def relocated(self) -> bool:
        return self._items is not None

    def _seq(self):
        if self._items is not None:
            return self._items
        if self._msg is not None:
            self._msg._check_usable()
        return self._views

    def __len__(self) -> int:
        return len(self._seq())

    def __getitem__(self, i):
        return self._seq()[i]

    def __iter__(self):
        return iter(self._seq())

    def append(self, obj) -> None:
        if self._items is None:
            msg = self._msg
            if msg is not None:
                msg._check_usable()
            stats = msg.stats if msg is not None else None
            # Copy everything out first; releasing as we went could reclaim
            # the buffer under the remaining elements.
            items = [materialize(v, stats) for v in self._views]
            if msg is not None:
                msg._release_spans([v.span for v in self._views])
            self._items = items
            self._views = ()
        self._items.append(obj)


class DecodedMessage:
    """A decoded buffer plus its block-release ledger.

    Every node block (the root and each nested node) must be released exactly
    once, through release() or by sequence relocation; when the count reaches
    zero the backing buffer is reclaimed (returned to its pool when pooled)
    and the message becomes unusable.
    """

    __slots__ = ("root", "buffer", "block_count", "stats", "_live", "_reclaimed")

    def __init__(self, root: NodeView, buffer, block_count: int,
                 live: set, stats: WireStats | None) -> None:
        self.root = root
        self.buffer = buffer
        self.block_count = block_count
        self.stats = stats
        self._live = live
        self._reclaimed = False

    @property
    def live_count(self) -> int:
        return len(self._live)

    @property
    def reclaimed(self) -> bool:
        return self._reclaimed

    def _check_usable(self) -> None:
        if self._reclaimed:
            raise WireError("message buffer already reclaimed")

    def release(self, handle: NodeView) -> None:
        """Release one node block; the last release reclaims the buffer."""
        if not isinstance(handle, NodeView) or handle._msg is not self:
            raise ForeignHandle("handle does not belong to this message")
        off = handle.span[0]
        if off not in self._live:
            raise DoubleRelease(
                f"block at offset {off} already released"
                " (directly or by sequence relocation)"
            )
        self._live.discard(off)
        if not self._live:
            self._reclaim()

    def release_all(self) -> None:
        """Release every still-live block in one call."""
        self._check_usable()
        self._live.clear()
        self._reclaim()

    def _release_spans(self, spans: list[tuple[int, int]]) -> None:
        # Relocation releases each block together with its nested blocks,
        # whose offsets all fall inside the parent block's span.
        doomed = [
            o for o in self._live if any(start <= o < end for start, end in spans)
        ]
        self._live.difference_update(doomed)
        if not self._live and not self._reclaimed:
            self._reclaim()

    def _reclaim(self) -> None:
        if self._reclaimed:  # pragma: no cover - guarded by the live set
            raise DoubleRelease("message already reclaimed")
        self._reclaimed = True
        if isinstance(self.buffer, PoolBuffer) and self.buffer.live:
            self.buffer._pool.release(self.buffer)


def decode(
    buf,
    registry: WireRegistry | None = None,
    stats: WireStats | None = None,
) -> DecodedMessage:
    """Build views over an encoded message in one linear walk.

    Only structure is read during the walk: class ids, sequence counts, and
    presence flags. Field payloads are untouched (payload_copies stays 0).
    """
    registry = registry or DEFAULT_REGISTRY
    data = buf.data if isinstance(buf, PoolBuffer) else buf
    if len(data) < HEADER.size:
        raise CorruptFrame(f"message shorter than header: {len(data)} bytes")
    magic, root_id, payload_len = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptFrame(f"bad magic {magic!r}")
    if HEADER.size + payload_len != len(data):
        raise CorruptFrame(
            f"length mismatch: header says {payload_len}, buffer holds {len(data) - HEADER.size}"
        )
    views: list[NodeView] = []
    seqs: list[SeqView] = []

    def scan(class_id: int, off: int):
        # Generator-based so deep trees walk an explicit stack, not the C stack.
        schema = registry.by_id(class_id)
        start = off
        slots: list = []
        for f in schema.fields:
            kind = f.kind
            if kind in _SCALAR_FMT:
                size = _SCALAR_FMT[kind].size
                _need(data, off, size)
                slots.append(off)
                off += size
            elif kind == "vec3":
                _need(data, off, 24)
                slots.append(off)
                off += 24
            elif kind == "bytes":
                _need(data, off, 8)
                n = _U64.unpack_from(data, off)[0]
                off += 8
                _need(data, off, n)
                slots.append((off, n))
                off += n
            elif kind == "ref":
                _need(data, off, 8)
                flag = _U64.unpack_from(data, off)[0]
                off += 8
                if flag == 0:
                    slots.append(None)
                elif flag == 1:
                    cid = f.cls.wire_schema.class_id if not f.poly else None
                    if f.poly:
                        _need(data, off, 4)
                        cid = _U32.unpack_from(data, off)[0]
                        off += 4
                    child, off = yield (cid, off)
                    slots.append(child)
                else:
                    raise CorruptFrame(f"reference flag {flag} is not 0 or 1")
            else:  # seq
                _need(data, off, 8)
                n = _U64.unpack_from(data, off)[0]
                off += 8
                elems = []
                for _ in range(n):
                    cid = f.cls.wire_schema.class_id if not f.poly else None
                    if f.poly:
                        _need(data, off, 4)
                        cid = _U32.unpack_from(data, off)[0]
                        off += 4
                    child, off = yield (cid, off)
                    elems.append(child)
                sv = SeqView(elems)
                seqs.append(sv)
                slots.append(sv)
        view = NodeView(data, schema, slots, (start, off))
        views.append(view)
        return (view, off)

    stack = [scan(root_id, HEADER.size)]
    result = None
    while stack:
        try:
            cid, off = stack[-1].send(result)
            result = None
        except StopIteration as done:
            result = done.value
            stack.pop()
            continue
        stack.append(scan(cid, off))
    root, end = result
    if end != len(data):
        raise CorruptFrame(f"{len(data) - end} trailing bytes after root block")
    msg = DecodedMessage(
        root,
        buf,
        len(views),
        {v.span[0] for v in views},
        stats,
    )
    for v in views:
        object.__setattr__(v, "_msg", msg)
    for sv in seqs:
        sv._msg = msg
    if stats is not None:
        with stats.lock:
            stats.decoded_messages += 1
            stats.decoded_blocks += len(views)
    return msg


def _need(data, off: int, n: int) -> None:
    if off + n > len(data):
        raise CorruptFrame(f"truncated block: need {n} bytes at {off}, have {len(data) - off}")


def materialize(view, stats: WireStats | None = None):
    """Copy a view tree out of its buffer into native objects.

    This is the one deliberate copy in a message's life; after it the buffer
    block can be released. Elements already relocated out of the buffer pass
    through as they are.
    """
    if not isinstance(view, NodeView):
        return view
    schema = view._schema
    cls = schema.cls
    maker = getattr(cls, "_wire_new", None)
    obj = maker() if maker is not None else cls.__new__(cls)
    for f in schema.fields:
        value = getattr(view, f.name)
        if f.kind == "ref":
            value = materialize(value, None) if value is not None else None
        elif f.kind == "seq":
            value = [materialize(v, None) for v in value]
        elif f.kind == "bytes":
            value = bytes(value)
        setattr(obj, f.name, value)
    if stats is not None:
        with stats.lock:
            stats.materializations += 1
    return obj


def node_equal(a, b) -> bool:
    """Field-by-field equality across native objects and views, mixed freely."""
    sa, sb = schema_of(a), schema_of(b)
    if sa.class_id != sb.class_id:
        return False
    for f in sa.fields:
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if f.kind == "ref":
            if (va is None) != (vb is None):
                return False
            if va is not None and not node_equal(va, vb):
                return False
        elif f.kind == "seq":
            if len(va) != len(vb):
                return False
            if any(not node_equal(x, y) for x, y in zip(va, vb)):
                return False
        elif f.kind == "bytes":
            if bytes(va) != bytes(vb):
                return False
        elif f.kind == "vec3":
            if tuple(va) != tuple(vb):
                return False
        elif va != vb:
            return False
    return True


# ---------------------------------------------------------------------------
# The one message class the engine ships around
# ---------------------------------------------------------------------------


@wire_class(1, ("agents", "seq", None))
class AgentBatch:
    """A flat batch of polymorphic agents; the payload of aura and migration
    messages and the unit delta encoding works on."""

    __slots__ = ("agents",)

    def __init__(self, agents=()) -> None:
        self.agents = list(agents)

    @classmethod
    def _wire_new(cls) -> "AgentBatch":
        return cls()
