"""Wire format tests: byte-level layout, roundtrips, mutation, block
accounting, corruption."""

import random
import struct

import pytest

from aurasim.wire import (
    AgentBatch,
    BufferPool,
    CorruptFrame,
    DoubleRelease,
    ForeignHandle,
    NodeView,
    SchemaError,
    WireError,
    WireStats,
    decode,
    encode,
    encode_bytes,
    materialize,
    node_equal,
    wire_class,
)
from wirefuzz import (
    FzAgent,
    FzBehavior,
    FzScalars,
    count_blocks,
    gen_agent,
    gen_scalars,
    gen_tree,
)


@wire_class(1050, ("gid", "u64"), ("pos", "vec3"))
class Point:
    __slots__ = ("gid", "pos")

    def __init__(self, gid=0, pos=(0.0, 0.0, 0.0)):
        self.gid = gid
        self.pos = pos


def make_behavior(rate, steps):
    b = FzBehavior.__new__(FzBehavior)
    b.rate = rate
    b.steps = steps
    return b


def agent_with_behaviors(n):
    agent = gen_agent(random.Random(2))
    agent.behaviors = [make_behavior(1.5 * (i + 1), 9 + i) for i in range(n)]
    return agent


def walk_views(view):
    """Every NodeView block reachable from `view`, pre-order."""
    out = [view]
    for f in view._schema.fields:
        if f.kind == "ref":
            child = getattr(view, f.name)
            if child is not None:
                out.extend(walk_views(child))
        elif f.kind == "seq":
            for elem in getattr(view, f.name):
                if isinstance(elem, NodeView):
                    out.extend(walk_views(elem))
    return out


# ---------------------------------------------------------------------------
# Byte-level layout (the on-wire contract, spelled out)
# ---------------------------------------------------------------------------


def test_header_and_scalar_block_bytes():
    raw = encode_bytes(Point(gid=7, pos=(1.0, 2.0, 3.0)))
    expect = (
        b"AGT0"
        + struct.pack("<I", 1050)              # root class id
        + struct.pack("<Q", 8 + 24)            # payload length
        + struct.pack("<Q", 7)                 # gid
        + struct.pack("<3d", 1.0, 2.0, 3.0)    # pos
    )
    assert raw == expect


def test_sequence_layout_count_then_poly_prefixed_elements():
    batch = AgentBatch([Point(gid=1, pos=(0.0, 0.0, 0.0)), Point(gid=2, pos=(0.0, 0.0, 0.0))])
    raw = encode_bytes(batch)
    body = raw[16:]
    assert body[:8] == struct.pack("<Q", 2)
    # Each element: u32 class id prefix, then the 32-byte Point block.
    assert body[8:12] == struct.pack("<I", 1050)
    assert body[12:20] == struct.pack("<Q", 1)
    assert body[44:48] == struct.pack("<I", 1050)
    assert body[48:56] == struct.pack("<Q", 2)
    assert len(body) == 8 + 2 * (4 + 32)


def test_reference_flag_bytes_absent_and_present():
    rng = random.Random(1)
    node = gen_scalars(rng)
    from wirefuzz import FzTyped

    obj = FzTyped.__new__(FzTyped)
    obj.x = 0.5
    obj.one = None
    obj.many = []
    obj.tag = b"hi"
    raw = encode_bytes(obj)
    body = raw[16:]
    # f64 x | u64 ref flag 0 | u64 seq count 0 | u64 tag len | "hi"
    assert body[8:16] == struct.pack("<Q", 0)
    assert body[16:24] == struct.pack("<Q", 0)
    assert body[24:32] == struct.pack("<Q", 2)
    assert body[32:34] == b"hi"

    obj.one = node
    raw2 = encode_bytes(obj)
    assert raw2[16 + 8 : 16 + 16] == struct.pack("<Q", 1)  # present flag, no class prefix (typed)


def test_agent_with_two_behaviors_counts_three_blocks():
    stats = WireStats()
    msg = decode(encode_bytes(agent_with_behaviors(2)), stats=stats)
    assert msg.block_count == 3
    assert msg.live_count == 3
    assert stats.decoded_blocks == 3
    assert stats.decoded_messages == 1
    assert len(msg.root.behaviors) == 2


# ---------------------------------------------------------------------------
# Roundtrips
# ---------------------------------------------------------------------------


def test_fuzz_roundtrip_views_equal_input_and_reencode_canonically():
    rng = random.Random(0x31BE)
    stats = WireStats()
    pool = BufferPool(stats)
    for trial in range(300):
        obj = gen_tree(rng, depth=4)
        buf = encode(obj, pool)
        msg = decode(buf, stats=stats)
        assert node_equal(obj, msg.root), f"trial {trial}"
        # Views re-encode to the exact same bytes (canonical layout).
        assert encode_bytes(msg.root) == bytes(buf.data)
        msg.release_all()
        assert msg.reclaimed
    assert stats.payload_copies == 0
    assert stats.live == 0
    assert stats.releases == stats.acquisitions == 300


def test_fuzz_block_counter_matches_independent_count():
    rng = random.Random(0xB10C)
    for _ in range(100):
        obj = gen_tree(rng, depth=4)
        stats = WireStats()
        msg = decode(encode_bytes(obj), stats=stats)
        assert stats.decoded_blocks == count_blocks(obj)
        assert msg.block_count == count_blocks(obj)


def test_roundtrip_preserves_float_bit_patterns():
    pt = Point(gid=1, pos=(-0.0, 5e-324, 1.7976931348623157e308))
    view = decode(encode_bytes(pt)).root
    got = view.pos
    for a, b in zip(got, pt.pos):
        assert struct.pack("<d", a) == struct.pack("<d", b)


def test_materialize_copies_out_and_survives_buffer_release():
    rng = random.Random(3)
    stats = WireStats()
    pool = BufferPool(stats)
    obj = gen_agent(rng)
    buf = encode(obj, pool)
    msg = decode(buf, stats=stats)
    view = msg.root
    native = materialize(view, stats=stats)
    msg.release_all()
    assert isinstance(native, FzAgent)
    assert node_equal(obj, native)
    assert stats.materializations == 1
    assert stats.live == 0
    native.diameter = 42.0
    with pytest.raises(WireError, match="reclaimed"):
        _ = view.diameter


def test_view_attribute_errors_name_the_field():
    view = decode(encode_bytes(Point(gid=1))).root
    with pytest.raises(AttributeError, match="no field 'speed'"):
        _ = view.speed
    with pytest.raises(AttributeError, match="no field 'speed'"):
        view.speed = 3
    assert view.wire_id == 1050
    assert view.wire_cls is Point


def test_bytes_field_access_is_a_buffer_view_not_a_copy():
    from wirefuzz import FzBlob

    obj = FzBlob.__new__(FzBlob)
    obj.v = (1.0, 2.0, 3.0)
    obj.blob = b"payload-bytes"
    raw = bytearray(encode_bytes(obj))
    view = decode(raw).root
    mv = view.blob
    assert isinstance(mv, memoryview)
    assert bytes(mv) == b"payload-bytes"
    # Aliasing proves zero-copy: patch the buffer, the view sees it.
    idx = raw.index(b"payload")
    raw[idx] = ord(b"P")
    assert bytes(view.blob) == b"Payload-bytes"


# ---------------------------------------------------------------------------
# Mutation through views
# ---------------------------------------------------------------------------


def test_scalar_and_vec3_mutation_reencodes_mutated_values():
    pool = BufferPool()
    buf = encode(Point(gid=7, pos=(1.0, 2.0, 3.0)), pool)
    msg = decode(buf)
    view = msg.root
    view.gid = 55
    view.pos = (9.0, 8.0, 7.5)
    assert view.gid == 55
    assert view.pos == (9.0, 8.0, 7.5)
    assert encode_bytes(view) == encode_bytes(Point(gid=55, pos=(9.0, 8.0, 7.5)))
    native = materialize(view)
    assert native.gid == 55
    msg.release_all()


def test_mutation_on_readonly_buffer_raises():
    view = decode(encode_bytes(Point(gid=1))).root
    with pytest.raises(WireError, match="read-only"):
        view.gid = 2


def test_structure_fields_cannot_be_rebound():
    pool = BufferPool()
    buf = encode(agent_with_behaviors(1), pool)
    msg = decode(buf)
    with pytest.raises(WireError, match="cannot rebind seq"):
        msg.root.behaviors = []
    msg.release_all()


def test_mutation_range_errors_name_class_and_field():
    pool = BufferPool()
    buf = encode(Point(gid=1), pool)
    msg = decode(buf)
    with pytest.raises(SchemaError, match="Point.gid"):
        msg.root.gid = -1
    msg.release_all()


def test_sequence_growth_relocates_elements_and_releases_their_blocks():
    stats = WireStats()
    pool = BufferPool(stats)
    buf = encode(agent_with_behaviors(2), pool)
    msg = decode(buf, stats=stats)
    agent = msg.root
    assert msg.live_count == 3
    seq = agent.behaviors
    assert not seq.relocated
    seq.append(make_behavior(0.5, 1))
    # Relocation released the two in-buffer behavior blocks.
    assert seq.relocated
    assert msg.live_count == 1
    assert len(seq) == 3
    assert isinstance(seq[0], FzBehavior) and isinstance(seq[1], FzBehavior)
    assert seq[2].steps == 1
    # The grown sequence re-encodes with all three elements.
    grown = decode(encode_bytes(agent)).root
    assert len(grown.behaviors) == 3
    assert node_equal(grown.behaviors[2], seq[2])
    # Releasing the grown elements' old handles is a double release.
    msg.release(agent)
    assert msg.reclaimed
    assert stats.live == 0


def test_release_partial_keeps_buffer_then_last_release_reclaims():
    stats = WireStats()
    pool = BufferPool(stats)
    buf = encode(agent_with_behaviors(2), pool)
    msg = decode(buf, stats=stats)
    blocks = walk_views(msg.root)
    assert len(blocks) == 3
    msg.release(blocks[1])
    msg.release(blocks[0])
    assert not msg.reclaimed
    assert stats.live == 1
    assert buf.live
    msg.release(blocks[2])
    assert msg.reclaimed
    assert not buf.live
    assert stats.live == 0
    with pytest.raises(WireError, match="reclaimed"):
        _ = blocks[2].rate


def test_block_double_release_and_foreign_handle():
    pool = BufferPool()
    msg = decode(encode(agent_with_behaviors(1), pool))
    other = decode(encode(Point(gid=1), pool))
    blocks = walk_views(msg.root)
    msg.release(blocks[1])
    with pytest.raises(DoubleRelease):
        msg.release(blocks[1])
    with pytest.raises(ForeignHandle):
        msg.release(other.root)
    with pytest.raises(ForeignHandle):
        msg.release(object())
    msg.release(blocks[0])
    other.release_all()


def test_relocated_elements_old_handles_raise_double_release():
    pool = BufferPool()
    msg = decode(encode(agent_with_behaviors(2), pool))
    elems = list(msg.root.behaviors)
    msg.root.behaviors.append(make_behavior(2.0, 2))
    with pytest.raises(DoubleRelease):
        msg.release(elems[0])
    msg.release(msg.root)


def _mutable_fields(view):
    return [
        f for f in view._schema.fields
        if f.kind in ("u8", "u16", "u32", "u64", "i64", "f64", "gid", "vec3")
    ]


def _random_value(rng, kind):
    if kind == "u8":
        return rng.randrange(1 << 8)
    if kind == "u16":
        return rng.randrange(1 << 16)
    if kind == "u32":
        return rng.randrange(1 << 32)
    if kind in ("u64", "gid"):
        return rng.randrange(1 << 64)
    if kind == "i64":
        return rng.randrange(-(1 << 63), 1 << 63)
    if kind == "vec3":
        return (rng.random(), rng.random(), rng.random())
    return rng.uniform(-1e9, 1e9)


def test_randomized_mutate_release_interleavings_account_exactly():
    """Accounting oracle: under random mutation, sequence growth, and
    release order, live_count tracks an independent model and the buffer is
    reclaimed exactly once, with pool counters balanced."""
    rng = random.Random(0xACC7)
    for trial in range(150):
        stats = WireStats()
        pool = BufferPool(stats)
        obj = gen_tree(rng, depth=3) if trial % 3 else agent_with_behaviors(trial % 5)
        buf = encode(obj, pool)
        msg = decode(buf, stats=stats)
        views = walk_views(msg.root)
        seqs = [
            getattr(v, f.name)
            for v in views
            for f in v._schema.fields
            if f.kind == "seq"
        ]
        oracle = {v.span[0] for v in views}
        assert msg.live_count == len(oracle) == msg.block_count
        for _ in range(rng.randrange(0, 12)):
            if msg.reclaimed:
                break
            op = rng.random()
            if op < 0.4:
                v = rng.choice(views)
                fields = _mutable_fields(v)
                if fields and v.span[0] in oracle:
                    f = rng.choice(fields)
                    setattr(v, f.name, _random_value(rng, f.kind))
            elif op < 0.6 and seqs:
                sq = rng.choice(seqs)
                released_elems = [e for e in sq if isinstance(e, NodeView)]
                sq.append(gen_scalars(rng) if rng.random() < 0.5 else make_behavior(1.0, 1))
                for e in released_elems:
                    oracle -= {o for o in oracle if e.span[0] <= o < e.span[1]}
            else:
                v = rng.choice(views)
                if v.span[0] in oracle:
                    msg.release(v)
                    oracle.discard(v.span[0])
                else:
                    with pytest.raises(DoubleRelease):
                        msg.release(v)
            assert msg.live_count == len(oracle)
            assert msg.reclaimed == (not oracle)
        if not msg.reclaimed:
            for v in views:
                if v.span[0] in oracle:
                    msg.release(v)
                    oracle.discard(v.span[0])
        assert msg.reclaimed and not oracle
        assert stats.live == 0
        assert stats.releases == stats.acquisitions


# ---------------------------------------------------------------------------
# Buffer accounting
# ---------------------------------------------------------------------------


def test_single_acquisition_per_message_and_hwm():
    stats = WireStats()
    pool = BufferPool(stats)
    bufs = [encode(Point(gid=i), pool) for i in range(5)]
    assert stats.acquisitions == 5
    assert stats.live == 5
    assert stats.live_hwm == 5
    msgs = [decode(b, stats=stats) for b in bufs]  # decoding costs nothing
    assert stats.acquisitions == 5
    for m in msgs:
        m.release_all()
    assert stats.live == 0
    assert stats.releases == 5
    assert stats.live_hwm == 5
    # Reuse keeps the high-water mark flat.
    b = encode(Point(gid=9), pool)
    assert stats.live_hwm == 5
    pool.release(b)


def test_double_release_raises():
    pool = BufferPool()
    buf = encode(Point(gid=1), pool)
    pool.release(buf)
    with pytest.raises(DoubleRelease):
        pool.release(buf)


def test_foreign_handle_raises():
    pool_a, pool_b = BufferPool(), BufferPool()
    buf = encode(Point(gid=1), pool_a)
    with pytest.raises(ForeignHandle):
        pool_b.release(buf)
    with pytest.raises(ForeignHandle):
        pool_a.release(object())
    pool_a.release(buf)


# ---------------------------------------------------------------------------
# Corruption and schema errors
# ---------------------------------------------------------------------------


def _good_bytes():
    return bytearray(encode_bytes(Point(gid=3, pos=(1.0, 2.0, 3.0))))


def test_corrupt_magic_rejected():
    raw = _good_bytes()
    raw[0] = ord(b"X")
    with pytest.raises(CorruptFrame, match="magic"):
        decode(raw)


def test_corrupt_length_mismatch_rejected():
    raw = _good_bytes()
    struct.pack_into("<Q", raw, 8, 999)
    with pytest.raises(CorruptFrame, match="length mismatch"):
        decode(raw)


def test_truncated_block_rejected():
    raw = _good_bytes()[:-8]
    struct.pack_into("<Q", raw, 8, len(raw) - 16)
    with pytest.raises(CorruptFrame, match="truncated"):
        decode(raw)


def test_bad_reference_flag_rejected():
    from wirefuzz import FzTyped

    obj = FzTyped.__new__(FzTyped)
    obj.x = 1.0
    obj.one = None
    obj.many = []
    obj.tag = b""
    raw = bytearray(encode_bytes(obj))
    struct.pack_into("<Q", raw, 16 + 8, 7)
    with pytest.raises(CorruptFrame, match="reference flag"):
        decode(raw)


def test_unknown_class_id_rejected():
    raw = _good_bytes()
    struct.pack_into("<I", raw, 4, 0xDEAD)
    with pytest.raises(SchemaError, match="unknown class id"):
        decode(raw)


def test_short_header_rejected():
    with pytest.raises(CorruptFrame, match="shorter than header"):
        decode(b"AGT0")


def test_fuzz_truncations_never_crash_only_raise_wire_errors():
    rng = random.Random(0x7C)
    for _ in range(200):
        raw = encode_bytes(gen_tree(rng, depth=3))
        cut = rng.randrange(len(raw))
        mangled = bytearray(raw[:cut])
        if len(mangled) >= 16:
            struct.pack_into("<Q", mangled, 8, len(mangled) - 16)
        with pytest.raises((CorruptFrame, SchemaError)):
            decode(mangled)


def test_schema_rejects_wrong_typed_child():
    obj = AgentBatch([object()])
    with pytest.raises(SchemaError):
        encode_bytes(obj)

    from wirefuzz import FzBlob, FzTyped

    t = FzTyped.__new__(FzTyped)
    t.x = 1.0
    t.one = FzBlob.__new__(FzBlob)  # wrong class for a typed ref
    t.one.v = (0.0, 0.0, 0.0)
    t.one.blob = b""
    t.many = []
    t.tag = b""
    with pytest.raises(SchemaError, match="expected FzScalars"):
        encode_bytes(t)


def test_scalar_range_errors_name_class_and_field():
    obj = FzScalars.__new__(FzScalars)
    obj.a = 256  # too big for u8
    obj.b = obj.c = obj.d = 0
    obj.e = 0
    obj.f = 0.0
    with pytest.raises(SchemaError, match="FzScalars.a"):
        encode_bytes(obj)


def test_node_equal_detects_differences():
    a = Point(gid=1, pos=(1.0, 2.0, 3.0))
    b = Point(gid=1, pos=(1.0, 2.0, 3.5))
    assert node_equal(a, a)
    assert not node_equal(a, b)
    assert not node_equal(a, AgentBatch([]))
