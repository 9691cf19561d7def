"""Identity, RNG, and parameter tests."""

import math
import random

import pytest

from aurasim.core import (
    GID_COUNTER_MAX,
    GID_ORIGIN_MAX,
    ConfigError,
    GlobalAgentId,
    GlobalIdCounter,
    LocalAgentId,
    LocalIdAllocator,
    SimParams,
    StreamTag,
    ensure_global_id,
    pack_gid,
    pair_key,
    reflect_closed,
    rng_u64,
    rng_uniform,
    rng_unit_vector,
    unpack_gid,
)


class _Agent:
    def __init__(self, gid=None):
        self.gid = gid


# ---------------------------------------------------------------------------
# Local ids
# ---------------------------------------------------------------------------


def test_allocator_reuses_freed_index_with_bumped_counter():
    alloc = LocalIdAllocator()
    ids = [alloc.allocate() for _ in range(3)]
    assert ids == [LocalAgentId(0, 0), LocalAgentId(1, 0), LocalAgentId(2, 0)]
    alloc.free(ids[1])
    assert alloc.allocate() == LocalAgentId(1, 1)


def test_allocator_rejects_double_free_and_stale_ids():
    alloc = LocalIdAllocator()
    lid = alloc.allocate()
    alloc.free(lid)
    with pytest.raises(KeyError):
        alloc.free(lid)
    fresh = alloc.allocate()
    assert fresh.index == lid.index and fresh.reuse == lid.reuse + 1
    with pytest.raises(KeyError):
        alloc.free(lid)  # stale reuse counter
    assert not alloc.is_live(lid)
    assert alloc.is_live(fresh)


def test_allocator_fuzz_against_set_model():
    # Model: the set of live ids. Invariants: allocator never hands out an id
    # equal to any live one, and its length always matches the model's.
    rng = random.Random(0xA110C)
    alloc = LocalIdAllocator()
    live = set()
    ever_issued = set()
    for _ in range(5000):
        if live and rng.random() < 0.45:
            lid = rng.choice(sorted(live))
            alloc.free(lid)
            live.discard(lid)
        else:
            lid = alloc.allocate()
            assert lid not in live
            assert lid not in ever_issued, "id reissued without reuse bump"
            live.add(lid)
            ever_issued.add(lid)
        assert len(alloc) == len(live)
    for lid in live:
        assert alloc.is_live(lid)


# ---------------------------------------------------------------------------
# Global ids
# ---------------------------------------------------------------------------


def test_gid_pack_unpack_roundtrip():
    rng = random.Random(7)
    for _ in range(1000):
        origin = rng.randrange(GID_ORIGIN_MAX + 1)
        counter = rng.randrange(GID_COUNTER_MAX + 1)
        packed = pack_gid(origin, counter)
        assert unpack_gid(packed) == GlobalAgentId(origin, counter)
        assert 0 <= packed < 2**63


def test_gid_pack_order_matches_tuple_order():
    # Sorting by packed value must equal sorting by (origin, counter).
    rng = random.Random(8)
    tuples = [
        (rng.randrange(100), rng.randrange(1000))
        for _ in range(500)
    ]
    packed = [pack_gid(o, c) for o, c in tuples]
    assert sorted(packed) == [pack_gid(o, c) for o, c in sorted(tuples)]


def test_gid_pack_range_checks():
    with pytest.raises(ValueError):
        pack_gid(GID_ORIGIN_MAX + 1, 0)
    with pytest.raises(ValueError):
        pack_gid(0, GID_COUNTER_MAX + 1)
    with pytest.raises(ValueError):
        pack_gid(-1, 0)


def test_ensure_global_id_assigns_once():
    counter = GlobalIdCounter(rank=3)
    a, b = _Agent(), _Agent()
    assert ensure_global_id(a, 3, counter) == GlobalAgentId(3, 0)
    assert ensure_global_id(b, 3, counter) == GlobalAgentId(3, 1)
    # Second call is a no-op and burns no counter value.
    assert ensure_global_id(a, 3, counter) == GlobalAgentId(3, 0)
    assert counter.next_counter == 2


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def test_rng_is_a_pure_function_of_its_key():
    assert rng_u64(1, 2, 3, 4) == rng_u64(1, 2, 3, 4)
    assert rng_uniform(1, 2, 3, 4, 5) == rng_uniform(1, 2, 3, 4, 5)


def test_rng_distinct_keys_give_distinct_streams():
    base = rng_u64(42, 100, 7, StreamTag.WALK)
    assert rng_u64(43, 100, 7, StreamTag.WALK) != base
    assert rng_u64(42, 101, 7, StreamTag.WALK) != base
    assert rng_u64(42, 100, 8, StreamTag.WALK) != base
    assert rng_u64(42, 100, 7, StreamTag.INFECT) != base
    assert rng_u64(42, 100, 7, StreamTag.WALK, 1) != base


def test_rng_uniform_range_and_moments():
    n = 20000
    draws = [rng_uniform(123, gid, 5, StreamTag.WALK) for gid in range(n)]
    assert all(0.0 <= u < 1.0 for u in draws)
    mean = sum(draws) / n
    assert abs(mean - 0.5) < 0.01
    var = sum((u - mean) ** 2 for u in draws) / n
    assert abs(var - 1.0 / 12.0) < 0.005


def test_rng_uniform_decile_counts_are_flat():
    n = 50000
    counts = [0] * 10
    for i in range(n):
        counts[int(rng_uniform(9, i, 1, StreamTag.INIT_POS) * 10)] += 1
    for c in counts:
        assert abs(c - n / 10) < 4 * math.sqrt(n / 10)


def test_rng_low_correlation_between_consecutive_iterations():
    n = 10000
    a = [rng_uniform(5, gid, 1, StreamTag.WALK) for gid in range(n)]
    b = [rng_uniform(5, gid, 2, StreamTag.WALK) for gid in range(n)]
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    sa = math.sqrt(sum((x - ma) ** 2 for x in a) / n)
    sb = math.sqrt(sum((y - mb) ** 2 for y in b) / n)
    assert abs(cov / (sa * sb)) < 0.05


def test_pair_key_is_order_independent():
    assert pair_key(10, 99) == pair_key(99, 10)
    assert pair_key(10, 99) != pair_key(10, 98)


def test_unit_vector_has_unit_norm_and_uniform_octants():
    counts = {}
    for gid in range(4000):
        x, y, z = rng_unit_vector(77, gid, 3, StreamTag.SEPARATE)
        n = math.sqrt(x * x + y * y + z * z)
        assert abs(n - 1.0) < 1e-12
        octant = (x > 0, y > 0, z > 0)
        counts[octant] = counts.get(octant, 0) + 1
    for c in counts.values():
        assert abs(c - 500) < 4 * math.sqrt(500)


# ---------------------------------------------------------------------------
# Boundary reflection
# ---------------------------------------------------------------------------


def _reflect_brute(x, lo, hi, steps=10000):
    # Independent oracle: walk the excess back and forth one bounce at a time.
    for _ in range(steps):
        if x < lo:
            x = lo + (lo - x)
        elif x > hi:
            x = hi - (x - hi)
        else:
            break
    return x


def test_reflect_closed_matches_bounce_oracle():
    rng = random.Random(0xBED)
    lo, hi = 2.0, 12.0
    for _ in range(2000):
        x = rng.uniform(-50.0, 60.0)
        got = reflect_closed(x, lo, hi)
        want = _reflect_brute(x, lo, hi)
        assert lo <= got < hi
        assert got == pytest.approx(want, abs=1e-9) or got == math.nextafter(hi, lo)


def test_reflect_closed_identity_inside_and_half_open_at_top():
    assert reflect_closed(5.0, 0.0, 10.0) == 5.0
    assert reflect_closed(0.0, 0.0, 10.0) == 0.0
    assert reflect_closed(10.0, 0.0, 10.0) == math.nextafter(10.0, 0.0)
    assert reflect_closed(-1.0, 0.0, 10.0) == 1.0
    assert reflect_closed(11.0, 0.0, 10.0) == 9.0


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def test_simparams_defaults_are_valid():
    p = SimParams()
    assert p.cell_edge == p.interaction_radius
    assert p.box_edge == p.box_factor * p.cell_edge


def test_simparams_rejects_unimplemented_boundaries():
    for bc in ("open", "toroidal"):
        with pytest.raises(ConfigError, match="not implemented"):
            SimParams(boundary_condition=bc)
    with pytest.raises(ConfigError, match="not one of"):
        SimParams(boundary_condition="bouncy")


def test_simparams_validation_errors_name_the_field():
    cases = [
        (dict(interaction_radius=0.0), "interaction_radius"),
        (dict(box_factor=0), "box_factor"),
        (dict(reference_interval=0), "reference_interval"),
        (dict(lb_interval=0), "lb_interval"),
        (dict(batch_bytes=0), "batch_bytes"),
        (dict(rank_count=0), "rank_count"),
        (dict(space_hi=(1.0, 100.0, 100.0)), "space_bounds"),
    ]
    for kwargs, needle in cases:
        with pytest.raises(ConfigError, match=needle):
            SimParams(**kwargs)


def test_simparams_from_dict_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="unknown"):
        SimParams.from_dict({"speling_mistake": 1})
    p = SimParams.from_dict({"seed": 99, "rank_count": 4})
    assert p.seed == 99 and p.rank_count == 4
