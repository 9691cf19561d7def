"""Agent identity, simulation parameters, and the partition-invariant RNG.

Identifiers come in two flavors: a rank-local slot id (index + reuse counter,
backing a vector-based map with lock-free semantics) and a global id that is
constant for the lifetime of an agent and unique across the whole run. All
randomness is drawn from a counter-based generator keyed on the global id, so
results cannot depend on how the space is partitioned.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

if sys.byteorder != "little":
    raise RuntimeError("aurasim requires a little-endian host")

_U64 = (1 << 64) - 1

# Packed global id layout: origin in the high bits, counter in the low 40.
GID_COUNTER_BITS = 40
GID_ORIGIN_MAX = (1 << 23) - 1
GID_COUNTER_MAX = (1 << GID_COUNTER_BITS) - 1
NULL_GID = _U64  # sentinel for absent agent references on the wire


class ConfigError(ValueError):
    """Invalid simulation parameters."""


class GlobalAgentId(NamedTuple):
    """Immutable global identity: (origin, counter), ordered lexicographically."""

    origin: int
    counter: int

    def packed(self) -> int:
        return pack_gid(self.origin, self.counter)


def pack_gid(origin: int, counter: int) -> int:
    if not (0 <= origin <= GID_ORIGIN_MAX):
        raise ValueError(f"gid origin {origin} out of range")
    if not (0 <= counter <= GID_COUNTER_MAX):
        raise ValueError(f"gid counter {counter} out of range")
    return (origin << GID_COUNTER_BITS) | counter


def unpack_gid(packed: int) -> GlobalAgentId:
    return GlobalAgentId(packed >> GID_COUNTER_BITS, packed & GID_COUNTER_MAX)


class LocalAgentId(NamedTuple):
    """Rank-local slot id. The index addresses a vector slot; the reuse
    counter disambiguates successive occupants of the same slot."""

    index: int
    reuse: int


class LocalIdAllocator:
    """Vector-backed slot allocator with index reuse.

    Freed indices go on a stack and are handed out again with an incremented
    reuse counter, so no two live ids are ever equal.
    """

    def __init__(self) -> None:
        self._reuse: list[int] = []
        self._live: list[bool] = []
        self._free: list[int] = []

    def __len__(self) -> int:
        return len(self._live) - len(self._free)

    @property
    def capacity(self) -> int:
        return len(self._live)

    def allocate(self) -> LocalAgentId:
        if self._free:
            idx = self._free.pop()
            self._reuse[idx] += 1
            self._live[idx] = True
            return LocalAgentId(idx, self._reuse[idx])
        idx = len(self._live)
        self._reuse.append(0)
        self._live.append(True)
        return LocalAgentId(idx, 0)

    def free(self, lid: LocalAgentId) -> None:
        if lid.index >= len(self._live) or not self._live[lid.index]:
            raise KeyError(f"free of non-live local id {lid}")
        if self._reuse[lid.index] != lid.reuse:
            raise KeyError(f"stale local id {lid}: current reuse {self._reuse[lid.index]}")
        self._live[lid.index] = False
        self._free.append(lid.index)

    def is_live(self, lid: LocalAgentId) -> bool:
        return (
            lid.index < len(self._live)
            and self._live[lid.index]
            and self._reuse[lid.index] == lid.reuse
        )


@dataclass
class GlobalIdCounter:
    """Per-rank monotone counter for on-demand global id assignment.

    Never reset, even across load balancing: uniqueness needs no coordination.
    """

    rank: int
    next_counter: int = 0

    def take(self) -> int:
        value = self.next_counter
        self.next_counter += 1
        return value


def ensure_global_id(agent, rank: int, counter: GlobalIdCounter) -> GlobalAgentId:
    """Assign a global id on demand; a no-op for agents that already have one."""
    if agent.gid is not None:
        return unpack_gid(agent.gid)
    gid = GlobalAgentId(rank, counter.take())
    agent.gid = gid.packed()
    return gid


# Origins at or above this value are reserved for agents created during
# initialization; origins below it are rank numbers for runtime assignment.
INIT_ORIGIN_BASE = 1 << 22


def division_gids(parent_gid: int, id_source: GlobalIdCounter) -> tuple[int, int]:
    """Global ids for the two children of a dividing agent.

    Initialization-lineage parents use heap numbering under their own origin,
    counter s -> (2s+1, 2s+2), which no rank can collide with and which does
    not depend on which rank executes the division. Lineages that have
    exhausted the counter field fall back to the per-rank counter.
    """
    origin, counter = unpack_gid(parent_gid)
    if origin >= INIT_ORIGIN_BASE and 2 * counter + 2 <= GID_COUNTER_MAX:
        return pack_gid(origin, 2 * counter + 1), pack_gid(origin, 2 * counter + 2)
    first = pack_gid(id_source.rank, id_source.take())
    second = pack_gid(id_source.rank, id_source.take())
    return first, second


# ---------------------------------------------------------------------------
# Counter-based RNG
# ---------------------------------------------------------------------------
#
# A pure function of (seed, gid, iteration, tag, subkey) built from the
# splitmix64 finalizer. No per-rank state is read anywhere, which is what
# makes N-rank runs bit-identical to 1-rank runs. The Cython kernels carry
# a line-for-line copy of this chain; keep the two in sync.


class StreamTag(IntEnum):
    INIT_POS = 1
    INIT_KIND = 2
    SEPARATE = 3
    INFECT = 4
    RECOVER = 5
    WALK = 6
    DIVIDE = 7


def _mix64(z: int) -> int:
    z &= _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


def rng_u64(seed: int, gid: int, iteration: int, tag: int, subkey: int = 0) -> int:
    z = (seed + 0x9E3779B97F4A7C15) & _U64
    z = _mix64(z ^ ((gid + 0xBF58476D1CE4E5B9) & _U64))
    z = _mix64(z ^ ((iteration + 0x94D049BB133111EB) & _U64))
    z = _mix64(z ^ ((tag + 0x2545F4914F6CDD1D) & _U64))
    return _mix64(z ^ (subkey & _U64))


def rng_uniform(seed: int, gid: int, iteration: int, tag: int, subkey: int = 0) -> float:
    """Uniform double in [0, 1) with 53 random bits."""
    return (rng_u64(seed, gid, iteration, tag, subkey) >> 11) * 2.0**-53


def pair_key(gid_a: int, gid_b: int) -> int:
    """Order-independent key for draws involving two agents."""
    lo, hi = (gid_a, gid_b) if gid_a <= gid_b else (gid_b, gid_a)
    return _mix64(lo ^ _mix64(hi))


def rng_unit_vector(seed: int, gid: int, iteration: int, tag: int) -> tuple[float, float, float]:
    """Uniform direction on the sphere via deterministic rejection sampling.

    Rejection keeps the whole computation inside IEEE +,-,*,/ and sqrt, so
    the compiled kernels reproduce it bit for bit.
    """
    k = 0
    while True:
        x = 2.0 * rng_uniform(seed, gid, iteration, tag, 3 * k) - 1.0
        y = 2.0 * rng_uniform(seed, gid, iteration, tag, 3 * k + 1) - 1.0
        z = 2.0 * rng_uniform(seed, gid, iteration, tag, 3 * k + 2) - 1.0
        n2 = x * x + y * y + z * z
        if 1e-12 <= n2 <= 1.0:
            break
        k += 1
    n = math.sqrt(n2)
    return (x / n, y / n, z / n)


def reflect_closed(x: float, lo: float, hi: float) -> float:
    """Fold a coordinate back into [lo, hi) for the closed boundary condition."""
    if lo <= x < hi:
        return x
    width = hi - lo
    period = 2.0 * width
    y = math.fmod(x - lo, period)
    if y < 0.0:
        y += period
    if y >= width:
        y = period - y
    x = lo + y
    if x >= hi:
        x = math.nextafter(hi, lo)
    if x < lo:
        x = lo
    return x


# ---------------------------------------------------------------------------
# Simulation parameters
# ---------------------------------------------------------------------------

BOUNDARY_CONDITIONS = ("open", "closed", "toroidal")


@dataclass
class SimParams:
    """Engine-level configuration, loadable from JSON (see docs/config-schema.md)."""

    space_lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    space_hi: tuple[float, float, float] = (100.0, 100.0, 100.0)
    interaction_radius: float = 5.0
    box_factor: int = 2
    reference_interval: int = 10
    lb_interval: int = 20
    batch_bytes: int = 65536
    seed: int = 1
    rank_count: int = 1
    boundary_condition: str = "closed"

    def __post_init__(self) -> None:
        self.space_lo = tuple(float(v) for v in self.space_lo)
        self.space_hi = tuple(float(v) for v in self.space_hi)
        self.validate()

    def validate(self) -> None:
        if self.boundary_condition not in BOUNDARY_CONDITIONS:
            raise ConfigError(
                f"boundary_condition: {self.boundary_condition!r} is not one of {BOUNDARY_CONDITIONS}"
            )
        if self.boundary_condition != "closed":
            raise ConfigError(
                f"boundary_condition: {self.boundary_condition!r} is recognized but not implemented; use 'closed'"
            )
        if self.interaction_radius <= 0:
            raise ConfigError("interaction_radius: must be > 0")
        if self.box_factor < 1:
            raise ConfigError("box_factor: must be >= 1")
        if self.reference_interval < 1:
            raise ConfigError("reference_interval: must be >= 1")
        if self.lb_interval < 1:
            raise ConfigError("lb_interval: must be >= 1")
        if self.batch_bytes < 1:
            raise ConfigError("batch_bytes: must be >= 1")
        if self.rank_count < 1:
            raise ConfigError("rank_count: must be >= 1")
        for axis in range(3):
            extent = self.space_hi[axis] - self.space_lo[axis]
            if extent < self.interaction_radius:
                raise ConfigError(
                    f"space_bounds: axis {axis} extent {extent} smaller than interaction_radius"
                )
        self.seed = int(self.seed) & _U64

    @property
    def cell_edge(self) -> float:
        """Neighbor-search-grid cell edge; fixed to the interaction radius."""
        return self.interaction_radius

    @property
    def box_edge(self) -> float:
        return self.box_factor * self.cell_edge

    @classmethod
    def from_dict(cls, data: dict) -> "SimParams":
        known = {f for f in cls.__dataclass_fields__}  # noqa: C416
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown SimParams fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PopulationSpec:
    """Where and how many agents to create at initialization."""

    count: int
    target_lo: tuple[float, float, float]
    target_hi: tuple[float, float, float]
    kind_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ConfigError("population count: must be >= 0")
        self.target_lo = tuple(float(v) for v in self.target_lo)
        self.target_hi = tuple(float(v) for v in self.target_hi)
