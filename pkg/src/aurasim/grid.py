"""Uniform neighbor-search grid with incremental updates.

Cells have edge length equal to the interaction radius, so a fixed-radius
neighbor query only ever scans the 3x3x3 block around the query point.
Entries are keyed by global agent id, which makes the structure immune to
reorderings of the agent store: moving an agent between iterations is an
O(1) bucket update, and the rebuild counter stays at zero for a whole run.
"""

from __future__ import annotations

import math
from typing import Iterator, NamedTuple

Vec3 = tuple[float, float, float]


class GridHit(NamedTuple):
    gid: int
    pos: Vec3
    aura: bool


class NeighborGrid:
    def __init__(self, space_lo: Vec3, space_hi: Vec3, cell_edge: float) -> None:
        if cell_edge <= 0.0:
            raise ValueError("cell_edge must be > 0")
        self.lo = tuple(float(v) for v in space_lo)
        self.hi = tuple(float(v) for v in space_hi)
        self.cell_edge = float(cell_edge)
        self.dims = tuple(
            max(1, math.ceil((self.hi[a] - self.lo[a]) / self.cell_edge)) for a in range(3)
        )
        # cell linear index -> set of gids; gid -> (cell, x, y, z, aura)
        self._cells: dict[int, set[int]] = {}
        self._where: dict[int, tuple[int, float, float, float, bool]] = {}
        self.rebuild_count = 0

    # -- indexing ---------------------------------------------------------

    def cell_of(self, pos: Vec3) -> tuple[int, int, int]:
        out = []
        for a in range(3):
            c = int((pos[a] - self.lo[a]) / self.cell_edge)
            # Positions sit in the half-open box, but a coordinate exactly at
            # the top of the last cell maps one past it; clamp that edge case.
            if c < 0:
                c = 0
            elif c >= self.dims[a]:
                c = self.dims[a] - 1
            out.append(c)
        return tuple(out)

    def _linear(self, cx: int, cy: int, cz: int) -> int:
        return (cz * self.dims[1] + cy) * self.dims[0] + cx

    def _check(self, gid: int, pos: Vec3) -> None:
        for a in range(3):
            x = pos[a]
            if not (self.lo[a] <= x < self.hi[a]):
                raise ValueError(f"agent {gid}: coordinate {x} outside [{self.lo[a]}, {self.hi[a]}) on axis {a}")

    # -- updates ----------------------------------------------------------

    def insert(self, gid: int, pos: Vec3, aura: bool = False) -> None:
        if gid in self._where:
            raise KeyError(f"gid {gid} already present")
        self._check(gid, pos)
        ci = self._linear(*self.cell_of(pos))
        self._cells.setdefault(ci, set()).add(gid)
        self._where[gid] = (ci, pos[0], pos[1], pos[2], aura)

    def remove(self, gid: int) -> Vec3:
        ci, x, y, z, _aura = self._where.pop(gid)
        bucket = self._cells[ci]
        bucket.discard(gid)
        if not bucket:
            del self._cells[ci]
        return (x, y, z)

    def move(self, gid: int, pos: Vec3) -> None:
        """Update one agent's position; rehashes only on a cell change."""
        ci, _x, _y, _z, aura = self._where[gid]
        self._check(gid, pos)
        ni = self._linear(*self.cell_of(pos))
        if ni != ci:
            bucket = self._cells[ci]
            bucket.discard(gid)
            if not bucket:
                del self._cells[ci]
            self._cells.setdefault(ni, set()).add(gid)
        self._where[gid] = (ni, pos[0], pos[1], pos[2], aura)

    def clear_aura(self) -> int:
        doomed = [gid for gid, rec in self._where.items() if rec[4]]
        for gid in doomed:
            self.remove(gid)
        return len(doomed)

    def rebuild(self, entries: Iterator[tuple[int, Vec3, bool]]) -> None:
        """Full reconstruction. Only for recovery paths; counted so tests can
        assert that steady-state operation never falls back to it."""
        self._cells.clear()
        self._where.clear()
        self.rebuild_count += 1
        for gid, pos, aura in entries:
            self.insert(gid, pos, aura)

    # -- queries ----------------------------------------------------------

    def __len__(self) -> int:
        return len(self._where)

    def __contains__(self, gid: int) -> bool:
        return gid in self._where

    def position_of(self, gid: int) -> Vec3:
        _ci, x, y, z, _aura = self._where[gid]
        return (x, y, z)

    def is_aura(self, gid: int) -> bool:
        return self._where[gid][4]

    def items(self, include_aura: bool = True) -> Iterator[GridHit]:
        for gid, (_ci, x, y, z, aura) in self._where.items():
            if aura and not include_aura:
                continue
            yield GridHit(gid, (x, y, z), aura)

    def neighbors_sorted(
        self,
        pos: Vec3,
        radius: float,
        exclude_gid: int | None = None,
        include_aura: bool = True,
    ) -> list[GridHit]:
        """All entries within `radius` (inclusive) of `pos`, ascending by gid.

        The fixed gid order is what makes force accumulation independent of
        storage order and rank count.
        """
        if radius > self.cell_edge:
            raise ValueError(f"radius {radius} exceeds cell edge {self.cell_edge}")
        r2 = radius * radius
        cx, cy, cz = self.cell_of(pos)
        px, py, pz = pos
        hits: list[GridHit] = []
        for dz in (-1, 0, 1):
            z = cz + dz
            if z < 0 or z >= self.dims[2]:
                continue
            for dy in (-1, 0, 1):
                y = cy + dy
                if y < 0 or y >= self.dims[1]:
                    continue
                for dx in (-1, 0, 1):
                    x = cx + dx
                    if x < 0 or x >= self.dims[0]:
                        continue
                    bucket = self._cells.get(self._linear(x, y, z))
                    if not bucket:
                        continue
                    for gid in bucket:
                        if gid == exclude_gid:
                            continue
                        _ci, ax, ay, az, aura = self._where[gid]
                        if aura and not include_aura:
                            continue
                        ddx = ax - px
                        ddy = ay - py
                        ddz = az - pz
                        if ddx * ddx + ddy * ddy + ddz * ddz <= r2:
                            hits.append(GridHit(gid, (ax, ay, az), aura))
        hits.sort(key=lambda h: h.gid)
        return hits

    def query_region(
        self, lo: Vec3, hi: Vec3, include_aura: bool = False
    ) -> list[GridHit]:
        """Entries with position in the half-open box [lo, hi), ascending by gid."""
        c0 = [max(0, int(math.floor((lo[a] - self.lo[a]) / self.cell_edge))) for a in range(3)]
        c1 = [
            min(self.dims[a] - 1, int(math.floor((hi[a] - self.lo[a]) / self.cell_edge)))
            for a in range(3)
        ]
        hits: list[GridHit] = []
        for z in range(c0[2], c1[2] + 1):
            for y in range(c0[1], c1[1] + 1):
                for x in range(c0[0], c1[0] + 1):
                    bucket = self._cells.get(self._linear(x, y, z))
                    if not bucket:
                        continue
                    for gid in bucket:
                        _ci, ax, ay, az, aura = self._where[gid]
                        if aura and not include_aura:
                            continue
                        if (
                            lo[0] <= ax < hi[0]
                            and lo[1] <= ay < hi[1]
                            and lo[2] <= az < hi[2]
                        ):
                            hits.append(GridHit(gid, (ax, ay, az), aura))
        hits.sort(key=lambda h: h.gid)
        return hits


# ---------------------------------------------------------------------------
# Space-filling order for the agent store
# ---------------------------------------------------------------------------


def _spread3(v: int) -> int:
    # Spread the low 21 bits of v so there are two zero bits between each.
    v &= (1 << 21) - 1
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


def morton3(cx: int, cy: int, cz: int) -> int:
    """Interleave three 21-bit cell coordinates into one z-order key."""
    return _spread3(cx) | (_spread3(cy) << 1) | (_spread3(cz) << 2)
