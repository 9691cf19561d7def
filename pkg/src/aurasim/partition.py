"""Spatial partitioning of the simulation volume across ranks.

Space is tiled into partition boxes (an integer multiple of the neighbor-grid
cell edge, set by box_factor). Each box has exactly one owner rank; the
box-to-owner map is what load balancing edits at runtime. Recursive coordinate
bisection produces the initial decomposition, and again the runtime one when
full repartitioning is requested.

A rank resolves migration targets through a cache that covers its own boxes
plus a one-box halo; destinations outside the cache go through the collective
lookup (the transport layer's job). The aura spec computed here tells a rank
which of its agents each neighbor needs: the neighbor's boxes dilated by the
interaction radius, merged per neighbor into world-space rectangles.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .core import ConfigError, SimParams

Vec3 = tuple[float, float, float]
Rect = tuple[Vec3, Vec3]


def rcb_assign(dims: tuple[int, int, int], weights: np.ndarray, rank_count: int) -> np.ndarray:
    """Recursive coordinate bisection of a box grid into rank_count parts.

    Splits the rank range roughly in half at each step, cutting the longest
    axis of the region at the position that best balances weight per rank
    (minimizing |left_weight*right_ranks - right_weight*left_ranks|). Ties go
    to the lower cut coordinate, and axis ties to the lower axis index. Every
    part is a rectangular block of whole boxes.
    """
    bx, by, bz = dims
    if weights.size != bx * by * bz:
        raise ValueError("weights length does not match box grid")
    w3 = np.asarray(weights, dtype=np.float64).reshape(bz, by, bx)
    owner3 = np.zeros((bz, by, bx), dtype=np.int32)
    _rcb(owner3, w3, 0, bx, 0, by, 0, bz, 0, rank_count)
    return owner3.reshape(-1)


def _rcb(owner3, w3, x0, x1, y0, y1, z0, z1, r0, r1):
    if r1 - r0 == 1:
        owner3[z0:z1, y0:y1, x0:x1] = r0
        return
    ranks = r1 - r0
    nl = ranks // 2
    nr = ranks - nl
    exts = (x1 - x0, y1 - y0, z1 - z0)
    region = w3[z0:z1, y0:y1, x0:x1]
    for axis in sorted(range(3), key=lambda a: (-exts[a], a)):
        ext = exts[axis]
        if ext < 2:
            continue
        other = (exts[0] * exts[1] * exts[2]) // ext
        # region axes are (z, y, x); world axis 0 is the last array axis
        slabs = region.sum(axis=tuple(a for a in range(3) if a != 2 - axis))
        prefix = np.cumsum(slabs)
        total = prefix[-1]
        best = None
        for c in range(1, ext):
            if c * other < nl or (ext - c) * other < nr:
                continue
            lw = float(prefix[c - 1])
            score = abs(lw * nr - (total - lw) * nl)
            if best is None or score < best[0]:
                best = (score, c)
        if best is None:
            continue
        c = best[1]
        if axis == 0:
            _rcb(owner3, w3, x0, x0 + c, y0, y1, z0, z1, r0, r0 + nl)
            _rcb(owner3, w3, x0 + c, x1, y0, y1, z0, z1, r0 + nl, r1)
        elif axis == 1:
            _rcb(owner3, w3, x0, x1, y0, y0 + c, z0, z1, r0, r0 + nl)
            _rcb(owner3, w3, x0, x1, y0 + c, y1, z0, z1, r0 + nl, r1)
        else:
            _rcb(owner3, w3, x0, x1, y0, y1, z0, z0 + c, r0, r0 + nl)
            _rcb(owner3, w3, x0, x1, y0, y1, z0 + c, z1, r0 + nl, r1)
        return
    # Region cannot be split further; surplus ranks own nothing.
    owner3[z0:z1, y0:y1, x0:x1] = r0


class PartitionGrid:
    """Box grid with a replicated box-to-owner map.

    The map itself is identical on every rank (ownership changes are decided
    deterministically from allgathered data), but migration deliberately
    resolves through the windowed cache so the scalable path is what gets
    exercised.
    """

    def __init__(self, params: SimParams) -> None:
        self.lo = params.space_lo
        self.hi = params.space_hi
        self.box_edge = params.box_edge
        self.rank_count = params.rank_count
        self.dims = tuple(
            max(1, math.ceil((self.hi[a] - self.lo[a]) / self.box_edge)) for a in range(3)
        )
        self.nbox = self.dims[0] * self.dims[1] * self.dims[2]
        if self.nbox < self.rank_count:
            raise ConfigError(
                f"{self.rank_count} ranks need at least that many partition boxes, have {self.nbox}"
            )
        self.owner = rcb_assign(self.dims, np.ones(self.nbox), self.rank_count)
        self.epoch = 0
        self._window_cache: dict[int, frozenset[int]] = {}
        self._owned_cache: dict[int, list[int]] = {}

    # -- geometry ----------------------------------------------------------

    def box_coords(self, bi: int) -> tuple[int, int, int]:
        bx, by, _bz = self.dims
        return (bi % bx, (bi // bx) % by, bi // (bx * by))

    def box_linear(self, cx: int, cy: int, cz: int) -> int:
        return (cz * self.dims[1] + cy) * self.dims[0] + cx

    def box_of(self, pos: Vec3) -> int:
        coords = []
        for a in range(3):
            c = int((pos[a] - self.lo[a]) / self.box_edge)
            if c < 0:
                c = 0
            elif c >= self.dims[a]:
                c = self.dims[a] - 1
            coords.append(c)
        return self.box_linear(*coords)

    def box_bounds(self, bi: int) -> Rect:
        cx, cy, cz = self.box_coords(bi)
        lo = tuple(self.lo[a] + (cx, cy, cz)[a] * self.box_edge for a in range(3))
        hi = tuple(
            min(self.hi[a], self.lo[a] + ((cx, cy, cz)[a] + 1) * self.box_edge) for a in range(3)
        )
        return (lo, hi)

    # -- ownership ---------------------------------------------------------

    def owner_of(self, bi: int) -> int:
        return int(self.owner[bi])

    def owned_boxes(self, rank: int) -> list[int]:
        got = self._owned_cache.get(rank)
        if got is None:
            got = [int(b) for b in np.nonzero(self.owner == rank)[0]]
            self._owned_cache[rank] = got
        return got

    def resolve(self, pos: Vec3) -> int:
        """Authoritative owner of the box containing pos."""
        return int(self.owner[self.box_of(pos)])

    def apply_ownership(self, new_owner: np.ndarray) -> None:
        new_owner = np.asarray(new_owner, dtype=np.int32)
        if new_owner.shape != self.owner.shape:
            raise ValueError("ownership array has wrong shape")
        if new_owner.min() < 0 or new_owner.max() >= self.rank_count:
            raise ValueError("ownership array names an unknown rank")
        self.owner = new_owner.copy()
        self.epoch += 1
        self._window_cache.clear()
        self._owned_cache.clear()

    # -- migration cache ----------------------------------------------------

    def _box_halo(self, boxes: list[int]) -> frozenset[int]:
        out = set(boxes)
        for bi in boxes:
            cx, cy, cz = self.box_coords(bi)
            for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
                x, y, z = cx + dx, cy + dy, cz + dz
                if 0 <= x < self.dims[0] and 0 <= y < self.dims[1] and 0 <= z < self.dims[2]:
                    out.add(self.box_linear(x, y, z))
        return frozenset(out)

    def cache_window(self, rank: int) -> frozenset[int]:
        """Boxes whose owner this rank may resolve locally: its own plus one layer."""
        got = self._window_cache.get(rank)
        if got is None:
            got = self._box_halo(self.owned_boxes(rank))
            self._window_cache[rank] = got
        return got

    def resolve_cached(self, rank: int, pos: Vec3) -> int | None:
        """Owner of pos if it falls inside rank's cache window, else None (miss)."""
        bi = self.box_of(pos)
        if bi in self.cache_window(rank):
            return int(self.owner[bi])
        return None

    # -- aura geometry -------------------------------------------------------

    def aura_spec(self, rank: int, radius: float) -> dict[int, list[Rect]]:
        """For each neighbor rank, the rectangles of space whose agents that
        neighbor needs as halo copies: its boxes dilated by the interaction
        radius (with a one-ulp allowance so the upper faces are inclusive)."""
        if radius > self.box_edge:
            raise ValueError(f"interaction radius {radius} exceeds box edge {self.box_edge}")
        pad = radius * (1.0 + 1e-12)
        mine = self.owned_boxes(rank)
        mine_set = set(mine)
        foreign: dict[int, set[int]] = {}
        for bi in self._box_halo(mine):
            if bi in mine_set:
                continue
            q = int(self.owner[bi])
            foreign.setdefault(q, set()).add(bi)
        spec: dict[int, list[Rect]] = {}
        for q in sorted(foreign):
            rects = []
            for bi in sorted(foreign[q]):
                (blo, bhi) = self.box_bounds(bi)
                rects.append(
                    (
                        tuple(blo[a] - pad for a in range(3)),
                        tuple(math.nextafter(bhi[a] + pad, math.inf) for a in range(3)),
                    )
                )
            spec[q] = rects
        return spec

    def neighbor_ranks(self, rank: int) -> list[int]:
        """Ranks adjacent to this one in the partition graph (symmetric)."""
        mine = set(self.owned_boxes(rank))
        out = set()
        for bi in self._box_halo(self.owned_boxes(rank)):
            if bi not in mine:
                out.add(int(self.owner[bi]))
        out.discard(rank)
        return sorted(out)


# ---------------------------------------------------------------------------
# Population apportionment
# ---------------------------------------------------------------------------


def box_target_overlap(part: PartitionGrid, bi: int, lo: Vec3, hi: Vec3) -> Rect | None:
    """Intersection of a partition box with a target rectangle, or None."""
    (blo, bhi) = part.box_bounds(bi)
    olo = tuple(max(blo[a], lo[a]) for a in range(3))
    ohi = tuple(min(bhi[a], hi[a]) for a in range(3))
    if any(ohi[a] <= olo[a] for a in range(3)):
        return None
    return (olo, ohi)


def apportion(part: PartitionGrid, count: int, lo: Vec3, hi: Vec3) -> list[tuple[int, int]]:
    """Split a population count over partition boxes by overlap volume.

    Largest-remainder rounding with ties broken by box index. The result is a
    pure function of the box grid and the target rectangle, so every rank
    computes the same assignment no matter how many ranks there are.
    """
    vols: list[tuple[int, float]] = []
    for bi in range(part.nbox):
        rect = box_target_overlap(part, bi, lo, hi)
        if rect is not None:
            v = 1.0
            for a in range(3):
                v *= rect[1][a] - rect[0][a]
            vols.append((bi, v))
    total = sum(v for _bi, v in vols)
    if total <= 0.0:
        raise ConfigError("population target rectangle has zero volume inside the space")
    quotas = [(bi, count * v / total) for bi, v in vols]
    base = [(bi, int(q)) for bi, q in quotas]
    assigned = sum(n for _bi, n in base)
    leftovers = sorted(
        ((q - int(q), bi) for bi, q in quotas), key=lambda t: (-t[0], t[1])
    )
    bonus = {bi for _frac, bi in leftovers[: count - assigned]}
    return [(bi, n + (1 if bi in bonus else 0)) for bi, n in base if n + (1 if bi in bonus else 0) > 0]
