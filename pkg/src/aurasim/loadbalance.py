"""Load balancing plans over the partition box grid.

Both balancers are pure functions of allgathered data (per-box weights and
per-rank runtimes), so every rank computes the same plan without extra
coordination. Weights follow the cost model weight = agent_count *
runtime_scale, where the scale calibrates a rank's measured wall time per
agent (1.0 when nothing was measured).

The diffusive plan is local: each overloaded rank donates boundary boxes to
strictly faster face-adjacent neighbors until its projected runtime drops to
the neighborhood mean. Donations never disconnect either territory and never
empty a rank, which keeps the aura geometry well behaved.
"""

from __future__ import annotations

import numpy as np

from .partition import rcb_assign

_EPS = 1e-9


def box_weights(
    counts: np.ndarray,
    owner: np.ndarray,
    rank_runtimes,
    mode: str = "count",
) -> np.ndarray:
    """Per-box cost estimates.

    count: the agent count itself. measured: count scaled by the owning
    rank's wall time per agent, so heterogeneous agents (or hosts) shift
    weight toward where time is actually spent.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if mode == "count":
        return counts.copy()
    if mode != "measured":
        raise ValueError(f"unknown weight mode {mode!r}")
    owner = np.asarray(owner)
    scales = np.ones(len(rank_runtimes), dtype=np.float64)
    for r, runtime in enumerate(rank_runtimes):
        rank_count = float(counts[owner == r].sum())
        if rank_count > 0.0 and runtime > 0.0:
            scales[r] = runtime / rank_count
    # Normalize so an all-equal measurement reproduces the count weights.
    positive = scales[scales > 0.0]
    if positive.size:
        scales /= positive.mean()
    return counts * scales[owner]


def rank_loads(owner: np.ndarray, weights: np.ndarray, rank_count: int) -> np.ndarray:
    loads = np.zeros(rank_count, dtype=np.float64)
    np.add.at(loads, np.asarray(owner), np.asarray(weights, dtype=np.float64))
    return loads


def rcb_rebalance(
    dims: tuple[int, int, int], weights: np.ndarray, rank_count: int
) -> np.ndarray:
    """Global recursive-coordinate-bisection replan from current weights."""
    return rcb_assign(dims, np.asarray(weights, dtype=np.float64), rank_count)


# ---------------------------------------------------------------------------
# Diffusive plan
# ---------------------------------------------------------------------------


def _face_neighbors(bi: int, dims: tuple[int, int, int]):
    nx, ny, nz = dims
    x = bi % nx
    y = (bi // nx) % ny
    z = bi // (nx * ny)
    if x > 0:
        yield bi - 1
    if x + 1 < nx:
        yield bi + 1
    if y > 0:
        yield bi - nx
    if y + 1 < ny:
        yield bi + nx
    if z > 0:
        yield bi - nx * ny
    if z + 1 < nz:
        yield bi + nx * ny


def _stays_connected(boxes: set[int], removed: int, dims: tuple[int, int, int]) -> bool:
    """Is boxes - {removed} still one 6-connected component (and non-empty)?"""
    rest = boxes - {removed}
    if not rest:
        return False
    seed = min(rest)
    seen = {seed}
    frontier = [seed]
    while frontier:
        b = frontier.pop()
        for nb in _face_neighbors(b, dims):
            if nb in rest and nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    return len(seen) == len(rest)


def diffusive_plan(
    owner: np.ndarray,
    weights: np.ndarray,
    rank_runtimes,
    dims: tuple[int, int, int],
) -> np.ndarray:
    """One relaxation sweep: overloaded ranks shed boundary boxes.

    Ranks are visited in ascending order. Each compares its runtime to the
    mean over itself and its face-adjacent neighbor ranks; if above, it
    donates eligible boundary boxes (heaviest first) to the fastest strictly
    faster adjacent neighbor until its projected runtime reaches that mean.
    A donation is skipped if it would disconnect or empty the donor or push
    the receiver above the mean. All ties break toward the lower box index
    or rank id, so every rank derives the identical plan.
    """
    owner = np.asarray(owner).copy()
    weights = np.asarray(weights, dtype=np.float64)
    rank_count = len(rank_runtimes)
    times = np.asarray(rank_runtimes, dtype=np.float64).copy()
    loads = rank_loads(owner, weights, rank_count)
    # Seconds of runtime per unit of weight; idle or unmeasured ranks adopt
    # the mean rate so a projected donation still means something.
    rates = np.empty(rank_count, dtype=np.float64)
    have = (loads > 0.0) & (times > 0.0)
    default_rate = (times[have] / loads[have]).mean() if have.any() else 1.0
    for r in range(rank_count):
        rates[r] = times[r] / loads[r] if have[r] else default_rate

    for donor in range(rank_count):
        boxes = {int(b) for b in np.nonzero(owner == donor)[0]}
        if not boxes:
            continue
        adjacent = set()
        for b in boxes:
            for nb in _face_neighbors(b, dims):
                q = int(owner[nb])
                if q != donor:
                    adjacent.add(q)
        if not adjacent:
            continue
        group = sorted(adjacent | {donor})
        mean_t = float(np.mean([times[g] for g in group]))
        if times[donor] <= mean_t * (1.0 + _EPS):
            continue
        # Heaviest first: fewer transfers reach the target.
        candidates = sorted(boxes, key=lambda b: (-weights[b], b))
        for b in candidates:
            if times[donor] <= mean_t * (1.0 + _EPS):
                break
            w = float(weights[b])
            if w <= 0.0:
                continue
            takers = []
            for nb in _face_neighbors(b, dims):
                q = int(owner[nb])
                if q == donor or times[q] + _EPS >= times[donor]:
                    continue
                if times[q] + w * rates[q] > mean_t * (1.0 + _EPS):
                    continue
                takers.append(q)
            if not takers:
                continue
            if not _stays_connected(boxes, b, dims):
                continue
            q = min(takers, key=lambda t: (times[t], t))
            owner[b] = q
            boxes.discard(b)
            times[donor] -= w * rates[donor]
            times[q] += w * rates[q]
            loads[donor] -= w
            loads[q] += w
    return owner
