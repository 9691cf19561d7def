"""Per-rank simulation engine.

Each iteration runs the same phase sequence on every rank:

  aura     exchange halo copies with neighbor ranks (plain, compressed, or
           delta-encoded against the previous iteration)
  ops      advance owned agents through the model driver
  migrate  hand agents whose new position left this rank's boxes to their
           new owner, resolving unknown boxes with one collective lookup
  balance  on the maintenance interval, replan box ownership and migrate
           again; then compact the store into space-filling order

Every collective carries a phase id derived from the iteration number, so a
rank that falls out of step fails loudly instead of deadlocking. All
decisions that affect results are pure functions of allgathered data or of
(seed, gid, iteration), which is what makes an N-rank run bit-identical to
the 1-rank run.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, fields

import numpy as np

from .core import ConfigError, GlobalIdCounter, INIT_ORIGIN_BASE, SimParams, StreamTag, pack_gid, rng_uniform
from .delta import DeltaCodec, compress_message, decompress_message
from .grid import NeighborGrid, morton3
from .loadbalance import box_weights, diffusive_plan, rank_loads, rcb_rebalance
from .models import StepContext
from .partition import PartitionGrid, apportion, box_target_overlap
from .transport import Tag, Transport
from .wire import AgentBatch, decode, encode, encode_bytes, materialize

LB_MODES = ("none", "diffusive", "rcb")
WEIGHT_MODES = ("count", "measured")

# Phase codes, combined with the iteration as (iteration << 4) | code.
PHASE_LOOKUP_REQ = 1
PHASE_LOOKUP_RESP = 2
PHASE_LB = 3
PHASE_REDUCE = 4
PHASE_LB_LOOKUP_REQ = 6
PHASE_LB_LOOKUP_RESP = 7
PHASE_FINAL = 8

_F64I32 = struct.Struct("<dI")


class EngineError(RuntimeError):
    pass


@dataclass
class IterationStats:
    rank: int
    iteration: int
    own_agents: int
    aura_agents: int
    births: int
    deaths: int
    migrated_out: int
    migrated_in: int
    aura_raw_bytes: int
    aura_comp_bytes: int
    aura_wire_bytes: int
    migrate_bytes: int
    aura_ms: float
    ops_ms: float
    migrate_ms: float
    lb_ms: float
    compact_ms: float
    pool_live: int
    pool_hwm: int

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{v:.3f}" if isinstance(v, float) else str(v))
        return out


class RankEngine:
    """One rank's share of the simulation. Construct one per transport rank
    with identical params and driver settings everywhere."""

    def __init__(
        self,
        params: SimParams,
        driver,
        transport: Transport,
        *,
        compress: bool = False,
        delta: bool = False,
        lb_mode: str = "none",
        lb_weights: str = "count",
        recv_timeout: float = 120.0,
    ) -> None:
        if params.rank_count != transport.size:
            raise ConfigError(
                f"params.rank_count {params.rank_count} != transport world size {transport.size}"
            )
        if compress and delta:
            raise ConfigError("compress and delta are mutually exclusive aura encodings")
        if lb_mode not in LB_MODES:
            raise ConfigError(f"lb_mode {lb_mode!r} not one of {LB_MODES}")
        if lb_weights not in WEIGHT_MODES:
            raise ConfigError(f"lb_weights {lb_weights!r} not one of {WEIGHT_MODES}")
        driver.check_against(params)
        self.params = params
        self.driver = driver
        self.tr = transport
        self.rank = transport.rank
        self.size = transport.size
        self.pool = transport.pool
        self.part = PartitionGrid(params)
        self.grid = NeighborGrid(params.space_lo, params.space_hi, params.cell_edge)
        self.mode = "delta" if delta else ("compress" if compress else "plain")
        self.lb_mode = lb_mode
        self.lb_weights = lb_weights
        self.recv_timeout = recv_timeout
        self.store: dict[int, object] = {}
        # gid -> (message, view) for agents still living in a receive buffer
        self.backed: dict[int, tuple] = {}
        self.id_source = GlobalIdCounter(rank=self.rank)
        self.iteration = 0
        self.aura_msgs: list = []
        self.aura_agents: list = []
        self.delta_tx: dict[int, DeltaCodec] = {}
        self.delta_rx: dict[int, DeltaCodec] = {}
        self.stats: list[IterationStats] = []
        self.before_iteration = None  # optional hook(engine) for tests/tools
        self._lb_runtime = 0.0

    # -- initialization ------------------------------------------------------

    def init_population(self, count: int, target_lo=None, target_hi=None) -> int:
        """Create `count` agents uniformly over the target rectangle.

        The box quotas, the gid sequence, and each position are functions of
        the box grid and the seed alone, so every rank count initializes the
        identical population (this rank just keeps its own share).
        """
        lo = self.params.space_lo if target_lo is None else tuple(map(float, target_lo))
        hi = self.params.space_hi if target_hi is None else tuple(map(float, target_hi))
        quotas = apportion(self.part, count, lo, hi)
        seed = self.params.seed
        k = 0
        placed = 0
        for box, n in quotas:
            owner = self.part.owner_of(box)
            rect = box_target_overlap(self.part, box, lo, hi)
            for _ in range(n):
                gid = pack_gid(INIT_ORIGIN_BASE + k, 0)
                k += 1
                if owner != self.rank:
                    continue
                pos = []
                for a in range(3):
                    u = rng_uniform(seed, gid, 0, StreamTag.INIT_POS, a)
                    x = rect[0][a] + u * (rect[1][a] - rect[0][a])
                    if x >= rect[1][a]:  # guard the closed upper edge
                        x = np.nextafter(rect[1][a], rect[0][a])
                    pos.append(float(x))
                agent = self.driver.make_agent(gid, tuple(pos), seed)
                self.store[gid] = agent
                self.grid.insert(gid, tuple(pos))
                placed += 1
        return placed

    # -- phased iteration ------------------------------------------------------

    def _phase(self, code: int) -> int:
        return (self.iteration << 4) | code

    def run(self, iterations: int) -> None:
        for _ in range(iterations):
            self.step()
        self.finish()

    def step(self) -> IterationStats:
        self.iteration += 1
        if self.before_iteration is not None:
            self.before_iteration(self)
        t0 = time.perf_counter()
        raw_b, comp_b, wire_b = self._exchange_aura()
        aura_n = len(self.aura_agents)
        t1 = time.perf_counter()
        births, deaths = self._ops()
        t2 = time.perf_counter()
        out_n, in_n, mig_b = self._migrate(PHASE_LOOKUP_REQ, PHASE_LOOKUP_RESP)
        t3 = time.perf_counter()
        self._lb_runtime += t3 - t0
        lb_ms = 0.0
        compact_ms = 0.0
        if self.iteration % self.params.lb_interval == 0:
            if self.lb_mode != "none" and self.size > 1:
                o2, i2, b2 = self._rebalance()
                out_n += o2
                in_n += i2
                mig_b += b2
            lb_ms = (time.perf_counter() - t3) * 1e3
            t4 = time.perf_counter()
            self._compact()
            compact_ms = (time.perf_counter() - t4) * 1e3
        self._report()
        snap = self.pool.stats.snapshot()
        stat = IterationStats(
            rank=self.rank,
            iteration=self.iteration,
            own_agents=len(self.store),
            aura_agents=aura_n,
            births=births,
            deaths=deaths,
            migrated_out=out_n,
            migrated_in=in_n,
            aura_raw_bytes=raw_b,
            aura_comp_bytes=comp_b,
            aura_wire_bytes=wire_b,
            migrate_bytes=mig_b,
            aura_ms=(t1 - t0) * 1e3,
            ops_ms=(t2 - t1) * 1e3,
            migrate_ms=(t3 - t2) * 1e3,
            lb_ms=lb_ms,
            compact_ms=compact_ms,
            pool_live=snap["live"],
            pool_hwm=snap["live_hwm"],
        )
        self.stats.append(stat)
        return stat

    def finish(self) -> None:
        """Release every held buffer and leave the store fully materialized."""
        for msg in self.aura_msgs:
            msg.release_all()
        self.aura_msgs.clear()
        self.aura_agents = []
        self.grid.clear_aura()
        self._compact()
        if self.size > 1:
            self.tr.allgather(
                b"", ((self.iteration + 1) << 4) | PHASE_FINAL, timeout=self.recv_timeout
            )

    # -- aura -----------------------------------------------------------------

    def _exchange_aura(self):
        for msg in self.aura_msgs:
            msg.release_all()
        self.aura_msgs.clear()
        self.aura_agents = []
        self.grid.clear_aura()
        spec = self.part.aura_spec(self.rank, self.params.interaction_radius)
        refresh = (self.iteration % self.params.reference_interval) == 0
        raw_total = comp_total = wire_total = 0
        for q in sorted(spec):
            gids: set[int] = set()
            for rlo, rhi in spec[q]:
                gids.update(h.gid for h in self.grid.query_region(rlo, rhi))
            batch = AgentBatch([self.store[g] for g in sorted(gids)])
            if self.mode == "plain":
                buf = encode(batch, self.pool)
                raw_total += len(buf)
                wire_total += len(buf)
                self.tr.isend(q, Tag.AURA, buf)
                self.pool.release(buf)  # isend copied the frames
            elif self.mode == "compress":
                raw = encode_bytes(batch)
                payload = compress_message(raw)
                raw_total += len(raw)
                comp_total += len(payload)
                wire_total += len(payload)
                self.tr.isend(q, Tag.AURA, payload)
            else:
                codec = self.delta_tx.setdefault(q, DeltaCodec())
                frame = codec.encode(batch.agents, refresh=refresh)
                # Record what the other encodings would have cost.
                raw = encode_bytes(batch)
                raw_total += len(raw)
                comp_total += len(compress_message(raw))
                wire_total += len(frame)
                self.tr.isend(q, Tag.AURA, frame)
        collected = []
        for q in self.part.neighbor_ranks(self.rank):
            buf = self.tr.recv(q, Tag.AURA, self.recv_timeout)
            if self.mode == "plain":
                msg = decode(buf, stats=self.pool.stats)
            elif self.mode == "compress":
                data = decompress_message(bytes(buf.data))
                self.pool.release(buf)
                msg = decode(data, stats=self.pool.stats)
            else:
                codec = self.delta_rx.setdefault(q, DeltaCodec())
                data = codec.decode(bytes(buf.data), refresh=refresh)
                self.pool.release(buf)
                msg = decode(data, stats=self.pool.stats)
            for el in msg.root.agents:
                self.grid.insert(int(el.gid), tuple(el.pos), aura=True)
                collected.append(el)
            self.aura_msgs.append(msg)
        collected.sort(key=lambda a: int(a.gid))
        self.aura_agents = collected
        return raw_total, comp_total, wire_total

    # -- model step -------------------------------------------------------------

    def _ops(self):
        own = [self.store[g] for g in sorted(self.store)]
        ctx = StepContext(self.params, self.iteration, own, self.aura_agents, self.id_source)
        res = self.driver.step(ctx)
        dead = set(int(g) for g in res.deaths)
        for a in own:
            g = int(a.gid)
            if g not in dead:
                self.grid.move(g, tuple(a.pos))
        for g in sorted(dead):
            self.grid.remove(g)
            del self.store[g]
            entry = self.backed.pop(g, None)
            if entry is not None:
                entry[0].release(entry[1])
        for a in res.births:
            g = int(a.gid)
            if g in self.store:
                raise EngineError(f"birth gid {g} collides with a live agent")
            self.store[g] = a
            self.grid.insert(g, tuple(a.pos))
        return len(res.births), len(dead)

    # -- migration ----------------------------------------------------------------

    def _migrate(self, req_code: int, resp_code: int):
        outbound: dict[int, list[int]] = {}
        missed: dict[int, list[int]] = {}
        for g in sorted(self.store):
            pos = tuple(self.store[g].pos)
            dst = self.part.resolve_cached(self.rank, pos)
            if dst is None:
                missed.setdefault(self.part.box_of(pos), []).append(g)
            elif dst != self.rank:
                outbound.setdefault(dst, []).append(g)

        # One collective round resolves every box outside the local window
        # and doubles as the announcement of long-range transfers.
        req = sorted(missed)
        payload = struct.pack(f"<I{len(req)}I", len(req), *req)
        blobs = self.tr.allgather(
            payload,
            self._phase(req_code),
            tags=(Tag.LOOKUP_REQ, Tag.LOOKUP_REQ),
            timeout=self.recv_timeout,
        )
        asked: list[tuple[int, ...]] = []
        for blob in blobs:
            (n,) = struct.unpack_from("<I", blob, 0)
            asked.append(struct.unpack_from(f"<{n}I", blob, 4))
        union = sorted({b for boxes in asked for b in boxes})
        mine = [b for b in union if self.part.owner_of(b) == self.rank]
        payload = struct.pack(f"<I{len(mine)}I", len(mine), *mine)
        blobs = self.tr.allgather(
            payload,
            self._phase(resp_code),
            tags=(Tag.LOOKUP_RESP, Tag.LOOKUP_RESP),
            timeout=self.recv_timeout,
        )
        box_owner: dict[int, int] = {}
        for r, blob in enumerate(blobs):
            (n,) = struct.unpack_from("<I", blob, 0)
            for b in struct.unpack_from(f"<{n}I", blob, 4):
                box_owner[b] = r
        for b, gids in missed.items():
            dst = box_owner.get(b)
            if dst is None:
                raise EngineError(f"collective lookup left box {b} unclaimed")
            if dst == self.rank:
                raise EngineError(f"cache miss resolved to self for box {b}")
            outbound.setdefault(dst, []).extend(gids)

        neighbors = self.part.neighbor_ranks(self.rank)
        receivers = set(neighbors) | set(outbound)
        senders = set(neighbors)
        mine_set = set(mine)
        for r, boxes in enumerate(asked):
            if r != self.rank and any(b in mine_set for b in boxes):
                senders.add(r)

        sent = 0
        for dst in sorted(receivers):
            gids = sorted(outbound.get(dst, ()))
            batch = AgentBatch([self.store[g] for g in gids])
            buf = encode(batch, self.pool)
            sent += len(buf)
            self.tr.isend(dst, Tag.MIGRATE, buf)
            self.pool.release(buf)
            for g in gids:
                self.grid.remove(g)
                del self.store[g]
                entry = self.backed.pop(g, None)
                if entry is not None:
                    entry[0].release(entry[1])
        arrived = 0
        for src in sorted(senders):
            buf = self.tr.recv(src, Tag.MIGRATE, self.recv_timeout)
            msg = decode(buf, stats=self.pool.stats)
            elements = list(msg.root.agents)
            msg.release(msg.root)  # elements keep their blocks; root is done
            for el in elements:
                g = int(el.gid)
                if g in self.store:
                    raise EngineError(f"migrated gid {g} collides with a live agent")
                if g in self.grid:  # stale aura copy of the same agent
                    self.grid.remove(g)
                self.store[g] = el
                self.backed[g] = (msg, el)
                self.grid.insert(g, tuple(el.pos))
            arrived += len(elements)
        out_count = sum(len(v) for v in outbound.values())
        return out_count, arrived, sent

    # -- load balancing -------------------------------------------------------------

    def _rebalance(self):
        counts_mine: dict[int, int] = {}
        for g in self.store:
            b = self.part.box_of(tuple(self.store[g].pos))
            counts_mine[b] = counts_mine.get(b, 0) + 1
        items = sorted(counts_mine.items())
        payload = _F64I32.pack(self._lb_runtime, len(items))
        payload += b"".join(struct.pack("<IQ", b, c) for b, c in items)
        blobs = self.tr.allgather(payload, self._phase(PHASE_LB), timeout=self.recv_timeout)
        counts = np.zeros(self.part.nbox, dtype=np.int64)
        runtimes = []
        for blob in blobs:
            rt, n = _F64I32.unpack_from(blob, 0)
            runtimes.append(rt)
            off = _F64I32.size
            for _ in range(n):
                b, c = struct.unpack_from("<IQ", blob, off)
                counts[b] += c
                off += 12
        weights = box_weights(counts, self.part.owner, runtimes, self.lb_weights)
        if self.lb_weights == "measured":
            times = runtimes
        else:
            times = rank_loads(self.part.owner, weights, self.size)
        if self.lb_mode == "diffusive":
            new_owner = diffusive_plan(self.part.owner, weights, times, self.part.dims)
        else:
            new_owner = rcb_rebalance(self.part.dims, weights, self.size)
        if not np.array_equal(new_owner, self.part.owner):
            self.part.apply_ownership(new_owner)
        self._lb_runtime = 0.0
        return self._migrate(PHASE_LB_LOOKUP_REQ, PHASE_LB_LOOKUP_RESP)

    # -- maintenance ------------------------------------------------------------------

    def _compact(self) -> None:
        """Materialize buffer-backed agents and re-lay the store in
        space-filling order. This is where receive buffers adopted during
        migration get reclaimed."""
        for g in sorted(self.backed):
            msg, view = self.backed[g]
            self.store[g] = materialize(view, self.pool.stats)
            msg.release(view)
        self.backed.clear()

        def key(item):
            cell = self.grid.cell_of(tuple(item[1].pos))
            return (morton3(*cell), item[0])

        self.store = dict(sorted(self.store.items(), key=key))

    def _report(self) -> None:
        own = [self.store[g] for g in sorted(self.store)]
        ctx = StepContext(self.params, self.iteration, own, [], self.id_source)
        self.driver.after_step(ctx, self.reduce_sum, self.rank == 0)

    # -- collectives helpers -------------------------------------------------------------

    def reduce_sum(self, values) -> list[int]:
        vals = [int(v) for v in values]
        payload = struct.pack(f"<I{len(vals)}q", len(vals), *vals)
        blobs = self.tr.allgather(payload, self._phase(PHASE_REDUCE), timeout=self.recv_timeout)
        totals = [0] * len(vals)
        for blob in blobs:
            (n,) = struct.unpack_from("<I", blob, 0)
            if n != len(vals):
                raise EngineError(f"reduction width mismatch: {n} != {len(vals)}")
            got = struct.unpack_from(f"<{n}q", blob, 4)
            totals = [a + b for a, b in zip(totals, got)]
        return totals

    # -- tools ------------------------------------------------------------------------

    def teleport(self, gid: int, pos) -> None:
        """Move an agent anywhere; migration delivers it next iteration."""
        agent = self.store[gid]
        agent.pos = tuple(float(v) for v in pos)
        self.grid.move(gid, tuple(agent.pos))

    def final_rows(self) -> list[tuple]:
        return [self.driver.dump_row(self.store[g]) for g in sorted(self.store)]


# ---------------------------------------------------------------------------
# In-process world runner
# ---------------------------------------------------------------------------


def run_world(
    params: SimParams,
    driver_factory,
    count: int,
    iterations: int,
    *,
    target_lo=None,
    target_hi=None,
    setup=None,
    **engine_kwargs,
):
    """Drive all ranks of an in-process world to completion; returns the
    engines (stores, stats, and drivers still attached)."""
    from .transport import InProcWorld

    world = InProcWorld(params.rank_count, params.batch_bytes)
    engines: list = [None] * params.rank_count
    failures: list = []

    def work(r: int) -> None:
        tr = world.transport(r)
        try:
            eng = RankEngine(params, driver_factory(), tr, **engine_kwargs)
            engines[r] = eng
            eng.init_population(count, target_lo, target_hi)
            if setup is not None:
                setup(eng)
            eng.run(iterations)
        except BaseException as exc:  # noqa: BLE001 - propagated to the caller
            failures.append((r, exc))
            tr.abort(f"rank {r} failed: {exc!r}")
        finally:
            tr.close()

    import threading

    threads = [threading.Thread(target=work, args=(r,), name=f"rank{r}") for r in range(params.rank_count)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        rank, exc = failures[0]
        raise EngineError(f"rank {rank} failed: {exc}") from exc
    return engines
