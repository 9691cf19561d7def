"""Agent models: wire classes plus the drivers that advance them each iteration.

A model contributes three things: a wire class (so its agents can ship in
aura and migration batches), a `make_agent` used at initialization, and a
`step` that advances the owned agents given the halo copies. Drivers never
mutate halo agents; they read them. All randomness goes through the
counter-based streams in `core`, keyed by global id, so a model's trajectory
is a function of (seed, initial population) and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    ConfigError,
    GlobalIdCounter,
    SimParams,
    StreamTag,
    division_gids,
    reflect_closed,
    rng_u64,
    rng_uniform,
    rng_unit_vector,
)
from .wire import wire_class

Vec3 = tuple[float, float, float]


# ---------------------------------------------------------------------------
# Wire classes
# ---------------------------------------------------------------------------


@wire_class(16, ("gid", "gid"), ("pos", "vec3"), ("kind", "u8"), ("diameter", "f64"))
class ClusterCell:
    """A cell of one of two kinds that repels on overlap and adheres to its
    own kind."""

    __slots__ = ("gid", "pos", "kind", "diameter")

    def __init__(self, gid: int, pos: Vec3, kind: int, diameter: float) -> None:
        self.gid = gid
        self.pos = pos
        self.kind = kind
        self.diameter = diameter


@wire_class(17, ("gid", "gid"), ("pos", "vec3"), ("diameter", "f64"))
class ProliferatingCell:
    """A growing cell that splits in two at a diameter threshold."""

    __slots__ = ("gid", "pos", "diameter")

    def __init__(self, gid: int, pos: Vec3, diameter: float) -> None:
        self.gid = gid
        self.pos = pos
        self.diameter = diameter


@wire_class(18, ("gid", "gid"), ("pos", "vec3"), ("state", "u8"))
class SirPerson:
    """A random walker carrying an epidemic state: 0=S, 1=I, 2=R."""

    __slots__ = ("gid", "pos", "state")

    def __init__(self, gid: int, pos: Vec3, state: int) -> None:
        self.gid = gid
        self.pos = pos
        self.state = state


# ---------------------------------------------------------------------------
# Step plumbing
# ---------------------------------------------------------------------------


@dataclass
class StepContext:
    """Everything a driver sees for one iteration on one rank."""

    params: SimParams
    iteration: int
    own: list  # authoritative agents, ascending gid
    aura: list  # halo copies from neighbor ranks, ascending gid
    id_source: GlobalIdCounter


@dataclass
class StepResult:
    births: list = field(default_factory=list)
    deaths: list = field(default_factory=list)  # gids removed this iteration


def assemble_rows(own: list, aura: list):
    """Concatenate own+aura into gid-sorted kernel arrays.

    Returns (gid, pos, own_rows, take): `take` maps any per-agent column
    built in own-then-aura order into the sorted row order, and `own_rows`
    are the sorted-array rows the kernel must update.
    """
    n = len(own) + len(aura)
    gid = np.empty(n, dtype=np.uint64)
    pos = np.empty((n, 3), dtype=np.float64)
    row = 0
    for group in (own, aura):
        for a in group:
            gid[row] = a.gid
            p = a.pos
            pos[row, 0] = p[0]
            pos[row, 1] = p[1]
            pos[row, 2] = p[2]
            row += 1
    take = np.argsort(gid, kind="stable").astype(np.int64)
    inv = np.empty(n, dtype=np.int64)
    inv[take] = np.arange(n, dtype=np.int64)
    return gid[take], pos[take], inv[: len(own)].copy(), take


def bin_for_kernel(pos: np.ndarray, params: SimParams):
    """Cell-sort positions on the same lattice the neighbor grid uses."""
    lo = params.space_lo
    dims = tuple(
        max(1, math.ceil((params.space_hi[a] - lo[a]) / params.cell_edge)) for a in range(3)
    )
    cells, order, cell_start = kernels.bin_rows(pos, lo, params.cell_edge, dims)
    return cells, order, cell_start, dims


class ModelDriver:
    """Base driver: parameter merging with unknown-key rejection."""

    name: str = ""
    agent_cls: type | None = None
    # Drivers must update only the agents they own; anything needing to write
    # to a neighbor's agent cannot run under halo exchange.
    mutates_neighbors = False
    defaults: dict = {}
    dump_header: tuple = ()

    def __init__(self, model_params: dict | None = None) -> None:
        merged = dict(self.defaults)
        given = {} if model_params is None else dict(model_params)
        unknown = set(given) - set(merged)
        if unknown:
            raise ConfigError(f"model {self.name}: unknown parameters {sorted(unknown)}")
        for key, value in given.items():
            merged[key] = type(merged[key])(value)
        for key, value in merged.items():
            setattr(self, key, value)
        self.validate()

    def validate(self) -> None:
        pass

    def check_against(self, params: SimParams) -> None:
        """Reject model/engine parameter combinations the halo cannot cover."""

    def make_agent(self, gid: int, pos: Vec3, seed: int):
        raise NotImplementedError

    def step(self, ctx: StepContext) -> StepResult:
        raise NotImplementedError

    def after_step(self, ctx: StepContext, reduce_sum, is_root: bool) -> None:
        """Optional per-iteration global reporting hook."""

    def dump_row(self, agent) -> tuple:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


class ClusteringModel(ModelDriver):
    """Two cell kinds sorting themselves out: overlap repulsion plus
    same-kind adhesion inside a cutoff."""

    name = "clustering"
    agent_cls = ClusterCell
    defaults = {
        "k_rep": 2.0,
        "k_adh": 0.4,
        "r_cut": 5.0,
        "max_step": 1.0,
        "diameter": 1.0,
    }
    dump_header = ("gid", "kind", "x", "y", "z")

    def validate(self) -> None:
        if self.k_rep < 0 or self.k_adh < 0:
            raise ConfigError("model clustering: force constants must be >= 0")
        if self.r_cut <= 0 or self.max_step <= 0 or self.diameter <= 0:
            raise ConfigError("model clustering: r_cut, max_step, diameter must be > 0")

    def check_against(self, params: SimParams) -> None:
        if self.r_cut > params.interaction_radius:
            raise ConfigError(
                f"model clustering: r_cut {self.r_cut} exceeds interaction_radius"
                f" {params.interaction_radius}; adhesion pairs would be missed"
            )

    def make_agent(self, gid: int, pos: Vec3, seed: int) -> ClusterCell:
        kind = rng_u64(seed, gid, 0, StreamTag.INIT_KIND) & 1
        return ClusterCell(gid, pos, kind, self.diameter)

    def step(self, ctx: StepContext) -> StepResult:
        own = ctx.own
        if own:
            gid, pos, own_rows, take = assemble_rows(own, ctx.aura)
            n = len(own) + len(ctx.aura)
            kind = np.empty(n, dtype=np.uint8)
            diam = np.empty(n, dtype=np.float64)
            row = 0
            for group in (own, ctx.aura):
                for a in group:
                    kind[row] = a.kind
                    diam[row] = a.diameter
                    row += 1
            kind = kind[take]
            diam = diam[take]
            cells, order, cell_start, dims = bin_for_kernel(pos, ctx.params)
            out = kernels.clustering_step(
                gid,
                pos,
                kind,
                diam,
                own_rows,
                order,
                cell_start,
                cells,
                dims,
                ctx.params.space_lo,
                ctx.params.space_hi,
                ctx.params.interaction_radius,
                self.k_rep,
                self.k_adh,
                self.r_cut,
                self.max_step,
                ctx.params.seed,
                ctx.iteration,
            )
            for i, a in enumerate(own):
                a.pos = (float(out[i, 0]), float(out[i, 1]), float(out[i, 2]))
        return StepResult()

    def dump_row(self, a) -> tuple:
        p = a.pos
        return (
            str(int(a.gid)),
            str(int(a.kind)),
            float(p[0]).hex(),
            float(p[1]).hex(),
            float(p[2]).hex(),
        )


# ---------------------------------------------------------------------------
# Proliferation
# ---------------------------------------------------------------------------


class ProliferationModel(ModelDriver):
    """Cells grow by a fixed increment and split at a diameter threshold.

    Each daughter takes the volume-halving diameter D_max * 2^(-1/3) and the
    pair is placed symmetrically about the parent along a random axis, so
    total cell volume is continuous across a division.
    """

    name = "proliferation"
    agent_cls = ProliferatingCell
    defaults = {
        "growth_rate": 0.05,
        "max_diameter": 2.0,
        "start_diameter": 1.0,
    }
    dump_header = ("gid", "diameter", "x", "y", "z")

    def validate(self) -> None:
        if self.growth_rate <= 0:
            raise ConfigError("model proliferation: growth_rate must be > 0")
        if not (0 < self.start_diameter <= self.max_diameter):
            raise ConfigError(
                "model proliferation: need 0 < start_diameter <= max_diameter"
            )

    def make_agent(self, gid: int, pos: Vec3, seed: int) -> ProliferatingCell:
        return ProliferatingCell(gid, pos, self.start_diameter)

    def step(self, ctx: StepContext) -> StepResult:
        result = StepResult()
        lo = ctx.params.space_lo
        hi = ctx.params.space_hi
        child_d = self.max_diameter * 2.0 ** (-1.0 / 3.0)
        for a in ctx.own:
            grown = float(a.diameter) + self.growth_rate
            if grown < self.max_diameter:
                a.diameter = grown
                continue
            gid = int(a.gid)
            ux, uy, uz = rng_unit_vector(ctx.params.seed, gid, ctx.iteration, StreamTag.DIVIDE)
            off = child_d / 2.0
            p = a.pos
            first = tuple(
                reflect_closed(float(p[i]) + off * u, lo[i], hi[i])
                for i, u in enumerate((ux, uy, uz))
            )
            second = tuple(
                reflect_closed(float(p[i]) - off * u, lo[i], hi[i])
                for i, u in enumerate((ux, uy, uz))
            )
            g1, g2 = division_gids(gid, ctx.id_source)
            result.births.append(ProliferatingCell(g1, first, child_d))
            result.births.append(ProliferatingCell(g2, second, child_d))
            result.deaths.append(gid)
        return result

    def dump_row(self, a) -> tuple:
        p = a.pos
        return (
            str(int(a.gid)),
            float(a.diameter).hex(),
            float(p[0]).hex(),
            float(p[1]).hex(),
            float(p[2]).hex(),
        )


# ---------------------------------------------------------------------------
# SIR epidemic
# ---------------------------------------------------------------------------


class SirModel(ModelDriver):
    """Random walkers passing an infection; recovery is permanent."""

    name = "sir"
    agent_cls = SirPerson
    defaults = {
        "beta": 0.05,
        "gamma": 0.1,
        "step_scale": 1.0,
        "initial_infected": 0.02,
    }
    dump_header = ("gid", "state", "x", "y", "z")

    def __init__(self, model_params: dict | None = None) -> None:
        super().__init__(model_params)
        self.series: list[tuple[int, int, int, int]] = []

    def validate(self) -> None:
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.gamma <= 1.0):
            raise ConfigError("model sir: beta and gamma must be probabilities")
        if not (0.0 <= self.initial_infected <= 1.0):
            raise ConfigError("model sir: initial_infected must be in [0, 1]")
        if self.step_scale < 0:
            raise ConfigError("model sir: step_scale must be >= 0")

    def make_agent(self, gid: int, pos: Vec3, seed: int) -> SirPerson:
        state = 1 if rng_uniform(seed, gid, 0, StreamTag.INIT_KIND) < self.initial_infected else 0
        return SirPerson(gid, pos, state)

    def step(self, ctx: StepContext) -> StepResult:
        own = ctx.own
        if own:
            gid, pos, own_rows, take = assemble_rows(own, ctx.aura)
            n = len(own) + len(ctx.aura)
            state = np.empty(n, dtype=np.uint8)
            row = 0
            for group in (own, ctx.aura):
                for a in group:
                    state[row] = a.state
                    row += 1
            state = state[take]
            cells, order, cell_start, dims = bin_for_kernel(pos, ctx.params)
            new_state, new_pos = kernels.sir_step(
                gid,
                pos,
                state,
                own_rows,
                order,
                cell_start,
                cells,
                dims,
                ctx.params.space_lo,
                ctx.params.space_hi,
                ctx.params.interaction_radius,
                self.beta,
                self.gamma,
                self.step_scale,
                ctx.params.seed,
                ctx.iteration,
            )
            for i, a in enumerate(own):
                a.state = int(new_state[i])
                a.pos = (float(new_pos[i, 0]), float(new_pos[i, 1]), float(new_pos[i, 2]))
        return StepResult()

    def after_step(self, ctx: StepContext, reduce_sum, is_root: bool) -> None:
        # Run-level reporting is a reduction plus a root-side record:
        counts = reduce_sum(self.state_counts(ctx.own))
        if is_root:
            self.series.append((ctx.iteration, counts[0], counts[1], counts[2]))

    @staticmethod
    def state_counts(agents) -> list[int]:
        counts = [0, 0, 0]
        for a in agents:
            counts[int(a.state)] += 1
        return counts

    def dump_row(self, a) -> tuple:
        p = a.pos
        return (
            str(int(a.gid)),
            str(int(a.state)),
            float(p[0]).hex(),
            float(p[1]).hex(),
            float(p[2]).hex(),
        )


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

MODELS: dict[str, type[ModelDriver]] = {}


def register_model(cls: type[ModelDriver]) -> type[ModelDriver]:
    if cls.mutates_neighbors:
        raise ConfigError(
            f"model {cls.name}: writes to neighbor agents, which halo exchange"
            " cannot propagate back; restructure the update to be owner-local"
        )
    MODELS[cls.name] = cls
    return cls


for _cls in (ClusteringModel, ProliferationModel, SirModel):
    register_model(_cls)


def make_driver(name: str, model_params: dict | None = None) -> ModelDriver:
    cls = MODELS.get(name)
    if cls is None:
        raise ConfigError(f"unknown model {name!r}; available: {sorted(MODELS)}")
    return cls(model_params)
