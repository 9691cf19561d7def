"""Pure-Python kernels: the bitwise reference implementation.

The compiled lane (_speedups.pyx) mirrors this module operation for
operation; any edit here must be mirrored there. Both lanes take the same
flat arrays: agents sorted by global id (so row order is gid order), a
cell-sorted index (order/cell_start) for 3x3x3 candidate scans, and the
rows that belong to this rank. Everything is a pure function of its inputs,
which is what keeps results identical across rank counts and backends.
"""

import math

import numpy as np

from ..core import StreamTag, pair_key, reflect_closed, rng_uniform, rng_unit_vector

NAME = "pure"


# Parity-test hooks: the compiled module exports the same names.
def rng_uniform_k(seed, gid, iteration, tag, subkey=0):
    return rng_uniform(seed, gid, iteration, tag, subkey)


def unit_vector_k(seed, gid, iteration, tag):
    return rng_unit_vector(seed, gid, iteration, tag)


def pair_key_k(a, b):
    return pair_key(a, b)


def reflect_k(x, lo, hi):
    return reflect_closed(x, lo, hi)


def _candidates(i, cells, dims, order, cell_start):
    nx, ny, nz = dims
    ci = int(cells[i])
    cx = ci % nx
    cy = (ci // nx) % ny
    cz = ci // (nx * ny)
    cand = []
    for dz in (-1, 0, 1):
        z = cz + dz
        if z < 0 or z >= nz:
            continue
        for dy in (-1, 0, 1):
            y = cy + dy
            if y < 0 or y >= ny:
                continue
            for dx in (-1, 0, 1):
                x = cx + dx
                if x < 0 or x >= nx:
                    continue
                c = (z * ny + y) * nx + x
                a, b = int(cell_start[c]), int(cell_start[c + 1])
                for k in range(a, b):
                    cand.append(int(order[k]))
    cand.sort()  # ascending row == ascending gid: fixes accumulation order
    return cand


def clustering_step(
    gid,
    pos,
    kind,
    diam,
    own_rows,
    order,
    cell_start,
    cells,
    dims,
    lo,
    hi,
    radius,
    k_rep,
    k_adh,
    r_cut,
    max_step,
    seed,
    iteration,
):
    """Pairwise repulsion/adhesion displacements for the owned rows.

    Per pair: f = k_rep*max(0, (d_a+d_b)/2 - dist) - [same kind and dist <=
    r_cut] * k_adh*(r_cut - dist), applied along unit(a - b). Coincident
    pairs draw a shared direction and push apart antisymmetrically. The
    resulting displacement is clamped to max_step and reflected at the walls.
    """
    n_own = len(own_rows)
    out = np.empty((n_own, 3), dtype=np.float64)
    r2 = radius * radius
    for oi in range(n_own):
        i = int(own_rows[oi])
        gi = int(gid[i])
        xi = float(pos[i, 0])
        yi = float(pos[i, 1])
        zi = float(pos[i, 2])
        di = float(diam[i])
        ki = int(kind[i])
        fx = fy = fz = 0.0
        for j in _candidates(i, cells, dims, order, cell_start):
            if j == i:
                continue
            dxv = xi - float(pos[j, 0])
            dyv = yi - float(pos[j, 1])
            dzv = zi - float(pos[j, 2])
            d2 = dxv * dxv + dyv * dyv + dzv * dzv
            if d2 > r2:
                continue
            gj = int(gid[j])
            if d2 == 0.0:
                d = 0.0
                ux, uy, uz = rng_unit_vector(
                    seed, pair_key(gi, gj), iteration, StreamTag.SEPARATE
                )
                if gi >= gj:
                    ux = -ux
                    uy = -uy
                    uz = -uz
            else:
                d = math.sqrt(d2)
                ux = dxv / d
                uy = dyv / d
                uz = dzv / d
            ov = 0.5 * (di + float(diam[j])) - d
            f = 0.0
            if ov > 0.0:
                f = k_rep * ov
            if ki == int(kind[j]) and d <= r_cut:
                f = f - k_adh * (r_cut - d)
            fx = fx + f * ux
            fy = fy + f * uy
            fz = fz + f * uz
        m2 = fx * fx + fy * fy + fz * fz
        if m2 > max_step * max_step:
            s = max_step / math.sqrt(m2)
            fx = fx * s
            fy = fy * s
            fz = fz * s
        out[oi, 0] = reflect_closed(xi + fx, lo[0], hi[0])
        out[oi, 1] = reflect_closed(yi + fy, lo[1], hi[1])
        out[oi, 2] = reflect_closed(zi + fz, lo[2], hi[2])
    return out


def sir_step(
    gid,
    pos,
    state,
    own_rows,
    order,
    cell_start,
    cells,
    dims,
    lo,
    hi,
    radius,
    beta,
    gamma,
    step_scale,
    seed,
    iteration,
):
    """Susceptible/infected/recovered transitions plus a random walk.

    Infection draws are keyed by the unordered gid pair, so both copies of a
    boundary pair see the same coin. Every exposure is drawn (no early exit)
    and transitions read only current-iteration state.
    """
    n_own = len(own_rows)
    new_state = np.empty(n_own, dtype=np.uint8)
    new_pos = np.empty((n_own, 3), dtype=np.float64)
    r2 = radius * radius
    for oi in range(n_own):
        i = int(own_rows[oi])
        gi = int(gid[i])
        st = int(state[i])
        ns = st
        if st == 0:
            infected = False
            for j in _candidates(i, cells, dims, order, cell_start):
                if j == i or int(state[j]) != 1:
                    continue
                dxv = float(pos[i, 0]) - float(pos[j, 0])
                dyv = float(pos[i, 1]) - float(pos[j, 1])
                dzv = float(pos[i, 2]) - float(pos[j, 2])
                if dxv * dxv + dyv * dyv + dzv * dzv > r2:
                    continue
                u = rng_uniform(seed, pair_key(gi, int(gid[j])), iteration, StreamTag.INFECT)
                if u < beta:
                    infected = True
            if infected:
                ns = 1
        elif st == 1:
            if rng_uniform(seed, gi, iteration, StreamTag.RECOVER) < gamma:
                ns = 2
        new_state[oi] = ns
        ux, uy, uz = rng_unit_vector(seed, gi, iteration, StreamTag.WALK)
        new_pos[oi, 0] = reflect_closed(float(pos[i, 0]) + step_scale * ux, lo[0], hi[0])
        new_pos[oi, 1] = reflect_closed(float(pos[i, 1]) + step_scale * uy, lo[1], hi[1])
        new_pos[oi, 2] = reflect_closed(float(pos[i, 2]) + step_scale * uz, lo[2], hi[2])
    return new_state, new_pos
