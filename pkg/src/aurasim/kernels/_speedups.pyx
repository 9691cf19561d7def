# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: a line-for-line mirror of kernels/pure.py.

The contract is bitwise equality with the pure lane, so the arithmetic here
sticks to plain IEEE +,-,*,/ and libm sqrt/fmod/nextafter in the same order
as the Python code, and the RNG repeats the same uint64 finalizer chain.
Loops run without the GIL so thread ranks can overlap on multicore hosts.
"""

import numpy as np

from libc.math cimport fmod, nextafter, sqrt
from libc.stdint cimport int64_t, uint8_t, uint64_t

NAME = "compiled"

cdef double RNG_SCALE = 2.0 ** -53

cdef uint64_t TAG_SEPARATE = 3
cdef uint64_t TAG_INFECT = 4
cdef uint64_t TAG_RECOVER = 5
cdef uint64_t TAG_WALK = 6


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


cdef inline uint64_t _rng_u64(uint64_t seed, uint64_t gid, uint64_t iteration,
                              uint64_t tag, uint64_t subkey) nogil:
    cdef uint64_t z = seed + <uint64_t>0x9E3779B97F4A7C15
    z = _mix64(z ^ (gid + <uint64_t>0xBF58476D1CE4E5B9))
    z = _mix64(z ^ (iteration + <uint64_t>0x94D049BB133111EB))
    z = _mix64(z ^ (tag + <uint64_t>0x2545F4914F6CDD1D))
    return _mix64(z ^ subkey)


cdef inline double _rng_uniform(uint64_t seed, uint64_t gid, uint64_t iteration,
                                uint64_t tag, uint64_t subkey) nogil:
    return <double>(_rng_u64(seed, gid, iteration, tag, subkey) >> 11) * RNG_SCALE


cdef inline uint64_t _pair_key(uint64_t a, uint64_t b) nogil:
    cdef uint64_t lo_k = a if a <= b else b
    cdef uint64_t hi_k = b if a <= b else a
    return _mix64(lo_k ^ _mix64(hi_k))


cdef inline void _unit_vector(uint64_t seed, uint64_t gid, uint64_t iteration,
                              uint64_t tag, double* ox, double* oy, double* oz) nogil:
    cdef uint64_t k = 0
    cdef double x, y, z, n2, n
    while True:
        x = 2.0 * _rng_uniform(seed, gid, iteration, tag, 3 * k) - 1.0
        y = 2.0 * _rng_uniform(seed, gid, iteration, tag, 3 * k + 1) - 1.0
        z = 2.0 * _rng_uniform(seed, gid, iteration, tag, 3 * k + 2) - 1.0
        n2 = x * x + y * y + z * z
        if 1e-12 <= n2 <= 1.0:
            break
        k += 1
    n = sqrt(n2)
    ox[0] = x / n
    oy[0] = y / n
    oz[0] = z / n


cdef inline double _reflect(double x, double lo, double hi) nogil:
    cdef double width, period, y
    if lo <= x < hi:
        return x
    width = hi - lo
    period = 2.0 * width
    y = fmod(x - lo, period)
    if y < 0.0:
        y += period
    if y >= width:
        y = period - y
    x = lo + y
    if x >= hi:
        x = nextafter(hi, lo)
    if x < lo:
        x = lo
    return x


cdef inline int64_t _collect(int64_t ci, int nx, int ny, int nz,
                             const int64_t[::1] order, const int64_t[::1] cell_start,
                             int64_t[::1] cand) nogil:
    cdef int64_t cx = ci % nx
    cdef int64_t cy = (ci // nx) % ny
    cdef int64_t cz = ci // (nx * ny)
    cdef int64_t m = 0
    cdef int64_t x, y, z, c, a, b, k, key
    cdef int dx, dy, dz
    for dz in range(-1, 2):
        z = cz + dz
        if z < 0 or z >= nz:
            continue
        for dy in range(-1, 2):
            y = cy + dy
            if y < 0 or y >= ny:
                continue
            for dx in range(-1, 2):
                x = cx + dx
                if x < 0 or x >= nx:
                    continue
                c = (z * ny + y) * nx + x
                a = cell_start[c]
                b = cell_start[c + 1]
                for k in range(a, b):
                    cand[m] = order[k]
                    m += 1
    # insertion sort: ascending row index equals ascending gid
    for a in range(1, m):
        key = cand[a]
        b = a - 1
        while b >= 0 and cand[b] > key:
            cand[b + 1] = cand[b]
            b -= 1
        cand[b + 1] = key
    return m


# -- parity-test hooks -------------------------------------------------------


def rng_uniform_k(seed, gid, iteration, tag, subkey=0):
    return _rng_uniform(seed, gid, iteration, tag, subkey)


def unit_vector_k(seed, gid, iteration, tag):
    cdef double x, y, z
    _unit_vector(seed, gid, iteration, tag, &x, &y, &z)
    return (x, y, z)


def pair_key_k(a, b):
    return _pair_key(a, b)


def reflect_k(x, lo, hi):
    return _reflect(x, lo, hi)


# -- model kernels -----------------------------------------------------------


def clustering_step(gid, pos, kind, diam, own_rows, order, cell_start, cells,
                    dims, lo, hi, radius, k_rep, k_adh, r_cut, max_step, seed, iteration):
    cdef const uint64_t[::1] gid_v = gid
    cdef const double[:, ::1] pos_v = pos
    cdef const uint8_t[::1] kind_v = kind
    cdef const double[::1] diam_v = diam
    cdef const int64_t[::1] own_v = own_rows
    cdef const int64_t[::1] order_v = order
    cdef const int64_t[::1] start_v = cell_start
    cdef const int64_t[::1] cells_v = cells
    cdef int nx = dims[0]
    cdef int ny = dims[1]
    cdef int nz = dims[2]
    cdef double lo0 = lo[0], lo1 = lo[1], lo2 = lo[2]
    cdef double hi0 = hi[0], hi1 = hi[1], hi2 = hi[2]
    cdef double radius_c = radius, k_rep_c = k_rep, k_adh_c = k_adh
    cdef double r_cut_c = r_cut, max_step_c = max_step
    cdef uint64_t seed_c = seed, iter_c = iteration
    cdef Py_ssize_t n_own = own_v.shape[0]
    out_arr = np.empty((n_own, 3), dtype=np.float64)
    cand_arr = np.empty(gid_v.shape[0], dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef int64_t[::1] cand = cand_arr
    cdef Py_ssize_t oi
    cdef int64_t i, j, m, t
    cdef uint64_t gi, gj
    cdef double xi, yi, zi, di, fx, fy, fz
    cdef double dxv, dyv, dzv, d2, d, ux, uy, uz, ov, f, m2, s, r2
    cdef int ki
    r2 = radius_c * radius_c
    with nogil:
        for oi in range(n_own):
            i = own_v[oi]
            gi = gid_v[i]
            xi = pos_v[i, 0]
            yi = pos_v[i, 1]
            zi = pos_v[i, 2]
            di = diam_v[i]
            ki = kind_v[i]
            fx = 0.0
            fy = 0.0
            fz = 0.0
            m = _collect(cells_v[i], nx, ny, nz, order_v, start_v, cand)
            for t in range(m):
                j = cand[t]
                if j == i:
                    continue
                dxv = xi - pos_v[j, 0]
                dyv = yi - pos_v[j, 1]
                dzv = zi - pos_v[j, 2]
                d2 = dxv * dxv + dyv * dyv + dzv * dzv
                if d2 > r2:
                    continue
                gj = gid_v[j]
                if d2 == 0.0:
                    d = 0.0
                    _unit_vector(seed_c, _pair_key(gi, gj), iter_c, TAG_SEPARATE,
                                 &ux, &uy, &uz)
                    if gi >= gj:
                        ux = -ux
                        uy = -uy
                        uz = -uz
                else:
                    d = sqrt(d2)
                    ux = dxv / d
                    uy = dyv / d
                    uz = dzv / d
                ov = 0.5 * (di + diam_v[j]) - d
                f = 0.0
                if ov > 0.0:
                    f = k_rep_c * ov
                if ki == kind_v[j] and d <= r_cut_c:
                    f = f - k_adh_c * (r_cut_c - d)
                fx = fx + f * ux
                fy = fy + f * uy
                fz = fz + f * uz
            m2 = fx * fx + fy * fy + fz * fz
            if m2 > max_step_c * max_step_c:
                s = max_step_c / sqrt(m2)
                fx = fx * s
                fy = fy * s
                fz = fz * s
            out[oi, 0] = _reflect(xi + fx, lo0, hi0)
            out[oi, 1] = _reflect(yi + fy, lo1, hi1)
            out[oi, 2] = _reflect(zi + fz, lo2, hi2)
    return out_arr


def sir_step(gid, pos, state, own_rows, order, cell_start, cells,
             dims, lo, hi, radius, beta, gamma, step_scale, seed, iteration):
    cdef const uint64_t[::1] gid_v = gid
    cdef const double[:, ::1] pos_v = pos
    cdef const uint8_t[::1] state_v = state
    cdef const int64_t[::1] own_v = own_rows
    cdef const int64_t[::1] order_v = order
    cdef const int64_t[::1] start_v = cell_start
    cdef const int64_t[::1] cells_v = cells
    cdef int nx = dims[0]
    cdef int ny = dims[1]
    cdef int nz = dims[2]
    cdef double lo0 = lo[0], lo1 = lo[1], lo2 = lo[2]
    cdef double hi0 = hi[0], hi1 = hi[1], hi2 = hi[2]
    cdef double radius_c = radius, beta_c = beta, gamma_c = gamma, step_c = step_scale
    cdef uint64_t seed_c = seed, iter_c = iteration
    cdef Py_ssize_t n_own = own_v.shape[0]
    state_arr = np.empty(n_own, dtype=np.uint8)
    pos_arr = np.empty((n_own, 3), dtype=np.float64)
    cand_arr = np.empty(gid_v.shape[0], dtype=np.int64)
    cdef uint8_t[::1] new_state = state_arr
    cdef double[:, ::1] new_pos = pos_arr
    cdef int64_t[::1] cand = cand_arr
    cdef Py_ssize_t oi
    cdef int64_t i, j, m, t
    cdef uint64_t gi
    cdef int st, ns
    cdef bint infected
    cdef double dxv, dyv, dzv, ux, uy, uz, r2
    r2 = radius_c * radius_c
    with nogil:
        for oi in range(n_own):
            i = own_v[oi]
            gi = gid_v[i]
            st = state_v[i]
            ns = st
            if st == 0:
                infected = False
                m = _collect(cells_v[i], nx, ny, nz, order_v, start_v, cand)
                for t in range(m):
                    j = cand[t]
                    if j == i or state_v[j] != 1:
                        continue
                    dxv = pos_v[i, 0] - pos_v[j, 0]
                    dyv = pos_v[i, 1] - pos_v[j, 1]
                    dzv = pos_v[i, 2] - pos_v[j, 2]
                    if dxv * dxv + dyv * dyv + dzv * dzv > r2:
                        continue
                    if _rng_uniform(seed_c, _pair_key(gi, gid_v[j]), iter_c,
                                    TAG_INFECT, 0) < beta_c:
                        infected = True
                if infected:
                    ns = 1
            elif st == 1:
                if _rng_uniform(seed_c, gi, iter_c, TAG_RECOVER, 0) < gamma_c:
                    ns = 2
            new_state[oi] = ns
            _unit_vector(seed_c, gi, iter_c, TAG_WALK, &ux, &uy, &uz)
            new_pos[oi, 0] = _reflect(pos_v[i, 0] + step_c * ux, lo0, hi0)
            new_pos[oi, 1] = _reflect(pos_v[i, 1] + step_c * uy, lo1, hi1)
            new_pos[oi, 2] = _reflect(pos_v[i, 2] + step_c * uz, lo2, hi2)
    return state_arr, pos_arr
