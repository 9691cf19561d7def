"""Kernel backend selection.

Two interchangeable lanes implement the model kernels: a Cython extension
(``_speedups``) and a pure-Python reference (``pure``).  Both produce bitwise
identical results; the compiled lane is just faster.  Selection happens once
at import time:

* ``AURASIM_PURE_KERNELS=1`` in the environment forces the pure lane.
* Otherwise the compiled lane is used when the extension imported cleanly,
  with a silent fallback to pure when it did not (e.g. no compiler at
  install time).

``BACKEND`` names the lane that won so tests and benchmarks can report it.
"""

import os

import numpy as np

from . import pure as _pure

if os.environ.get("AURASIM_PURE_KERNELS") == "1":
    _impl = _pure
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pure

BACKEND = _impl.NAME


def bin_rows(pos, lo, cell_edge, dims):
    """Bin agent rows into grid cells and build a CSR index over cells.

    Returns ``(cells, order, cell_start)`` where ``cells[i]`` is the linear
    cell of row ``i``, ``order`` lists rows grouped by cell (stable, so rows
    stay gid-ascending within a cell when the input is gid-sorted), and
    ``cell_start`` has length ``ncells + 1`` with the usual CSR convention
    that cell ``c`` owns ``order[cell_start[c]:cell_start[c + 1]]``.
    """
    nx, ny, nz = dims
    ix = np.clip((pos[:, 0] - lo[0]) // cell_edge, 0, nx - 1).astype(np.int64)
    iy = np.clip((pos[:, 1] - lo[1]) // cell_edge, 0, ny - 1).astype(np.int64)
    iz = np.clip((pos[:, 2] - lo[2]) // cell_edge, 0, nz - 1).astype(np.int64)
    cells = (iz * ny + iy) * nx + ix
    ncells = nx * ny * nz
    order = np.argsort(cells, kind="stable").astype(np.int64)
    cell_start = np.zeros(ncells + 1, dtype=np.int64)
    np.cumsum(np.bincount(cells, minlength=ncells), out=cell_start[1:])
    return cells, order, cell_start


clustering_step = _impl.clustering_step
sir_step = _impl.sir_step
rng_uniform_k = _impl.rng_uniform_k
unit_vector_k = _impl.unit_vector_k
pair_key_k = _impl.pair_key_k
reflect_k = _impl.reflect_k

__all__ = [
    "BACKEND",
    "bin_rows",
    "clustering_step",
    "sir_step",
    "rng_uniform_k",
    "unit_vector_k",
    "pair_key_k",
    "reflect_k",
]
