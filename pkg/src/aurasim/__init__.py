"""Distributed agent-based simulation engine.

Partitions 3D space across ranks, exchanges halo agents each iteration over a
zero-parse wire format with optional compression and delta encoding, migrates
agents between ranks, and rebalances load at runtime. Results are bitwise
independent of the number of ranks and of the transport in use.
"""

from .core import (
    ConfigError,
    GlobalAgentId,
    LocalAgentId,
    SimParams,
    ensure_global_id,
    pack_gid,
    unpack_gid,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GlobalAgentId",
    "LocalAgentId",
    "SimParams",
    "ensure_global_id",
    "pack_gid",
    "unpack_gid",
    "__version__",
]
