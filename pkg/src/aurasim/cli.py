"""Command line front end.

Subcommands:

  run       drive a simulation (all ranks in-process, or one rank of a TCP
            world when --transport tcp --rank N is given)
  bench     compare aura encodings (plain / compress / delta) on one setup
  selftest  quick install check: kernel backend, wire accounting, and a
            1-vs-2-rank equality micro-run

Configuration comes from an optional JSON file plus flags; flags win. The
file mirrors the sections {"params": {...}, "model": "...", "model_params":
{...}, "population": {...}, "run": {...}} (see docs/config-schema.md).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .core import ConfigError, SimParams
from .engine import IterationStats, LB_MODES, RankEngine, WEIGHT_MODES, run_world
from .models import MODELS, make_driver
from .transport import TcpTransport, load_roster


@dataclass
class RunConfig:
    model: str = "clustering"
    model_params: dict = field(default_factory=dict)
    count: int = 1000
    target_lo: tuple | None = None
    target_hi: tuple | None = None
    iterations: int = 10
    compress: bool = False
    delta: bool = False
    lb_mode: str = "none"
    lb_weights: str = "count"
    params: SimParams = field(default_factory=SimParams)

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"model: {self.model!r} is not one of {sorted(MODELS)}")
        if self.count < 0:
            raise ConfigError("population.count: must be >= 0")
        if self.iterations < 0:
            raise ConfigError("run.iterations: must be >= 0")
        if self.compress and self.delta:
            raise ConfigError("run.compress and run.delta are mutually exclusive")
        if self.lb_mode not in LB_MODES:
            raise ConfigError(f"run.lb_mode: {self.lb_mode!r} is not one of {LB_MODES}")
        if self.lb_weights not in WEIGHT_MODES:
            raise ConfigError(
                f"run.lb_weights: {self.lb_weights!r} is not one of {WEIGHT_MODES}"
            )


def _vec3(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(float(p) for p in parts)


def _model_param(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aurasim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run a simulation")
    runp.add_argument("--config", help="JSON config file; flags override it")
    runp.add_argument("--model", choices=sorted(MODELS))
    runp.add_argument(
        "--model-param",
        action="append",
        type=_model_param,
        default=[],
        metavar="NAME=VALUE",
        help="model parameter override (repeatable)",
    )
    runp.add_argument("--count", type=int, help="initial population size")
    runp.add_argument("--target-lo", type=_vec3, metavar="X,Y,Z")
    runp.add_argument("--target-hi", type=_vec3, metavar="X,Y,Z")
    runp.add_argument("--iterations", type=int)
    runp.add_argument("--seed", type=int)
    runp.add_argument("--ranks", type=int)
    runp.add_argument("--space-lo", type=_vec3, metavar="X,Y,Z")
    runp.add_argument("--space-hi", type=_vec3, metavar="X,Y,Z")
    runp.add_argument("--radius", type=float, help="interaction radius")
    runp.add_argument("--box-factor", type=int)
    runp.add_argument("--ref-interval", type=int, help="delta reference refresh period")
    runp.add_argument("--lb-interval", type=int)
    runp.add_argument("--batch-bytes", type=int)
    runp.add_argument("--compress", action="store_true", default=None)
    runp.add_argument("--delta", action="store_true", default=None)
    runp.add_argument("--lb", choices=LB_MODES, dest="lb_mode")
    runp.add_argument("--lb-weights", choices=WEIGHT_MODES)
    runp.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    runp.add_argument("--roster", help="JSON roster file (tcp transport)")
    runp.add_argument("--rank", type=int, help="this process's rank (tcp transport)")
    runp.add_argument("--out", help="output directory for CSV dumps")
    runp.add_argument("--quiet", action="store_true")

    benchp = sub.add_parser("bench", help="compare aura encodings")
    benchp.add_argument("--model", choices=sorted(MODELS), default="clustering")
    benchp.add_argument(
        "--model-param", action="append", type=_model_param, default=[], metavar="NAME=VALUE"
    )
    benchp.add_argument("--count", type=int, default=2000)
    benchp.add_argument("--iterations", type=int, default=20)
    benchp.add_argument("--ranks", type=int, default=4)
    benchp.add_argument("--seed", type=int, default=1)
    benchp.add_argument("--space-hi", type=_vec3, default=(50.0, 50.0, 50.0), metavar="X,Y,Z")
    benchp.add_argument("--radius", type=float, default=5.0)
    benchp.add_argument("--out", help="write the table as CSV here")

    sub.add_parser("selftest", help="quick install check")
    return p


# ---------------------------------------------------------------------------
# Config assembly
# ---------------------------------------------------------------------------

_PARAM_FLAGS = {
    "seed": "seed",
    "ranks": "rank_count",
    "space_lo": "space_lo",
    "space_hi": "space_hi",
    "radius": "interaction_radius",
    "box_factor": "box_factor",
    "ref_interval": "reference_interval",
    "lb_interval": "lb_interval",
    "batch_bytes": "batch_bytes",
}


def assemble_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {args.config} is not valid JSON: {exc}") from exc
        unknown = set(doc) - {"params", "model", "model_params", "population", "run"}
        if unknown:
            raise ConfigError(f"config: unknown sections {sorted(unknown)}")

    param_fields = dict(doc.get("params", {}))
    for flag, name in _PARAM_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            param_fields[name] = value
    params = SimParams.from_dict(param_fields)

    pop = doc.get("population", {})
    run = doc.get("run", {})
    cfg = RunConfig(
        model=args.model or doc.get("model", "clustering"),
        model_params=dict(doc.get("model_params", {})),
        count=args.count if args.count is not None else pop.get("count", 1000),
        target_lo=args.target_lo or (tuple(pop["target_lo"]) if "target_lo" in pop else None),
        target_hi=args.target_hi or (tuple(pop["target_hi"]) if "target_hi" in pop else None),
        iterations=args.iterations if args.iterations is not None else run.get("iterations", 10),
        compress=args.compress if args.compress is not None else run.get("compress", False),
        delta=args.delta if args.delta is not None else run.get("delta", False),
        lb_mode=args.lb_mode or run.get("lb_mode", "none"),
        lb_weights=args.lb_weights or run.get("lb_weights", "count"),
        params=params,
    )
    cfg.model_params.update(dict(args.model_param))
    cfg.validate()
    make_driver(cfg.model, cfg.model_params)  # surface model param errors early
    return cfg


# ---------------------------------------------------------------------------
# Output writing
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_rank_outputs(out_dir: Path, engine: RankEngine) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out_dir / f"final_rank{engine.rank}.csv",
        engine.driver.dump_header,
        engine.final_rows(),
    )
    _write_csv(
        out_dir / f"stats_rank{engine.rank}.csv",
        IterationStats.header(),
        [s.row() for s in engine.stats],
    )
    series = getattr(engine.driver, "series", None)
    if engine.rank == 0 and series:
        _write_csv(out_dir / "series.csv", ("iteration", "s", "i", "r"), series)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = assemble_config(args)
    engine_kwargs = dict(
        compress=cfg.compress,
        delta=cfg.delta,
        lb_mode=cfg.lb_mode,
        lb_weights=cfg.lb_weights,
    )
    started = time.perf_counter()
    if args.transport == "tcp":
        if args.roster is None or args.rank is None:
            raise ConfigError("transport tcp: --roster and --rank are required")
        roster = load_roster(args.roster)
        if cfg.params.rank_count != len(roster):
            raise ConfigError(
                f"params.rank_count {cfg.params.rank_count} != roster size {len(roster)}"
            )
        tr = TcpTransport(args.rank, roster, cfg.params.batch_bytes)
        try:
            engine = RankEngine(cfg.params, make_driver(cfg.model, cfg.model_params), tr, **engine_kwargs)
            engine.init_population(cfg.count, cfg.target_lo, cfg.target_hi)
            engine.run(cfg.iterations)
        except BaseException:
            tr.abort("rank failed")
            raise
        finally:
            tr.close()
        engines = [engine]
    else:
        engines = run_world(
            cfg.params,
            lambda: make_driver(cfg.model, cfg.model_params),
            cfg.count,
            cfg.iterations,
            target_lo=cfg.target_lo,
            target_hi=cfg.target_hi,
            **engine_kwargs,
        )
    wall = time.perf_counter() - started
    if args.out:
        for engine in engines:
            write_rank_outputs(Path(args.out), engine)
    if not args.quiet:
        total = sum(len(e.store) for e in engines)
        print(
            f"model={cfg.model} ranks={cfg.params.rank_count} iterations={cfg.iterations}"
            f" agents={total} wall={wall:.2f}s"
            + (f" out={args.out}" if args.out else "")
        )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    rows = []
    for mode, kwargs in (
        ("plain", {}),
        ("compress", {"compress": True}),
        ("delta", {"delta": True}),
    ):
        params = SimParams(
            space_hi=args.space_hi,
            interaction_radius=args.radius,
            rank_count=args.ranks,
            seed=args.seed,
        )
        started = time.perf_counter()
        engines = run_world(
            params,
            lambda: make_driver(args.model, dict(args.model_param)),
            args.count,
            args.iterations,
            **kwargs,
        )
        wall = time.perf_counter() - started
        raw = sum(s.aura_raw_bytes for e in engines for s in e.stats)
        wire = sum(s.aura_wire_bytes for e in engines for s in e.stats)
        rows.append(
            (
                mode,
                f"{wall:.2f}",
                str(raw),
                str(wire),
                f"{wire / raw:.3f}" if raw else "n/a",
            )
        )
    header = ("mode", "wall_s", "aura_raw_bytes", "aura_wire_bytes", "wire_to_raw")
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    if args.out:
        _write_csv(Path(args.out), header, rows)
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    from . import kernels
    from .core import pair_key, reflect_closed, rng_uniform
    from .wire import AgentBatch, decode, encode_bytes, node_equal
    from .models import ClusterCell

    failures = 0

    def report(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        if not ok:
            failures += 1
        tail = f"  ({detail})" if detail else ""
        print(f"{'PASS' if ok else 'FAIL'}  {name}{tail}")

    report("kernel backend", True, kernels.BACKEND)

    ok = all(
        kernels.rng_uniform_k(9, g, it, 3, s) == rng_uniform(9, g, it, 3, s)
        and kernels.pair_key_k(g, g + it) == pair_key(g, g + it)
        and kernels.reflect_k(g * 0.37 - 5.0, 0.0, 10.0) == reflect_closed(g * 0.37 - 5.0, 0.0, 10.0)
        for g in range(200)
        for it, s in ((1, 0), (7, 3))
    )
    report("kernel/core rng parity", ok)

    batch = AgentBatch([ClusterCell(((1 << 22) + k) << 40, (k * 1.5, 2.0, 3.0), k & 1, 1.0) for k in range(8)])
    msg = decode(encode_bytes(batch))
    ok = node_equal(msg.root, batch) and msg.live_count == 9
    msg.release_all()
    report("wire roundtrip and block accounting", ok and msg.live_count == 0)

    def tiny(ranks):
        params = SimParams(
            space_hi=(18.0, 18.0, 18.0), interaction_radius=3.0, rank_count=ranks, seed=4
        )
        engines = run_world(
            params, lambda: make_driver("clustering", {"r_cut": 2.0, "max_step": 0.4}), 60, 4
        )
        return sorted(r for e in engines for r in e.final_rows())

    report("1-rank equals 2-rank", tiny(1) == tiny(2))
    return 1 if failures else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "bench":
            return cmd_bench(args)
        return cmd_selftest(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
