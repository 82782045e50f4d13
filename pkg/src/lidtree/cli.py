"""Command-line entry point: serve, bench, node-dump and memsim."""

from __future__ import annotations

import argparse
import csv
import logging
import random
import sys
from dataclasses import replace
from typing import Any

from .bench import format_table, load, render_figures, run, workload, write_csv
from .bench.workload import KeySpace
from .memsim import SimConfig, Simulator, flatten_stats, read_trace, write_trace
from .node_format import format_node
from .service.client import Client
from .service.protocol import Opcode
from .store import Store, StoreConfig, load_config_file


def _on_off(text: str) -> bool:
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on or off")


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise argparse.ArgumentTypeError("expected host:port")
    return host or "127.0.0.1", int(port)


def _load_sections(path: str | None) -> tuple[dict[str, Any], dict[str, Any]]:
    """(store settings, simulator settings) from a config file."""
    if not path:
        return {}, {}
    data = load_config_file(path)
    if "store" in data or "sim" in data:
        return dict(data.get("store") or {}), dict(data.get("sim") or {})
    return data, {}


def _store_config(args) -> StoreConfig:
    store_cfg, _ = _load_sections(getattr(args, "config", None))
    if args.mvcc is not None:
        store_cfg["mvcc"] = args.mvcc
    if args.log_block_threshold is not None:
        store_cfg["log_threshold"] = args.log_block_threshold
    return StoreConfig.from_mapping(store_cfg)


def _sim_config(args) -> SimConfig:
    _, sim_cfg = _load_sections(getattr(args, "config", None))
    if getattr(args, "sim_config", None):
        sim_cfg.update(load_config_file(args.sim_config))
    cfg = SimConfig.from_mapping(sim_cfg)
    if getattr(args, "cache_mb", None) is not None:
        cfg = replace(cfg, cache_bytes=int(args.cache_mb * (1 << 20)))
    if getattr(args, "no_balancer", False):
        cfg = replace(cfg, balancer=False)
    if getattr(args, "no_root_cache", False):
        cfg = replace(cfg, root_cache=False)
    return cfg


def _store_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mvcc", type=_on_off, default=None, metavar="on|off",
                   help="snapshot reads (default on)")
    p.add_argument("--log-block-threshold", type=int, default=None, metavar="BYTES",
                   help="leaf log size that triggers a merge (default 512)")
    p.add_argument("--config", help="YAML or JSON file with 'store' and 'sim' sections")


def _workload_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workload", default="A", help="A-F or cloud")
    p.add_argument("--read-pct", type=float, default=None)
    p.add_argument("--dist", choices=("uniform", "zipfian", "latest"), default=None)
    p.add_argument("--keys", type=int, default=None, help="number of pairs to load")
    p.add_argument("--key-size", type=int, default=None)
    p.add_argument("--value-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ops", type=int, default=None, help="operations in the run phase")
    p.add_argument("--duration", type=float, default=None, help="run time limit in seconds")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--pipeline", type=int, default=None, help="requests in flight per client")
    p.add_argument("--out", help="results CSV (figures are written alongside)")
    p.add_argument("--format", choices=("table", "csv"), default="table")


def _spec(args):
    return workload(args.workload, read_pct=args.read_pct, distribution=args.dist,
                    key_count=args.keys, key_size=args.key_size, value_size=args.value_size,
                    seed=args.seed, operations=args.ops, duration=args.duration,
                    threads=args.threads, pipeline_depth=args.pipeline)


def _emit(rows: list[dict[str, Any]], args) -> None:
    if args.format == "csv":
        writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    else:
        print(format_table(rows))
    if args.out:
        path = write_csv(rows, args.out)
        for fig in render_figures(path):
            print(f"wrote {fig}")
        print(f"wrote {path}")


def cmd_serve(args) -> int:
    from .memsim import SimBackend
    from .service.server import serve

    store = Store(_store_config(args))
    if args.keys:
        spec = workload("A", key_count=args.keys, key_size=args.key_size or 16,
                        value_size=args.value_size or 16, seed=args.seed or 1)
        _, report = load(spec, store)
        print(report.describe(), flush=True)
    if args.backend == "sim":
        store.reader.backend = SimBackend(store, _sim_config(args))
    print(f"serving on {args.listen}", flush=True)
    try:
        serve(store, args.listen, args.workers)
    finally:
        store.close()
    return 0


def _remote_load(spec, address: tuple[str, int]) -> KeySpace:
    space = KeySpace(spec, random.Random(spec.seed))
    items = space.populate(spec.key_count)
    with Client(*address) as client:
        client.pipeline(client.request(Opcode.PUT, k, value=v) for k, v in items)
    return space


def cmd_bench(args) -> int:
    if args.phase == "report":
        rows = _read_rows(args.input)
        print(format_table(rows))
        for fig in render_figures(args.input):
            print(f"wrote {fig}")
        return 0
    spec = _spec(args)
    if args.connect:
        if args.phase == "load":
            _remote_load(spec, args.connect)
            print(f"loaded {spec.key_count} pairs into {args.connect[0]}:{args.connect[1]}")
            return 0
        space = KeySpace(spec, random.Random(spec.seed))
        space.populate(spec.key_count)
        metrics = run(spec, space, connect=args.connect)
        _emit([metrics.row()], args)
        return 0
    with Store(_store_config(args)) as store:
        space, report = load(spec, store)
        print(report.describe())
        if args.phase == "load":
            row = {"workload": spec.name, "pairs": report.pairs, "height": report.height,
                   "footprint_bytes": report.footprint_bytes, "data_bytes": report.data_bytes,
                   "ratio": round(report.ratio, 4) if report.ratio is not None else "n/a",
                   "seconds": round(report.seconds, 4)}
            _emit([row], args)
            return 0
        sim_cfg = _sim_config(args) if args.backend == "sim" else None
        metrics = run(spec, space, store=store, backend=args.backend, sim_config=sim_cfg)
        _emit([metrics.row()], args)
    return 0


def _read_rows(path: str) -> list[dict[str, Any]]:
    from .bench.report import read_csv

    rows = read_csv(path)
    if not rows:
        raise SystemExit(f"no rows in {path}")
    return rows


def cmd_node_dump(args) -> int:
    spec = workload("A", key_count=args.keys, key_size=args.key_size, value_size=args.value_size,
                    seed=args.seed)
    with Store(_store_config(args), background_sweep=False) as store:
        load(spec, store)
        table = store.table
        if args.all:
            lids = sorted(table.write)[: args.limit]
        elif args.lid is not None:
            lids = [args.lid]
        else:
            lids = [table.root[0]]
        for lid in lids:
            addr = table.resolve(lid)
            print(format_node(store.arena.buffer(addr), lid=lid, addr=addr))
    return 0


def cmd_memsim(args) -> int:
    cfg = _sim_config(args)
    rows = []
    if args.replay:
        sim = Simulator(cfg)
        result = sim.replay(read_trace(args.replay), args.concurrency, args.warmup)
    else:
        spec = workload(args.workload, key_count=args.keys, key_size=args.key_size,
                        value_size=args.value_size, seed=args.seed)
        with Store(_store_config(args), background_sweep=False) as store:
            space, report = load(spec, store)
            print(report.describe())
            rng = random.Random(args.seed + 1)
            keys = space.sorted_loaded
            ops = []
            for _ in range(args.ops):
                pos = rng.randrange(len(keys))
                if args.scan:
                    end = min(len(keys) - 1, pos + rng.randint(1, 100) - 1)
                    ops.append(("scan", keys[pos], keys[end]))
                else:
                    ops.append(("get", keys[pos]))
            sim = Simulator(cfg, store)
            result = sim.run(ops, args.concurrency, args.warmup, trace=bool(args.trace))
            sim.close()
        if args.trace:
            write_trace(result.trace, args.trace)
            print(f"wrote {args.trace}")
    stats = result.stats
    row = {"cache_mb": cfg.cache_bytes / (1 << 20), "balancer": cfg.balancer,
           "root_cache": cfg.root_cache, **flatten_stats(stats)}
    rows.append(row)
    summary = {
        "requests": row["requests"],
        "throughput": row["throughput"],
        "p50_us": row["latency_p50"] * 1e6,
        "p99_us": row["latency_p99"] * 1e6,
        "interior_hit_rate": row["cache_hit_rate"],
        "host_GBps": row["host_bandwidth"] / 1e9,
        "board_GBps": row["board_bandwidth"] / 1e9,
        "diverted": row["cache_diverted"],
    }
    print(format_table([summary], list(summary)))
    if args.out:
        path = write_csv(rows, args.out)
        for fig in render_figures(path):
            print(f"wrote {fig}")
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidtree", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the key-value server")
    p.add_argument("--listen", default="127.0.0.1:7400", help="host:port")
    p.add_argument("--backend", choices=("direct", "sim"), default="direct")
    p.add_argument("--cache-mb", type=float, default=None,
                   help="interior cache size for the simulated backend")
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--keys", type=int, default=0, help="preload this many random pairs")
    p.add_argument("--key-size", type=int, default=16)
    p.add_argument("--value-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    _store_options(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="load, run or report a workload")
    p.add_argument("phase", choices=("load", "run", "report"))
    p.add_argument("--connect", type=_address, help="drive a server instead of a local store")
    p.add_argument("--backend", choices=("direct", "sim"), default="direct")
    p.add_argument("--cache-mb", type=float, default=None)
    p.add_argument("--in", dest="input", help="results CSV for the report phase")
    _workload_options(p)
    _store_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("node-dump", help="print nodes of a freshly loaded tree")
    p.add_argument("--keys", type=int, default=1000)
    p.add_argument("--key-size", type=int, default=16)
    p.add_argument("--value-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--lid", type=int, help="node to print (default: the root)")
    p.add_argument("--all", action="store_true", help="print every node")
    p.add_argument("--limit", type=int, default=1000)
    _store_options(p)
    p.set_defaults(func=cmd_node_dump)

    p = sub.add_parser("memsim", help="simulate the memory subsystem for a read workload")
    p.add_argument("--workload", default="C")
    p.add_argument("--keys", type=int, default=128 * 1024)
    p.add_argument("--key-size", type=int, default=16)
    p.add_argument("--value-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--ops", type=int, default=20000)
    p.add_argument("--scan", action="store_true", help="issue scans instead of gets")
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--concurrency", type=int, default=64)
    p.add_argument("--cache-mb", type=float, default=None)
    p.add_argument("--no-balancer", action="store_true")
    p.add_argument("--no-root-cache", action="store_true")
    p.add_argument("--sim-config", help="YAML or JSON simulator settings")
    p.add_argument("--trace", help="write the fetch trace CSV here")
    p.add_argument("--replay", help="replay a trace CSV instead of running a store")
    p.add_argument("--out", help="stats CSV (figures are written alongside)")
    _store_options(p)
    p.set_defaults(func=cmd_memsim)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
