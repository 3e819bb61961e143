"""Command line entry point: ``gcnstage <subcommand> [flags]``.

Metrics go to stdout as one JSON object per line; human-readable tables go
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from gcnstage.collectives import export_events
from gcnstage.costmodel import STRATEGIES, Topology, UnsupportedError, cost_model
from gcnstage.data import Dataset, degree_sort_order, load_dataset, synth_graph, two_block_graph, write_edge_list, write_labels
from gcnstage.dense import write_dense
from gcnstage.driver import bench_spmm, runtime_breakdown, stage_table, train, write_stage_csv
from gcnstage.model import ConfigError, GcnConfig
from gcnstage.partition import Permutation, apply_permutation, balance_stats, random_permutation, tile_rows, uniform_partition
from gcnstage.sparse import add_self_loops, transpose

log = logging.getLogger("gcnstage")


def emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", "-P", type=int, default=1, help="number of simulated workers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["f32", "f64"], default=None)
    p.add_argument("--permute", action="store_true", default=None, help="randomly permute vertices")
    p.add_argument("--overlap", action="store_true", default=None, help="overlap broadcast with SpMM")
    p.add_argument("--skip-first-spmm", action="store_true", default=None, help="skip the first layer's backward SpMM")
    p.add_argument("--order-swap", action="store_true", default=None, help="run SpMM before GeMM in widening layers")
    p.add_argument("--link-delay-ns-per-byte", type=float, default=0.0)
    p.add_argument("--timeline", type=Path, help="write the event timeline JSON here")
    p.add_argument("--breakdown", type=Path, help="write the runtime breakdown JSON here")
    p.add_argument("-v", "--verbose", action="store_true")


def _dataset_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset (files, or a generator)")
    g.add_argument("--graph", type=Path, help="Matrix Market or edge-list file")
    g.add_argument("--features", type=Path, help="MGDM binary or CSV")
    g.add_argument("--labels", type=Path, help="one integer per line")
    g.add_argument("--masks", type=Path, help="JSON with train/val/test vertex lists")
    g.add_argument("--self-loops", action="store_true", help="add self loops to the graph")
    g.add_argument("--synth", metavar="N,DEG,EXP", help="generate a power-law graph instead of reading files")
    g.add_argument("--two-block", type=int, metavar="N", help="generate a two-community graph of N vertices")
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--classes", type=int, default=4)


def _load(args) -> Dataset:
    ds = _generate(args)
    if ds is None:
        if not (args.graph and args.features and args.labels):
            raise SystemExit("need --graph, --features and --labels, or --synth/--two-block")
        return load_dataset(args.graph, args.features, args.labels, args.masks, self_loops=args.self_loops)
    if args.self_loops:
        ds = Dataset(add_self_loops(ds.graph), ds.features, ds.labels, ds.masks, ds.name)
    return ds


def _generate(args) -> Dataset | None:
    if args.synth:
        try:
            n, deg, exp = args.synth.split(",")
            return synth_graph(int(n), float(deg), float(exp), args.seed, feature_dim=args.feature_dim, num_classes=args.classes)
        except ValueError as exc:
            raise SystemExit(f"--synth: {exc}") from None
    if args.two_block:
        return two_block_graph(args.two_block, args.seed, feature_dim=args.feature_dim)
    return None


def _config(args, ds: Dataset) -> GcnConfig:
    d = {}
    if args.config:
        with open(args.config) as f:
            d = json.load(f)
    if "layer_dims" not in d:
        hidden = [int(x) for x in args.hidden.split(",") if x] if args.hidden else [16]
        d["layer_dims"] = [int(ds.features.shape[1]), *hidden, max(ds.num_classes, 2)]
    overrides = {
        "permute": args.permute,
        "overlap": args.overlap,
        "skip_first_backward_spmm": args.skip_first_spmm,
        "order_swap": args.order_swap,
        "dtype": args.dtype,
        "epochs": args.epochs,
        "lr": args.lr,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    d.setdefault("seed", args.seed)
    return GcnConfig.from_dict(d)


def cmd_train(args) -> int:
    ds = _load(args)
    cfg = _config(args, ds)
    log.info("dataset %s, config %s", ds.summary(), cfg.to_dict())

    def on_epoch(rec):
        row = rec.as_dict()
        if args.deterministic:
            del row["wall_us"]
        emit(row)

    res = train(ds, cfg, args.workers, link_delay_ns_per_byte=args.link_delay_ns_per_byte, on_epoch=on_epoch)
    summary = {
        "summary": True,
        "epochs": cfg.epochs,
        "final_loss": res.losses[-1] if res.epochs else None,
        "replicas_identical": all(res.replicas_identical),
        "bytes_broadcast": int(res.group.bytes_broadcast),
    }
    if not args.deterministic and res.epochs:
        summary["mean_epoch_us"] = float(np.mean([e.wall_us for e in res.epochs]))
    emit(summary)
    _artifacts(args, res.events)
    return 0


def _artifacts(args, events) -> None:
    if args.timeline:
        export_events(events, args.timeline)
    if args.breakdown:
        rep = runtime_breakdown(events)
        with open(args.breakdown, "w") as f:
            json.dump(rep.to_dict(), f, indent=2)
        print(rep.table(), file=sys.stderr)


def cmd_bench_spmm(args) -> int:
    ds = _load(args)
    res = bench_spmm(
        ds,
        args.workers,
        width=args.width,
        overlap=bool(args.overlap),
        permute=bool(args.permute),
        link_delay_ns_per_byte=args.link_delay_ns_per_byte,
        repeats=args.repeats,
        seed=args.seed,
        dtype=np.float32 if args.dtype == "f32" else np.float64,
    )
    for i, w in enumerate(res.wall_us):
        emit({"repeat": i, "wall_us": w})
    emit({"summary": True, "median_us": float(np.median(res.wall_us)), "bytes_received": sum(res.bytes_received)})
    if args.csv:
        write_stage_csv(args.csv, stage_table(res.events))
    _artifacts(args, res.events)
    return 0


def cmd_partition_stats(args) -> int:
    ds = _load(args)
    a = ds.graph
    if args.permute:
        a, _, _ = apply_permutation(a, perm=random_permutation(a.rows, args.seed))
    elif args.degree_sort:
        a, _, _ = apply_permutation(a, perm=Permutation.from_forward(degree_sort_order(a)))
    # forward SpMM multiplies by the transpose, so tile that orientation
    stats = balance_stats(tile_rows(transpose(a), uniform_partition(a.rows, args.workers)))
    stats["max_stage_ratio"] = max(stats["stage_ratio"])
    if not args.tiles:
        del stats["per_tile_nnz"]
    emit(stats)
    return 0


def cmd_cost_model(args) -> int:
    if args.topology == "custom":
        topo = Topology("custom", args.links, args.bandwidth, args.group_bcast_links, args.group_reduce_links)
    else:
        topo = Topology.named(args.topology, args.bandwidth)
    strategies = STRATEGIES if args.strategy == "all" else (args.strategy,)
    try:
        for s in strategies:
            t = cost_model(args.n, args.d, args.workers, topo, s, scalar_bytes=args.scalar_bytes)
            emit({"topology": topo.kind, "strategy": s, "P": args.workers, "time": str(t), "time_float": float(t)})
    except UnsupportedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_synth(args) -> int:
    if args.two_block:
        ds = two_block_graph(args.two_block, args.seed, feature_dim=args.feature_dim)
    else:
        ds = synth_graph(args.n, args.avg_degree, args.exponent, args.seed, feature_dim=args.feature_dim, num_classes=args.classes)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_edge_list(out / "graph.el", ds.graph)
    write_dense(out / "features.mgdm", ds.features)
    write_labels(out / "labels.txt", ds.labels)
    emit({**ds.summary(), "out": str(out)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gcnstage", description="Full-batch GCN training on simulated workers")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train a GCN and stream per-epoch metrics")
    _common(p)
    _dataset_args(p)
    p.add_argument("--config", type=Path, help="JSON training config")
    p.add_argument("--hidden", help="comma-separated hidden widths when no config is given (default 16)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--deterministic", action="store_true", help="omit timings so output is bitwise reproducible")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench-spmm", help="time the staged SpMM and decompose it per stage")
    _common(p)
    _dataset_args(p)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--csv", type=Path, help="per-stage comm/comp CSV")
    p.set_defaults(func=cmd_bench_spmm)

    p = sub.add_parser("partition-stats", help="nonzero balance of the tile grid")
    _common(p)
    _dataset_args(p)
    p.add_argument("--degree-sort", action="store_true", help="order vertices by decreasing degree first")
    p.add_argument("--tiles", action="store_true", help="include the per-tile nnz grid")
    p.set_defaults(func=cmd_partition_stats)

    p = sub.add_parser("cost-model", help="analytical 1D vs 1.5D communication time")
    _common(p)
    p.add_argument("--topology", choices=["asymmetric-6-link", "switched-12-link", "custom"], default="asymmetric-6-link")
    p.add_argument("--strategy", choices=[*STRATEGIES, "all"], default="all")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--scalar-bytes", type=int, default=1)
    p.add_argument("--bandwidth", type=float, default=1, help="bytes/s per link (1 = time in units of nd/l)")
    p.add_argument("--links", type=int, default=6, help="custom topology: links per device")
    p.add_argument("--group-bcast-links", type=int)
    p.add_argument("--group-reduce-links", type=int)
    p.set_defaults(func=cmd_cost_model, workers=8)

    p = sub.add_parser("synth", help="write a synthetic dataset to a directory")
    _common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--avg-degree", type=float, default=8.0)
    p.add_argument("--exponent", type=float, default=0.5)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--two-block", type=int, metavar="N", help="two-community graph instead")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
