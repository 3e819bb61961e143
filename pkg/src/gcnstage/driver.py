"""Training driver, runtime breakdown and SpMM benchmark."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gcnstage.collectives import COMM_KINDS, DeviceGroup, TimelineEvent
from gcnstage.data import Dataset
from gcnstage.dist_spmm import DistSpmmPlan, run_staged
from gcnstage.model import GcnConfig, GcnWorker, SharedGraph
from gcnstage.partition import Permutation, apply_permutation, random_permutation, tile_rows, uniform_partition
from gcnstage.sparse import add_self_loops, normalize_in_degree, transpose

BUCKETS = ("spmm", "gemm", "activation", "loss", "adam", "comm")


@dataclass
class Prepared:
    graph: SharedGraph
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    perm: Permutation | None


def prepare(dataset: Dataset, cfg: GcnConfig, workers: int) -> Prepared:
    """Optional self loops and permutation, normalization, row partition."""
    a = dataset.graph
    if cfg.add_self_loops:
        a = add_self_loops(a)
    x, labels, mask = dataset.features, dataset.labels, dataset.train_mask()
    perm = None
    if cfg.permute:
        perm = random_permutation(dataset.n, cfg.seed)
        a, x, labels = apply_permutation(a, x, labels, perm)
        mask = mask[perm.inverse]
    a_hat = normalize_in_degree(a).astype(cfg.np_dtype)
    graph = SharedGraph(transpose(a_hat), a_hat, uniform_partition(dataset.n, workers))
    return Prepared(graph, np.ascontiguousarray(x, dtype=cfg.np_dtype), labels, mask, perm)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    wall_us: float

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "accuracy": self.accuracy, "wall_us": self.wall_us}


@dataclass
class TrainResult:
    epochs: list[EpochRecord]
    replicas_identical: list[bool]
    weights: list[np.ndarray]
    logits: np.ndarray | None
    events: list[TimelineEvent]
    group: DeviceGroup
    final_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]


def train(
    dataset: Dataset,
    cfg: GcnConfig,
    workers: int = 1,
    *,
    link_delay_ns_per_byte: float = 0.0,
    compute_stall_s: float = 0.0,
    threads: int = 1,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    collect_logits: bool = False,
) -> TrainResult:
    """Full-batch training on ``workers`` simulated devices.

    One optimizer step is one epoch. Epoch wall time runs from the start of
    the forward pass to the end of the Adam update (slowest worker). The
    loss of epoch ``e`` is measured before that epoch's update.
    """
    if workers < 1:
        raise ValueError("need at least one worker")
    if cfg.layer_dims[0] != dataset.features.shape[1]:
        raise ValueError(f"layer_dims[0]={cfg.layer_dims[0]} but features have {dataset.features.shape[1]} columns")
    if dataset.num_classes > cfg.layer_dims[-1]:
        raise ValueError(f"labels need {dataset.num_classes} classes, output width is {cfg.layer_dims[-1]}")
    prep = prepare(dataset, cfg, workers)
    p = prep.graph.p
    mask_total = int(prep.mask.sum())
    group = DeviceGroup(workers, link_delay_ns_per_byte)

    def body(w):
        lo, hi = p.range(w.rank)
        model = GcnWorker(
            w,
            cfg,
            prep.graph,
            prep.features[lo:hi],
            prep.labels[lo:hi],
            prep.mask[lo:hi],
            mask_total,
            compute_stall_s=compute_stall_s,
            threads=threads,
        )
        walls, stats = [], []
        for epoch in range(cfg.epochs):
            w.barrier()
            t0 = time.perf_counter()
            s = model.train_step()
            walls.append((time.perf_counter() - t0) * 1e6)
            stats.append(s)
            if on_epoch is not None and w.rank == 0:
                on_epoch(EpochRecord(epoch, s.loss, s.correct / s.count, walls[-1]))
        logits = None
        final_acc = None
        if collect_logits:
            logits = model.forward().copy()
            final_acc = model.loss()
            final_acc = final_acc.correct / final_acc.count
        weights = [prm.W.copy() for prm in model.params] if w.rank == 0 else None
        return walls, stats, logits, weights, final_acc

    results = group.run(body)
    records = []
    identical = []
    for e in range(cfg.epochs):
        s0 = results[0][1][e]
        wall = max(r[0][e] for r in results)
        records.append(EpochRecord(e, s0.loss, s0.correct / s0.count, wall))
        identical.append(all(r[1][e].digest == s0.digest for r in results))
    logits = None
    if collect_logits:
        logits = np.vstack([r[2] for r in results])
        if prep.perm is not None:
            logits = logits[prep.perm.forward]  # back to original vertex ids
    return TrainResult(
        epochs=records,
        replicas_identical=identical,
        weights=results[0][3],
        logits=logits,
        events=group.events(),
        group=group,
        final_accuracy=results[0][4],
    )


# -- profiling -------------------------------------------------------------


class NoEventsError(ValueError):
    pass


@dataclass
class BreakdownReport:
    totals_us: dict
    fractions: dict

    def to_dict(self) -> dict:
        return {"totals_us": self.totals_us, "fractions": self.fractions}

    def table(self) -> str:
        lines = [f"{'kernel':<12}{'time_us':>14}{'fraction':>10}"]
        for k in BUCKETS:
            lines.append(f"{k:<12}{self.totals_us[k]:>14.1f}{self.fractions[k]:>10.3f}")
        return "\n".join(lines)


def runtime_breakdown(events) -> BreakdownReport:
    """Sum event durations of both lanes per kernel kind.

    Collective time (including waiting for peers) goes to ``comm``.
    """
    events = list(events)
    if not events:
        raise NoEventsError("no events recorded")
    totals = dict.fromkeys(BUCKETS, 0.0)
    for e in events:
        kind = e.kind if not isinstance(e, dict) else e["kind"]
        dur = (e.t_end - e.t_start) if not isinstance(e, dict) else e["t_end"] - e["t_start"]
        if kind in COMM_KINDS:
            kind = "comm"
        if kind not in totals:
            continue
        totals[kind] += dur
    whole = sum(totals.values())
    if whole <= 0:
        raise NoEventsError("recorded events have zero total duration")
    return BreakdownReport(totals, {k: v / whole for k, v in totals.items()})


def profile_training(dataset: Dataset, cfg: GcnConfig, workers: int = 1, warmup: int = 1, **kw) -> BreakdownReport:
    """Train ``warmup + cfg.epochs`` steps and break down the measured ones."""
    total = GcnConfig.from_dict({**cfg.to_dict(), "epochs": warmup + cfg.epochs})
    res = train(dataset, total, workers, **kw)
    events = res.events
    if warmup and events:
        cut = _after_warmup(events, warmup)
        events = [e for e in events if e.t_start >= cut]
    return runtime_breakdown(events)


def _after_warmup(events, warmup: int) -> float:
    """Timestamp after which every worker has finished ``warmup`` Adam updates."""
    per_worker: dict[int, list[float]] = {}
    for e in events:
        if e.kind == "adam":
            per_worker.setdefault(e.worker, []).append(e.t_end)
    return max(sorted(v)[warmup - 1] for v in per_worker.values())


def stage_table(events) -> list[dict]:
    """Per worker and stage: communication and computation microseconds."""
    rows: dict = {}
    for e in events:
        if e.kind not in ("broadcast", "spmm") or e.stage < 0:
            continue
        r = rows.setdefault((e.worker, e.stage), {"worker": e.worker, "stage": e.stage, "comm_us": 0.0, "comp_us": 0.0})
        r["comm_us" if e.kind == "broadcast" else "comp_us"] += e.t_end - e.t_start
    return [rows[k] for k in sorted(rows, key=lambda k: (k[1], k[0]))]


def write_stage_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["stage", "worker", "comm_us", "comp_us"])
        wr.writeheader()
        for r in rows:
            wr.writerow({k: r[k] for k in wr.fieldnames})


@dataclass
class BenchResult:
    wall_us: list[float]
    events: list[TimelineEvent]
    bytes_received: list[int]
    group: DeviceGroup


def bench_spmm(
    dataset: Dataset,
    workers: int,
    *,
    width: int = 16,
    overlap: bool = False,
    permute: bool = False,
    link_delay_ns_per_byte: float = 0.0,
    compute_stall_s: float = 0.0,
    repeats: int = 3,
    seed: int = 0,
    dtype=np.float64,
) -> BenchResult:
    """Time repeated staged SpMMs of the normalized adjacency with a random dense operand.

    Workers are synchronized before every repetition; the wall time of a
    repetition is that of the slowest worker.
    """
    a = dataset.graph
    if permute:
        a, _, _ = apply_permutation(a, perm=random_permutation(a.rows, seed))
    a_t = transpose(normalize_in_degree(a)).astype(dtype)
    p = uniform_partition(a.rows, workers)
    h = np.random.Generator(np.random.PCG64(seed)).standard_normal((a.rows, width)).astype(dtype)
    group = DeviceGroup(workers, link_delay_ns_per_byte)

    def body(w):
        lo, hi = p.range(w.rank)
        cap = p.max_size() * width
        dp = DistSpmmPlan(
            tile_rows(a_t, p, rows_only=w.rank),
            w.rank,
            np.zeros(cap, dtype=dtype),
            np.zeros(cap, dtype=dtype) if overlap else None,
            overlap=overlap,
            compute_stall_s=compute_stall_s,
        )
        h_local = np.ascontiguousarray(h[lo:hi])
        out = np.zeros((hi - lo, width), dtype=dtype)
        walls = []
        for _ in range(repeats):
            w.barrier()
            t0 = time.perf_counter()
            run_staged(w, dp, h_local, out)
            walls.append((time.perf_counter() - t0) * 1e6)
        return walls

    res = group.run(body)
    walls = [max(r[i] for r in res) for i in range(repeats)]
    return BenchResult(walls, group.events(), list(group.bytes_received), group)
