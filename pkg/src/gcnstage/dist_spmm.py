"""Staged 1D row-partitioned SpMM.

Worker ``i`` owns row block ``i`` of the sparse matrix (tiles ``A^{ij}``)
and row block ``i`` of the dense operand. Stage ``j`` broadcasts ``H^j``
from worker ``j``; every worker then accumulates ``A^{ij} H^j`` into its
output rows. The overlapped variant double-buffers the receive side so the
broadcast of stage ``j+1`` runs on the communication lane while stage ``j``
multiplies on the computation lane.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from gcnstage.collectives import COMM, COMPUTE, Worker
from gcnstage.dense import ShapeError
from gcnstage.partition import TilePlan
from gcnstage.sparse import spmm


class CapacityError(ValueError):
    """A payload does not fit its preallocated buffer."""


def flat_view(buf: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Contiguous ``rows x cols`` view over the front of a flat buffer."""
    need = rows * cols
    if need > buf.size:
        raise CapacityError(f"need {rows}x{cols}={need} elements, buffer holds {buf.size}")
    return buf[:need].reshape(rows, cols)


@dataclass
class DistSpmmPlan:
    """Per-worker state for staged SpMM over one tiled matrix.

    ``bc1``/``bc2`` are flat receive buffers; the overlapped variant
    alternates them by stage parity, the plain variant only touches ``bc1``.
    ``compute_stall_s`` adds a fixed sleep to every multiply stage and exists
    for overlap experiments.
    """

    plan: TilePlan
    my_rank: int
    bc1: np.ndarray
    bc2: np.ndarray | None = None
    overlap: bool = False
    compute_stall_s: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.overlap and self.bc2 is None:
            raise ValueError("overlapped staged SpMM needs a second broadcast buffer")

    @property
    def local_rows(self) -> int:
        return self.plan.p.size(self.my_rank)

    def receive_buffer(self, stage: int, rows: int, cols: int) -> np.ndarray:
        buf = self.bc2 if self.overlap and stage % 2 else self.bc1
        return flat_view(buf, rows, cols)


def _check(worker: Worker, dp: DistSpmmPlan, h_local, out_local) -> None:
    if worker.rank != dp.my_rank:
        raise ValueError(f"plan built for rank {dp.my_rank} used by rank {worker.rank}")
    if worker.size != dp.plan.parts:
        raise ValueError(f"plan has {dp.plan.parts} parts but group has {worker.size} workers")
    rows = dp.local_rows
    if h_local.shape[0] != rows:
        raise ShapeError(f"h_local has {h_local.shape[0]} rows, worker owns {rows}")
    if out_local.shape != (rows, h_local.shape[1]):
        raise ShapeError(f"out_local {out_local.shape} != {(rows, h_local.shape[1])}")
    cols = h_local.shape[1]
    cap = dp.plan.p.max_size() * cols
    for name, buf in (("bc1", dp.bc1), ("bc2", dp.bc2 if dp.overlap else None)):
        if buf is not None and buf.size < cap:
            raise CapacityError(f"{name} holds {buf.size} elements, a stage needs up to {cap}")


def _multiply(dp: DistSpmmPlan, tile, src, out_local):
    def work():
        spmm(tile, src, accumulate=True, out=out_local, threads=dp.threads)
        if dp.compute_stall_s:
            time.sleep(dp.compute_stall_s)

    return work


def _staged(worker: Worker, dp: DistSpmmPlan, h_local, out_local, overlap: bool):
    _check(worker, dp, h_local, out_local)
    p = dp.plan.p
    me = worker.rank
    cols = h_local.shape[1]
    tiles = dp.plan.tiles[me]
    out_local.fill(0)
    spmm_ids: list[int] = []
    for j in range(p.parts):
        rows_j = p.size(j)
        # worker j keeps its own block; peers receive into a broadcast buffer
        buf = h_local if j == me else dp.receive_buffer(j if overlap else 0, rows_j, cols)
        # the buffer is free once the last multiply that read it is done
        reuse = j - 2 if overlap else j - 1
        deps = [spmm_ids[reuse]] if reuse >= 0 else []
        bid = worker.submit(COMM, deps, lambda j=j, buf=buf: worker.broadcast(j, buf), "broadcast", j)
        sid = worker.submit(COMPUTE, [bid], _multiply(dp, tiles[j], buf, out_local), "spmm", j)
        spmm_ids.append(sid)
    worker.sched.wait_all()
    return out_local


def staged_spmm(worker: Worker, dp: DistSpmmPlan, h_local: np.ndarray, out_local: np.ndarray) -> np.ndarray:
    """Rows of ``A @ H`` owned by this worker, one broadcast per stage.

    Every stage ``j`` broadcasts then multiplies; broadcast ``j+1`` waits for
    multiply ``j`` because both use ``bc1``.
    """
    return _staged(worker, dp, h_local, out_local, overlap=False)


def staged_spmm_overlapped(worker: Worker, dp: DistSpmmPlan, h_local: np.ndarray, out_local: np.ndarray) -> np.ndarray:
    """Same result as :func:`staged_spmm` with communication hidden behind compute.

    Multiply ``j`` waits for broadcast ``j``; broadcast ``j+1`` waits only for
    multiply ``j-1``, the last reader of the buffer it overwrites.
    """
    if not dp.overlap:
        raise ValueError("plan was built without overlap buffers")
    return _staged(worker, dp, h_local, out_local, overlap=True)


def run_staged(worker: Worker, dp: DistSpmmPlan, h_local, out_local):
    """Dispatch on ``dp.overlap``."""
    if dp.overlap:
        return staged_spmm_overlapped(worker, dp, h_local, out_local)
    return staged_spmm(worker, dp, h_local, out_local)


def reduce_spmm_reference(worker: Worker, dp: DistSpmmPlan, h_local: np.ndarray, out_local: np.ndarray) -> np.ndarray:
    """Column-distributed variant: partial products are reduced to their owner.

    At stage ``i`` every worker ``j`` multiplies ``A^{ij} H^j`` and the
    partials are summed on worker ``i``. Needs every row of the tile grid,
    so ``dp.plan`` must be fully materialized. Reference only: it allocates
    a partial-product buffer per stage.
    """
    _check(worker, dp, h_local, out_local)
    p = dp.plan.p
    me = worker.rank
    cols = h_local.shape[1]
    for i in range(p.parts):
        row = dp.plan.tiles[i]
        if row is None:
            raise ValueError("reduce variant needs the full tile grid")
        partial = np.zeros((p.size(i), cols), dtype=h_local.dtype)
        with worker.timed("spmm", COMPUTE, i):
            spmm(row[me], h_local, out=partial)
        with worker.timed("reduce", COMM, i):
            worker.reduce_sum(i, partial, out_local if i == me else None)
    return out_local
