"""Simulated multi-device runtime.

``P`` workers are threads of one process. Each worker owns two lanes, a
computation lane (0) and a communication lane (1), modelled as single-thread
executors: work on one lane runs in submission order and cross-lane ordering
only comes from declared dependencies. Data moves between workers only
through the collectives of :class:`DeviceGroup`, which are blocking
rendezvous points and keep byte counters for communication accounting.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

COMPUTE, COMM = 0, 1

EVENT_KINDS = ("broadcast", "spmm", "gemm", "reduce", "activation", "loss", "adam", "other")
COMM_KINDS = ("broadcast", "reduce")

TIMELINE_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["worker", "lane", "stage", "kind", "t_start", "t_end", "id", "deps"],
        "properties": {
            "worker": {"type": "integer", "minimum": 0},
            "lane": {"enum": [COMPUTE, COMM]},
            "stage": {"type": "integer", "minimum": -1},
            "kind": {"enum": list(EVENT_KINDS)},
            "t_start": {"type": "number", "minimum": 0},
            "t_end": {"type": "number", "minimum": 0},
            "id": {"type": "integer", "minimum": 0},
            "deps": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
    },
}


class CollectiveError(RuntimeError):
    pass


class ProtocolError(CollectiveError):
    """Workers issued mismatched collectives."""


class ShutdownError(CollectiveError):
    """The group was aborted or a rendezvous timed out."""


@dataclass
class TimelineEvent:
    worker: int
    lane: int
    stage: int
    kind: str
    t_start: float  # microseconds since the group was created
    t_end: float
    id: int = 0
    deps: list = field(default_factory=list)


class DeviceGroup:
    """``P`` simulated devices joined by an all-pairs mailbox fabric.

    Args:
        size: number of workers.
        link_delay_ns_per_byte: extra latency charged to every participant
            of a collective, proportional to the payload size.
        timeout: seconds a rendezvous may wait before the group is aborted.
    """

    def __init__(self, size: int, link_delay_ns_per_byte: float = 0.0, timeout: float = 120.0):
        if size < 1:
            raise ValueError(f"group size must be positive, got {size}")
        self.size = size
        self.link_delay_ns_per_byte = float(link_delay_ns_per_byte)
        self.timeout = timeout
        self._barrier = threading.Barrier(size, timeout=timeout)
        self._cv = threading.Condition()
        # consecutive collectives alternate between two slot sets: a rank can
        # be at most one collective ahead of the slowest peer
        self._desc = [[None] * size, [None] * size]
        self._slot = [[None] * size, [None] * size]
        self._copied = [0, 0]
        self._gen = [0] * size
        self._inside = [False] * size
        self._events: list[TimelineEvent] = []
        self._events_lock = threading.Lock()
        self._t0 = time.perf_counter_ns()
        self.reset_counters()

    # -- bookkeeping -----------------------------------------------------

    def reset_counters(self) -> None:
        self.bytes_broadcast = 0
        self.bytes_received = [0] * self.size
        self.bytes_reduced = 0

    def clock_us(self) -> float:
        return (time.perf_counter_ns() - self._t0) / 1e3

    def record(self, event: TimelineEvent) -> None:
        with self._events_lock:
            self._events.append(event)

    def events(self) -> list[TimelineEvent]:
        with self._events_lock:
            return sorted(self._events, key=lambda e: (e.worker, e.lane, e.t_start))

    def clear_events(self) -> None:
        with self._events_lock:
            self._events.clear()

    def abort(self) -> None:
        self._barrier.abort()
        with self._cv:
            self._cv.notify_all()

    @property
    def aborted(self) -> bool:
        return self._barrier.broken

    # -- rendezvous ------------------------------------------------------

    def _wait(self) -> None:
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise ShutdownError("device group aborted or collective timed out") from None

    def _enter(self, rank: int, desc: tuple, payload) -> int:
        """Post ``desc``/``payload`` and wait for every rank; return the slot set."""
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} outside group of size {self.size}")
        if self._inside[rank]:
            self.abort()
            raise ProtocolError(f"rank {rank} entered {desc[0]} while inside another collective")
        self._inside[rank] = True
        k = self._gen[rank] % 2
        self._gen[rank] += 1
        self._desc[k][rank] = desc
        self._slot[k][rank] = payload
        try:
            self._wait()
            if any(d != desc for d in self._desc[k]):
                seen = dict(enumerate(self._desc[k]))
                self.abort()
                raise ProtocolError(f"mismatched collectives across ranks: {seen}")
        except BaseException:
            self._inside[rank] = False
            raise
        return k

    def _fail(self, rank: int) -> None:
        self.abort()
        self._inside[rank] = False

    def _leave(self, rank: int) -> None:
        try:
            self._wait()
        finally:
            self._inside[rank] = False

    def _delay(self, nbytes: int) -> None:
        if self.link_delay_ns_per_byte > 0 and nbytes > 0:
            time.sleep(nbytes * self.link_delay_ns_per_byte * 1e-9)

    # -- collectives -----------------------------------------------------

    def barrier(self, rank: int) -> None:
        if self.size > 1:
            self._enter(rank, ("barrier",), None)
            self._inside[rank] = False

    def broadcast(self, rank: int, root: int, buf: np.ndarray) -> None:
        """Copy the root's ``buf`` into every other rank's ``buf``.

        Flat algorithm: every peer reads the root's payload directly. Peers
        return as soon as their own copy and link delay are done; the root
        waits until all copies have been taken before it may reuse ``buf``.
        Only remote deliveries count towards ``bytes_received``.
        """
        if not buf.flags.c_contiguous:
            raise ValueError("broadcast buffer must be contiguous")
        if self.size == 1:
            return
        k = self._enter(rank, ("broadcast", root, buf.nbytes, buf.dtype.str), buf)
        try:
            if rank != root:
                np.copyto(buf.reshape(-1), self._slot[k][root].reshape(-1))
                self.bytes_received[rank] += buf.nbytes
                with self._cv:
                    self._copied[k] += 1
                    self._cv.notify_all()
            else:
                self.bytes_broadcast += buf.nbytes
                with self._cv:
                    done = self._cv.wait_for(
                        lambda: self._copied[k] == self.size - 1 or self.aborted, self.timeout
                    )
                    if not done or self.aborted:
                        raise ShutdownError("broadcast peers did not collect the payload")
                    self._copied[k] = 0
            self._slot[k][rank] = None
            self._inside[rank] = False
            self._delay(buf.nbytes)
        except BaseException:
            self._fail(rank)
            raise

    def all_reduce_sum(self, rank: int, buf: np.ndarray) -> None:
        """Elementwise sum over ranks, accumulated in rank order 0..P-1."""
        if self.size == 1:
            return
        k = self._enter(rank, ("all_reduce", buf.shape, buf.dtype.str), buf)
        try:
            slots = self._slot[k]
            acc = slots[0].copy()
            for r in range(1, self.size):
                acc += slots[r]
            if rank == 0:
                self.bytes_reduced += buf.nbytes
            self._delay(buf.nbytes)
        except BaseException:
            self._fail(rank)
            raise
        self._leave(rank)
        buf[...] = acc

    def reduce_sum(self, rank: int, root: int, buf: np.ndarray, out: np.ndarray | None = None) -> None:
        """Sum every rank's ``buf`` in rank order into the root's ``out``."""
        if self.size == 1:
            if out is not None:
                out[...] = buf
            return
        k = self._enter(rank, ("reduce", root, buf.shape, buf.dtype.str), buf)
        try:
            if rank == root:
                if out is None:
                    raise ValueError("reduce_sum: root needs an output buffer")
                slots = self._slot[k]
                acc = slots[0].copy()
                for r in range(1, self.size):
                    acc += slots[r]
                out[...] = acc
                self.bytes_received[rank] += buf.nbytes * (self.size - 1)
            self._delay(buf.nbytes)
        except BaseException:
            self._fail(rank)
            raise
        self._leave(rank)

    # -- worker lifecycle ------------------------------------------------

    def run(self, fn: Callable[[Worker], object]) -> list:
        """Run ``fn(worker)`` on every rank concurrently; return results by rank.

        The first real failure is re-raised after all workers have stopped;
        follow-on ``ShutdownError``s from aborted peers are suppressed.
        """
        results: list = [None] * self.size
        errors: list = [None] * self.size

        def body(rank: int) -> None:
            worker = Worker(self, rank)
            try:
                results[rank] = fn(worker)
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors[rank] = exc
                self.abort()
            finally:
                worker.close()

        threads = [
            threading.Thread(target=body, args=(r,), name=f"worker-{r}", daemon=True)
            for r in range(self.size)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        real = [e for e in errors if e is not None and not isinstance(e, ShutdownError)]
        if real:
            raise real[0]
        if any(errors):
            raise next(e for e in errors if e is not None)
        return results

    def export_timeline(self, path) -> list[dict]:
        return export_events(self.events(), path)


def export_events(events, path) -> list[dict]:
    """Write events as a JSON array matching ``TIMELINE_SCHEMA``."""
    data = [asdict(e) for e in events]
    with open(path, "w") as f:
        json.dump(data, f)
    return data


class LaneScheduler:
    """Two-lane task graph for one worker.

    ``submit`` returns an integer task id; dependencies must name tasks that
    were already submitted, which rules out cycles by construction.
    """

    def __init__(self, group: DeviceGroup, worker: int):
        self.group = group
        self.worker = worker
        self._lanes = [
            ThreadPoolExecutor(1, thread_name_prefix=f"w{worker}-lane{lane}") for lane in (COMPUTE, COMM)
        ]
        self._futures: dict[int, Future] = {}
        self._next_id = 0
        self._lock = threading.Lock()

    def new_id(self) -> int:
        with self._lock:
            tid = self._next_id
            self._next_id += 1
            return tid

    def submit(self, lane: int, deps: Sequence[int], work: Callable[[], object], kind="other", stage=-1) -> int:
        if lane not in (COMPUTE, COMM):
            raise ValueError(f"unknown lane {lane}")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        deps = list(deps)
        missing = [d for d in deps if d not in self._futures]
        if missing:
            raise KeyError(f"unknown dependency task id(s) {missing}")
        waits = [self._futures[d] for d in deps]
        tid = self.new_id()
        group = self.group

        def run():
            for f in waits:
                f.result()
            t0 = group.clock_us()
            try:
                out = work()
            except BaseException:
                group.abort()
                raise
            group.record(TimelineEvent(self.worker, lane, stage, kind, t0, group.clock_us(), tid, deps))
            return out

        self._futures[tid] = self._lanes[lane].submit(run)
        return tid

    def wait(self, tids: Sequence[int]) -> list:
        return [self._futures[t].result() for t in tids]

    def wait_all(self) -> None:
        for f in list(self._futures.values()):
            f.result()
        self._futures.clear()

    def close(self) -> None:
        for lane in self._lanes:
            lane.shutdown(wait=True, cancel_futures=True)


class Worker:
    """Rank-bound view of a group: collectives, lanes and timing."""

    def __init__(self, group: DeviceGroup, rank: int):
        self.group = group
        self.rank = rank
        self.sched = LaneScheduler(group, rank)

    @property
    def size(self) -> int:
        return self.group.size

    def barrier(self) -> None:
        self.group.barrier(self.rank)

    def broadcast(self, root: int, buf: np.ndarray) -> None:
        self.group.broadcast(self.rank, root, buf)

    def all_reduce_sum(self, buf: np.ndarray) -> None:
        self.group.all_reduce_sum(self.rank, buf)

    def reduce_sum(self, root: int, buf: np.ndarray, out: np.ndarray | None = None) -> None:
        self.group.reduce_sum(self.rank, root, buf, out)

    def submit(self, lane, deps, work, kind="other", stage=-1) -> int:
        return self.sched.submit(lane, deps, work, kind, stage)

    @contextmanager
    def timed(self, kind: str, lane: int = COMPUTE, stage: int = -1):
        """Record a synchronous region run on the calling thread."""
        t0 = self.group.clock_us()
        yield
        self.group.record(TimelineEvent(self.rank, lane, stage, kind, t0, self.group.clock_us(), self.sched.new_id(), []))

    def close(self) -> None:
        self.sched.close()


def audit_timeline(events: Sequence) -> list[str]:
    """Check lane exclusivity and declared dependencies.

    Works on ``TimelineEvent`` objects or on the dicts of an exported file.
    Returns a list of violations (empty when the timeline is legal).
    """
    evs = [e if isinstance(e, dict) else asdict(e) for e in events]
    problems = []
    by_lane: dict = {}
    by_task = {}
    for e in evs:
        if e["t_start"] > e["t_end"]:
            problems.append(f"event {e['worker']}/{e['id']} ends before it starts")
        by_lane.setdefault((e["worker"], e["lane"]), []).append(e)
        by_task[(e["worker"], e["id"])] = e
    for (w, lane), lst in by_lane.items():
        lst.sort(key=lambda e: e["t_start"])
        for a, b in zip(lst, lst[1:]):
            if b["t_start"] < a["t_end"]:
                problems.append(f"worker {w} lane {lane}: task {b['id']} starts before task {a['id']} ends")
    for e in evs:
        for d in e["deps"]:
            dep = by_task.get((e["worker"], d))
            if dep is None:
                problems.append(f"worker {e['worker']} task {e['id']} depends on unrecorded task {d}")
            elif dep["t_end"] > e["t_start"]:
                problems.append(f"worker {e['worker']} task {e['id']} started before dependency {d} ended")
    return problems
