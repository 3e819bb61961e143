import json
import threading
import time

import jsonschema
import numpy as np
import pytest

from gcnstage.collectives import (
    COMM,
    COMPUTE,
    TIMELINE_SCHEMA,
    DeviceGroup,
    ProtocolError,
    ShutdownError,
    TimelineEvent,
    audit_timeline,
)


@pytest.mark.parametrize("P", [1, 2, 3, 5])
def test_broadcast_from_every_root(P):
    group = DeviceGroup(P)

    def body(w):
        got = []
        for root in range(P):
            buf = np.full((3, 2), float(w.rank)) if w.rank == root else np.zeros((3, 2))
            w.broadcast(root, buf)
            got.append(buf.copy())
        return got

    res = group.run(body)
    for r in range(P):
        for root in range(P):
            np.testing.assert_array_equal(res[r][root], np.full((3, 2), float(root)))
    nbytes = 3 * 2 * 8
    assert group.bytes_broadcast == (P * nbytes if P > 1 else 0)
    # every rank receives every payload except its own
    assert group.bytes_received == [(P - 1) * nbytes if P > 1 else 0] * P


def test_all_reduce_is_rank_ordered_and_identical_everywhere():
    P = 4
    rng = np.random.default_rng(0)
    parts = [rng.standard_normal(50) * 10.0 ** rng.integers(-8, 8, 50) for _ in range(P)]
    expect = parts[0].copy()
    for p in parts[1:]:
        expect += p
    group = DeviceGroup(P)

    def body(w):
        buf = parts[w.rank].copy()
        w.all_reduce_sum(buf)
        return buf

    for out in group.run(body):
        np.testing.assert_array_equal(out, expect)
    assert group.bytes_reduced == 50 * 8


def test_reduce_sum_to_root():
    group = DeviceGroup(3)

    def body(w):
        out = np.zeros(4) if w.rank == 2 else None
        w.reduce_sum(2, np.full(4, w.rank + 1.0), out)
        return out

    res = group.run(body)
    np.testing.assert_array_equal(res[2], np.full(4, 6.0))
    assert res[0] is None


def test_mismatched_collectives_raise_protocol_error():
    group = DeviceGroup(2, timeout=10)

    def body(w):
        buf = np.zeros(4)
        if w.rank == 0:
            w.broadcast(0, buf)
        else:
            w.all_reduce_sum(buf)

    t0 = time.perf_counter()
    with pytest.raises(ProtocolError, match="mismatched"):
        group.run(body)
    assert time.perf_counter() - t0 < 5


def test_mismatched_payload_size_is_detected():
    group = DeviceGroup(2, timeout=10)

    def body(w):
        w.broadcast(0, np.zeros(4 if w.rank == 0 else 5))

    with pytest.raises(ProtocolError):
        group.run(body)


def test_worker_failure_releases_peers():
    group = DeviceGroup(3, timeout=30)

    def body(w):
        if w.rank == 1:
            raise RuntimeError("boom")
        w.barrier()

    t0 = time.perf_counter()
    with pytest.raises(RuntimeError, match="boom"):
        group.run(body)
    assert group.aborted
    assert time.perf_counter() - t0 < 5


def test_missing_peer_times_out():
    group = DeviceGroup(2, timeout=0.3)

    def body(w):
        if w.rank == 0:
            w.barrier()

    with pytest.raises(ShutdownError):
        group.run(body)


def test_broadcast_needs_contiguous_buffer():
    group = DeviceGroup(2)

    def body(w):
        w.broadcast(0, np.zeros((4, 4))[:, :2])

    with pytest.raises(ValueError, match="contiguous"):
        group.run(body)


def test_link_delay_is_charged_per_byte():
    group = DeviceGroup(2, link_delay_ns_per_byte=1e6 / 800)  # 1 ms for 800 bytes

    def body(w):
        t0 = time.perf_counter()
        w.broadcast(0, np.zeros(100))
        return time.perf_counter() - t0

    assert min(group.run(body)) >= 1e-3


def test_scheduler_orders_by_dependencies_and_lanes():
    group = DeviceGroup(1)
    order = []
    lock = threading.Lock()

    def note(tag, delay=0.0):
        def work():
            time.sleep(delay)
            with lock:
                order.append(tag)
        return work

    def body(w):
        a = w.submit(COMM, [], note("comm-a", 0.02), "broadcast", 0)
        b = w.submit(COMPUTE, [a], note("comp-b"), "spmm", 0)
        c = w.submit(COMPUTE, [], note("comp-c"), "spmm", 1)  # queued after b on the same lane
        w.sched.wait([b, c])
        with pytest.raises(KeyError):
            w.submit(COMPUTE, [999], note("x"))
        with pytest.raises(ValueError):
            w.submit(COMPUTE, [], note("x"), "nonsense")
        with pytest.raises(ValueError):
            w.submit(7, [], note("x"))

    group.run(body)
    assert order == ["comm-a", "comp-b", "comp-c"]
    evs = group.events()
    assert len(evs) == 3 and not audit_timeline(evs)


def test_audit_timeline_flags_violations():
    ok = [
        TimelineEvent(0, COMM, 0, "broadcast", 0, 10, 0, []),
        TimelineEvent(0, COMPUTE, 0, "spmm", 10, 20, 1, [0]),
    ]
    assert audit_timeline(ok) == []
    early = [ok[0], TimelineEvent(0, COMPUTE, 0, "spmm", 5, 20, 1, [0])]
    assert any("before dependency" in p for p in audit_timeline(early))
    overlap = ok + [TimelineEvent(0, COMPUTE, 1, "spmm", 15, 25, 2, [])]
    assert any("starts before" in p for p in audit_timeline(overlap))
    dangling = [TimelineEvent(0, COMPUTE, 0, "spmm", 0, 1, 3, [42])]
    assert any("unrecorded" in p for p in audit_timeline(dangling))
    backwards = [TimelineEvent(0, COMPUTE, 0, "gemm", 5, 1, 4, [])]
    assert audit_timeline(backwards)


def test_exported_timeline_matches_schema(tmp_path):
    group = DeviceGroup(2)

    def body(w):
        buf = np.ones(8)
        bid = w.submit(COMM, [], lambda: w.broadcast(0, buf), "broadcast", 0)
        w.submit(COMPUTE, [bid], lambda: buf.sum(), "spmm", 0)
        w.sched.wait_all()
        with w.timed("gemm"):
            pass

    group.run(body)
    path = tmp_path / "t.json"
    group.export_timeline(path)
    data = json.loads(path.read_text())
    jsonschema.validate(data, TIMELINE_SCHEMA)
    assert len(data) == 6 and audit_timeline(data) == []
    data[0]["kind"] = "teleport"
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(data, TIMELINE_SCHEMA)
