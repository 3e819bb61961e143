import numpy as np
import pytest

from gcnstage.collectives import audit_timeline
from gcnstage.data import synth_graph, two_block_graph
from gcnstage.driver import (
    BUCKETS,
    NoEventsError,
    bench_spmm,
    prepare,
    profile_training,
    runtime_breakdown,
    stage_table,
    train,
    write_stage_csv,
)
from gcnstage.model import GcnConfig


@pytest.fixture(scope="module")
def toy():
    return two_block_graph(120, 0)


def test_training_reduces_loss(toy):
    cfg = GcnConfig(layer_dims=[4, 8, 2], epochs=50, add_self_loops=True)
    res = train(toy, cfg, 1)
    assert len(res.epochs) == 50 and res.losses[-1] < res.losses[0]
    assert all(e.wall_us > 0 for e in res.epochs)


def test_two_workers_match_one(toy):
    cfg = GcnConfig(layer_dims=[4, 8, 2], epochs=20)
    l1 = train(toy, cfg, 1).losses
    r2 = train(toy, cfg, 2)
    np.testing.assert_allclose(r2.losses, l1, rtol=1e-10)
    assert all(r2.replicas_identical)


def test_permutation_changes_layout_not_the_problem(toy):
    base = GcnConfig(layer_dims=[4, 8, 2], epochs=30, seed=2)
    perm = GcnConfig(layer_dims=[4, 8, 2], epochs=30, seed=2, permute=True)
    a = train(toy, base, 2, collect_logits=True)
    b = train(toy, perm, 2, collect_logits=True)
    assert abs(a.losses[-1] - b.losses[-1]) <= 1e-6
    # logits come back in original vertex order
    np.testing.assert_allclose(b.logits, a.logits, rtol=1e-8, atol=1e-10)


def test_prepare_permutes_masks_consistently(toy):
    ds = two_block_graph(50, 1)
    ds.masks["train"] = np.arange(10)
    prep = prepare(ds, GcnConfig(layer_dims=[4, 2], permute=True), 3)
    assert prep.mask.sum() == 10
    np.testing.assert_array_equal(np.flatnonzero(prep.mask), np.sort(prep.perm.forward[:10]))
    assert prep.graph.p.parts == 3


def test_train_argument_errors(toy):
    with pytest.raises(ValueError, match="layer_dims"):
        train(toy, GcnConfig(layer_dims=[5, 2]), 1)
    with pytest.raises(ValueError, match="classes"):
        train(toy, GcnConfig(layer_dims=[4, 1]), 1)
    with pytest.raises(ValueError):
        train(toy, GcnConfig(layer_dims=[4, 2]), 0)


def test_breakdown_fractions_sum_to_one(toy):
    cfg = GcnConfig(layer_dims=[4, 8, 2], epochs=3, overlap=True)
    res = train(toy, cfg, 2)
    rep = runtime_breakdown(res.events)
    assert set(rep.fractions) == set(BUCKETS)
    assert sum(rep.fractions.values()) == pytest.approx(1.0, abs=1e-6)
    assert rep.totals_us["spmm"] > 0 and rep.totals_us["comm"] > 0
    assert "spmm" in rep.table() and rep.to_dict()["fractions"] == rep.fractions
    assert audit_timeline(res.events) == []


def test_breakdown_without_events_fails():
    with pytest.raises(NoEventsError, match="no events"):
        runtime_breakdown([])


def test_profile_training_drops_warmup(toy):
    cfg = GcnConfig(layer_dims=[4, 8, 2], epochs=2)
    rep = profile_training(toy, cfg, 1, warmup=1)
    assert sum(rep.fractions.values()) == pytest.approx(1.0)


def test_bench_spmm_stage_table(tmp_path):
    ds = synth_graph(300, 6, 0.5, 0)
    res = bench_spmm(ds, 3, width=4, overlap=True, repeats=2)
    assert len(res.wall_us) == 2
    assert sum(res.bytes_received) == 2 * 2 * 300 * 4 * 8  # two repeats, (P-1) n d each
    rows = stage_table(res.events)
    assert {(r["worker"], r["stage"]) for r in rows} == {(w, s) for w in range(3) for s in range(3)}
    path = tmp_path / "stages.csv"
    write_stage_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "stage,worker,comm_us,comp_us" and len(lines) == 10
