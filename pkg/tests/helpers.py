"""Shared builders for tests: run the package model on dense inputs."""

from __future__ import annotations

import numpy as np

from gcnstage.collectives import DeviceGroup
from gcnstage.model import GcnConfig, GcnWorker, SharedGraph
from gcnstage.partition import uniform_partition
from gcnstage.sparse import from_dense, normalize_in_degree, transpose


def shared_graph(dense_a: np.ndarray, P: int) -> SharedGraph:
    a_hat = normalize_in_degree(from_dense(dense_a))
    return SharedGraph(transpose(a_hat), a_hat, uniform_partition(dense_a.shape[0], P))


def run_model(dense_a, x, labels, mask, cfg: GcnConfig, P: int, step, *, link_delay=0.0):
    """Build a GcnWorker per rank and return ``step(model)`` for every rank."""
    graph = shared_graph(dense_a, P)
    group = DeviceGroup(P, link_delay)
    mask = np.asarray(mask, dtype=bool)

    def body(w):
        lo, hi = graph.p.range(w.rank)
        m = GcnWorker(w, cfg, graph, x[lo:hi], labels[lo:hi], mask[lo:hi], int(mask.sum()))
        return step(m)

    return group.run(body), group


def package_grads(dense_a, x, labels, mask, cfg: GcnConfig, P: int = 1):
    """Initial weights and all-reduced weight gradients from rank 0."""

    def step(m):
        w0 = [p.W.copy() for p in m.params]
        m.compute_gradients()
        return w0, [p.W_grad.copy() for p in m.params]

    res, _ = run_model(dense_a, x, labels, mask, cfg, P, step)
    return res[0]
