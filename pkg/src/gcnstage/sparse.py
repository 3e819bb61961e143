"""CSR sparse matrices, in-degree normalization and the SpMM kernel."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from gcnstage import _kernels
from gcnstage.dense import ShapeError

INDEX_DTYPE = np.int32
PTR_DTYPE = np.int64


class CooEdge(NamedTuple):
    src: int
    dst: int
    weight: float = 1.0


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with sorted, duplicate-free rows.

    Entry ``(u, v)`` of an adjacency matrix is the edge ``u -> v``. Instances
    are treated as immutable and are shared read-only between workers.
    """

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry (COO expansion)."""
        return np.repeat(np.arange(self.rows, dtype=np.int64), self.row_nnz())

    def astype(self, dtype) -> CsrMatrix:
        if self.values.dtype == dtype:
            return self
        return CsrMatrix(self.rows, self.cols, self.row_ptr, self.col_idx, self.values.astype(dtype))

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        np.add.at(out, (self.row_indices(), self.col_idx), self.values)
        return out

    def validate(self) -> None:
        """Raise ``ValueError`` if any CSR invariant is violated."""
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.rows + 1,):
            raise ValueError(f"row_ptr has length {rp.shape[0]}, expected {self.rows + 1}")
        if rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must start at 0 and be nondecreasing")
        if ci.shape != (rp[-1],) or self.values.shape != (rp[-1],):
            raise ValueError("col_idx/values length must equal row_ptr[-1]")
        if ci.size and (ci.min() < 0 or ci.max() >= self.cols):
            raise ValueError(f"column index outside [0, {self.cols})")
        # strictly increasing inside a row <=> every step that does not cross
        # a row boundary is positive
        if ci.size > 1:
            step = np.diff(ci.astype(np.int64))
            boundary = np.zeros(ci.size - 1, dtype=bool)
            starts = rp[1:-1]
            starts = starts[(starts > 0) & (starts < ci.size)]
            boundary[starts - 1] = True
            if np.any((step <= 0) & ~boundary):
                raise ValueError("column indices must be strictly increasing within each row")


def from_arrays(src, dst, weights=None, shape=None, dtype=np.float64) -> CsrMatrix:
    """Build a CSR matrix from coordinate arrays, summing duplicates.

    ``shape`` defaults to a square ``n x n`` with ``n = max id + 1``.
    """
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if src.shape != dst.shape:
        raise ShapeError(f"src has {src.size} entries but dst has {dst.size}")
    if weights is None:
        w = np.ones(src.size, dtype=dtype)
    else:
        w = np.asarray(weights, dtype=dtype).ravel()
        if w.shape != src.shape:
            raise ShapeError(f"{w.size} weights for {src.size} edges")
    if shape is None:
        n = int(max(src.max(initial=-1), dst.max(initial=-1))) + 1
        shape = (n, n)
    rows, cols = int(shape[0]), int(shape[1])
    if src.size:
        bad = (src < 0) | (src >= rows) | (dst < 0) | (dst >= cols)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"edge {k} = ({src[k]}, {dst[k]}) out of range for shape {(rows, cols)}"
            )
    key = src * cols + dst
    order = np.argsort(key, kind="stable")
    key = key[order]
    w = w[order]
    if key.size:
        first = np.empty(key.size, dtype=bool)
        first[0] = True
        np.not_equal(key[1:], key[:-1], out=first[1:])
        starts = np.flatnonzero(first)
        key = key[starts]
        w = np.add.reduceat(w, starts) if starts.size != w.size else w
    r = key // cols if cols else key
    c = key - r * cols
    counts = np.bincount(r, minlength=rows)
    row_ptr = np.zeros(rows + 1, dtype=PTR_DTYPE)
    np.cumsum(counts, out=row_ptr[1:])
    return CsrMatrix(rows, cols, row_ptr, c.astype(INDEX_DTYPE), np.ascontiguousarray(w))


def from_coo(edges: Iterable, n: int, dtype=np.float64) -> CsrMatrix:
    """Build an ``n x n`` adjacency matrix from ``CooEdge``/tuple records."""
    edges = [CooEdge(*e) for e in edges]
    src = np.fromiter((e.src for e in edges), dtype=np.int64, count=len(edges))
    dst = np.fromiter((e.dst for e in edges), dtype=np.int64, count=len(edges))
    w = np.fromiter((e.weight for e in edges), dtype=dtype, count=len(edges))
    return from_arrays(src, dst, w, shape=(n, n), dtype=dtype)


def from_dense(d: np.ndarray) -> CsrMatrix:
    r, c = np.nonzero(d)
    return from_arrays(r, c, d[r, c], shape=d.shape, dtype=d.dtype)


def identity(n: int, dtype=np.float64) -> CsrMatrix:
    ids = np.arange(n)
    return from_arrays(ids, ids, shape=(n, n), dtype=dtype)


def add_self_loops(a: CsrMatrix) -> CsrMatrix:
    """Return ``a`` with a unit-weight self loop on every vertex lacking one."""
    if a.rows != a.cols:
        raise ShapeError(f"self loops need a square matrix, got {a.shape}")
    r = a.row_indices()
    has_loop = np.zeros(a.rows, dtype=bool)
    has_loop[r[r == a.col_idx]] = True
    extra = np.flatnonzero(~has_loop)
    src = np.concatenate([r, extra])
    dst = np.concatenate([a.col_idx.astype(np.int64), extra])
    w = np.concatenate([a.values, np.ones(extra.size, dtype=a.dtype)])
    return from_arrays(src, dst, w, shape=a.shape, dtype=a.dtype)


def transpose(a: CsrMatrix) -> CsrMatrix:
    # stable sort by column keeps rows ascending inside every output row
    order = np.argsort(a.col_idx, kind="stable")
    counts = np.bincount(a.col_idx, minlength=a.cols)
    row_ptr = np.zeros(a.cols + 1, dtype=PTR_DTYPE)
    np.cumsum(counts, out=row_ptr[1:])
    col_idx = a.row_indices()[order].astype(INDEX_DTYPE)
    return CsrMatrix(a.cols, a.rows, row_ptr, col_idx, a.values[order])


def normalize_in_degree(a: CsrMatrix) -> CsrMatrix:
    """Divide every entry by the weighted in-degree of its destination column.

    Columns without in-edges stay empty; no self loops are inserted.
    """
    if a.rows != a.cols:
        raise ShapeError(f"normalization needs a square matrix, got {a.shape}")
    colsum = np.bincount(a.col_idx, weights=a.values, minlength=a.cols)
    denom = colsum[a.col_idx]
    safe = np.where(denom != 0, denom, 1.0)
    values = (a.values / safe).astype(a.dtype)
    return CsrMatrix(a.rows, a.cols, a.row_ptr, a.col_idx, values)


_pool: ThreadPoolExecutor | None = None


def _executor() -> ThreadPoolExecutor:
    global _pool
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=os.cpu_count() or 1, thread_name_prefix="spmm")
    return _pool


def spmm(a: CsrMatrix, h: np.ndarray, accumulate=False, out=None, threads=1) -> np.ndarray:
    """``out = [out +] a @ h`` for CSR ``a`` and dense ``h``.

    Output rows are split into ``threads`` contiguous ranges computed
    concurrently. Each row sums its nonzeros in column order, so the result
    does not depend on ``threads``.
    """
    if h.ndim != 2 or a.cols != h.shape[0]:
        raise ShapeError(f"spmm: sparse {a.shape} cannot multiply dense {h.shape}")
    if out is None:
        if accumulate:
            raise ValueError("spmm: accumulate requires an explicit out")
        out = np.zeros((a.rows, h.shape[1]), dtype=h.dtype)
    else:
        if out.shape != (a.rows, h.shape[1]):
            raise ShapeError(f"spmm: out has shape {out.shape}, expected {(a.rows, h.shape[1])}")
        if np.may_share_memory(out, h):
            raise ValueError("spmm: out must not alias the dense operand")
        if not accumulate:
            out.fill(0)
    values = a.values if a.values.dtype == h.dtype else a.values.astype(h.dtype)
    if threads <= 1 or a.rows < 2 * threads:
        _kernels.csr_spmm_rows(a.row_ptr, a.col_idx, values, h, out, 0, a.rows)
        return out
    bounds = np.linspace(0, a.rows, threads + 1).astype(np.int64)
    futures = [
        _executor().submit(
            _kernels.csr_spmm_rows, a.row_ptr, a.col_idx, values, h, out, int(lo), int(hi)
        )
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]
    for f in futures:
        f.result()
    return out
