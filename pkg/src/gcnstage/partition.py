"""Row partitioning, tiling, vertex permutation and balance statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gcnstage import _kernels
from gcnstage.dense import ShapeError
from gcnstage.sparse import PTR_DTYPE, CsrMatrix, from_arrays


@dataclass(frozen=True, eq=False)
class PartitionVector:
    """Monotone part boundaries ``0 = bounds[0] <= ... <= bounds[P] = n``."""

    bounds: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.int64)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("a partition vector needs at least two bounds")
        if b[0] != 0 or np.any(np.diff(b) < 0):
            raise ValueError(f"bounds must start at 0 and be nondecreasing: {b.tolist()}")
        object.__setattr__(self, "bounds", b)

    @property
    def parts(self) -> int:
        return self.bounds.size - 1

    @property
    def n(self) -> int:
        return int(self.bounds[-1])

    def size(self, i: int) -> int:
        return int(self.bounds[i + 1] - self.bounds[i])

    def range(self, i: int) -> tuple[int, int]:
        return int(self.bounds[i]), int(self.bounds[i + 1])

    def max_size(self) -> int:
        return int(np.diff(self.bounds).max())

    def owner(self, v: int) -> int:
        """Part holding global index ``v``."""
        return int(np.searchsorted(self.bounds, v, side="right") - 1)


def uniform_partition(n: int, parts: int) -> PartitionVector:
    if parts < 1:
        raise ValueError(f"need at least one part, got {parts}")
    i = np.arange(parts + 1, dtype=np.int64)
    return PartitionVector(i * n // parts)


@dataclass(frozen=True, eq=False)
class Permutation:
    forward: np.ndarray  # old id -> new id
    inverse: np.ndarray  # new id -> old id

    @property
    def n(self) -> int:
        return self.forward.size

    @classmethod
    def from_forward(cls, forward) -> Permutation:
        forward = np.asarray(forward, dtype=np.int64)
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(forward.size)
        return cls(forward, inverse)

    def inverted(self) -> Permutation:
        return Permutation(self.inverse, self.forward)


def random_permutation(n: int, seed: int) -> Permutation:
    """Seeded Fisher-Yates shuffle.

    Swap targets come from numpy's PCG64 generator, whose stream is fixed
    for a given seed on every platform; the swaps run in a compiled loop.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = np.zeros(n, dtype=np.int64)
    if n > 1:
        draws[1:] = rng.integers(0, np.arange(2, n + 1, dtype=np.int64))
    return Permutation.from_forward(_kernels.fisher_yates(draws))


def apply_permutation(a: CsrMatrix, x=None, labels=None, perm: Permutation | None = None):
    """Relabel vertices symmetrically: ``a'[f(u), f(v)] = a[u, v]``.

    Rows of ``x`` and entries of ``labels`` follow their vertex. Either may
    be ``None``.
    """
    if perm is None:
        raise ValueError("apply_permutation needs a permutation")
    if a.rows != a.cols:
        raise ShapeError(f"permutation needs a square matrix, got {a.shape}")
    if perm.n != a.rows:
        raise ShapeError(f"permutation of size {perm.n} for a {a.shape} matrix")
    if x is not None and x.shape[0] != a.rows:
        raise ShapeError(f"features have {x.shape[0]} rows, graph has {a.rows}")
    if labels is not None and len(labels) != a.rows:
        raise ShapeError(f"{len(labels)} labels for {a.rows} vertices")
    f = perm.forward
    a2 = from_arrays(f[a.row_indices()], f[a.col_idx], a.values, shape=a.shape, dtype=a.dtype)
    x2 = None if x is None else np.ascontiguousarray(x[perm.inverse])
    l2 = None if labels is None else np.asarray(labels)[perm.inverse]
    return a2, x2, l2


def permute_vertex_set(ids, perm: Permutation) -> np.ndarray:
    return np.sort(perm.forward[np.asarray(ids, dtype=np.int64)])


def row_block(a: CsrMatrix, lo: int, hi: int) -> CsrMatrix:
    """Rows ``[lo, hi)`` of ``a`` with all columns kept."""
    s, e = int(a.row_ptr[lo]), int(a.row_ptr[hi])
    return CsrMatrix(hi - lo, a.cols, a.row_ptr[lo : hi + 1] - s, a.col_idx[s:e], a.values[s:e])


def _split_columns(block: CsrMatrix, p: PartitionVector) -> list[CsrMatrix]:
    # boolean selection keeps row-major order, so tiles stay sorted per row
    rows = block.rows
    cols = block.col_idx.astype(np.int64)
    r = block.row_indices()
    part_of = np.searchsorted(p.bounds, cols, side="right") - 1
    tiles = []
    for j in range(p.parts):
        lo, hi = p.range(j)
        sel = part_of == j
        counts = np.bincount(r[sel], minlength=rows)
        row_ptr = np.zeros(rows + 1, dtype=PTR_DTYPE)
        np.cumsum(counts, out=row_ptr[1:])
        tiles.append(
            CsrMatrix(rows, hi - lo, row_ptr, (cols[sel] - lo).astype(block.col_idx.dtype), block.values[sel])
        )
    return tiles


@dataclass(frozen=True, eq=False)
class TilePlan:
    """``P x P`` grid of locally indexed tiles under a symmetric partition."""

    p: PartitionVector
    tiles: list  # tiles[i][j]: CsrMatrix

    @property
    def parts(self) -> int:
        return self.p.parts

    def nnz_grid(self) -> np.ndarray:
        return np.array([[t.nnz for t in row] for row in self.tiles], dtype=np.int64)

    def reassemble(self) -> CsrMatrix:
        src, dst, w = [], [], []
        for i, row in enumerate(self.tiles):
            for j, t in enumerate(row):
                src.append(t.row_indices() + self.p.bounds[i])
                dst.append(t.col_idx.astype(np.int64) + self.p.bounds[j])
                w.append(t.values)
        n = self.p.n
        dtype = self.tiles[0][0].dtype
        return from_arrays(np.concatenate(src), np.concatenate(dst), np.concatenate(w), shape=(n, n), dtype=dtype)


def tile_rows(a: CsrMatrix, p: PartitionVector, rows_only: int | None = None) -> TilePlan:
    """Cut ``a`` into tiles ``A^{ij}`` with local row and column indices.

    With ``rows_only=i`` only row ``i`` of the grid is materialized (the
    other rows are ``None``); a worker needs nothing else.
    """
    if a.rows != p.n or a.cols != p.n:
        raise ShapeError(f"partition over {p.n} vertices does not fit matrix {a.shape}")
    grid = []
    for i in range(p.parts):
        if rows_only is not None and i != rows_only:
            grid.append(None)
            continue
        grid.append(_split_columns(row_block(a, *p.range(i)), p))
    return TilePlan(p, grid)


def balance_stats(plan: TilePlan) -> dict:
    """Nonzero balance of a tile plan.

    ``stage_ratio[j]`` is ``max_i nnz(A^{ij}) / mean_i nnz(A^{ij})``: stage
    ``j`` of the staged SpMM lasts as long as its heaviest tile. The
    ``overall_ratio`` is the same quantity summed over stages, i.e. critical
    path over perfectly balanced work.
    """
    grid = plan.nnz_grid()
    stage_max = grid.max(axis=0).astype(float)
    stage_mean = grid.mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(stage_mean > 0, stage_max / np.where(stage_mean > 0, stage_mean, 1), 1.0)
    total_mean = stage_mean.sum()
    overall = float(stage_max.sum() / total_mean) if total_mean > 0 else 1.0
    return {
        "P": plan.parts,
        "per_tile_nnz": grid.tolist(),
        "stage_ratio": [float(r) for r in ratio],
        "overall_ratio": overall,
    }


def balance_json(plan: TilePlan) -> str:
    return json.dumps(balance_stats(plan))
