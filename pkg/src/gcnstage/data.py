"""Datasets: file ingestion and synthetic graph generators."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gcnstage.dense import MAGIC, read_dense
from gcnstage.sparse import CsrMatrix, add_self_loops, from_arrays


class ParseError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass
class Dataset:
    graph: CsrMatrix
    features: np.ndarray
    labels: np.ndarray
    masks: dict = field(default_factory=dict)
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def n(self) -> int:
        return self.graph.rows

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def validate(self) -> None:
        n = self.graph.rows
        if self.graph.cols != n:
            raise DimensionError(f"graph must be square, got {self.graph.shape}")
        if self.features.shape[0] != n:
            raise DimensionError(f"features have {self.features.shape[0]} rows but the graph has {n} vertices")
        if self.labels.shape != (n,):
            raise DimensionError(f"{self.labels.size} labels but the graph has {n} vertices")
        for name, ids in self.masks.items():
            ids = np.asarray(ids)
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise DimensionError(f"mask {name!r} names vertices outside [0, {n})")

    def train_mask(self) -> np.ndarray:
        """Boolean vector of training vertices (all vertices when no mask given)."""
        m = np.zeros(self.n, dtype=bool)
        if "train" in self.masks:
            m[np.asarray(self.masks["train"], dtype=np.int64)] = True
        else:
            m[:] = True
        return m

    def summary(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "m": self.graph.nnz,
            "d0": int(self.features.shape[1]),
            "classes": self.num_classes,
            "avg_degree": self.graph.nnz / max(self.n, 1),
        }


# -- parsers ---------------------------------------------------------------


def read_matrix_market(path) -> CsrMatrix:
    """Coordinate Matrix Market (real/integer/pattern, general/symmetric)."""
    path = Path(path)
    with open(path) as f:
        header = f.readline()
        parts = header.strip().split()
        if len(parts) != 5 or parts[0] != "%%MatrixMarket":
            raise ParseError(f"{path}:1: not a Matrix Market header: {header.strip()!r}")
        obj, fmt, fld, sym = (p.lower() for p in parts[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise ParseError(f"{path}:1: only 'matrix coordinate' files are supported")
        if fld not in ("real", "integer", "pattern"):
            raise ParseError(f"{path}:1: unsupported field {fld!r}")
        if sym not in ("general", "symmetric"):
            raise ParseError(f"{path}:1: unsupported symmetry {sym!r}")
        lineno = 1
        size = None
        for line in f:
            lineno += 1
            s = line.strip()
            if s and not s.startswith("%"):
                size = s.split()
                break
        if size is None or len(size) != 3:
            raise ParseError(f"{path}:{lineno}: expected 'rows cols nnz'")
        try:
            rows, cols, nnz = (int(x) for x in size)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad size line {s!r}") from None
        want = 2 if fld == "pattern" else 3
        src = np.empty(nnz, dtype=np.int64)
        dst = np.empty(nnz, dtype=np.int64)
        w = np.ones(nnz, dtype=np.float64)
        k = 0
        for line in f:
            lineno += 1
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            tok = s.split()
            if len(tok) < want or k >= nnz:
                raise ParseError(f"{path}:{lineno}: malformed entry {s!r}")
            try:
                src[k] = int(tok[0]) - 1
                dst[k] = int(tok[1]) - 1
                if want == 3:
                    w[k] = float(tok[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed entry {s!r}") from None
            if not (0 <= src[k] < rows and 0 <= dst[k] < cols):
                raise ParseError(f"{path}:{lineno}: index out of range for {rows}x{cols}")
            k += 1
        if k != nnz:
            raise ParseError(f"{path}: header promises {nnz} entries, found {k}")
    if sym == "symmetric":
        off = src != dst
        src, dst, w = (np.concatenate([src, dst[off]]), np.concatenate([dst, src[off]]), np.concatenate([w, w[off]]))
    return from_arrays(src, dst, w, shape=(rows, cols))


def read_edge_list(path, n: int | None = None) -> CsrMatrix:
    """Whitespace-separated ``u v [w]`` lines with 0-based ids; ``#`` comments."""
    path = Path(path)
    src, dst, w = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            tok = s.split()
            if len(tok) not in (2, 3):
                raise ParseError(f"{path}:{lineno}: expected 'u v [w]', got {s!r}")
            try:
                u, v = int(tok[0]), int(tok[1])
                wt = float(tok[2]) if len(tok) == 3 else 1.0
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed edge {s!r}") from None
            if u < 0 or v < 0:
                raise ParseError(f"{path}:{lineno}: negative vertex id")
            src.append(u)
            dst.append(v)
            w.append(wt)
    top = max(max(src, default=-1), max(dst, default=-1)) + 1
    if n is None:
        n = top
    elif top > n:
        raise DimensionError(f"{path}: edge list references vertex {top - 1} but only {n} vertices exist")
    return from_arrays(src, dst, w, shape=(n, n))


def read_graph(path, n: int | None = None) -> CsrMatrix:
    with open(path, "rb") as f:
        head = f.read(14)
    if head.startswith(b"%%MatrixMarket"):
        return read_matrix_market(path)
    return read_edge_list(path, n)


def read_features(path) -> np.ndarray:
    """Dense MGDM binary or CSV (comma or whitespace separated)."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MAGIC:
        return read_dense(path)
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                rows.append([float(x) for x in s.replace(",", " ").split()])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric feature value") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
    if not rows:
        raise ParseError(f"{path}: no feature rows")
    return np.array(rows, dtype=np.float64)


def read_labels(path) -> np.ndarray:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(int(s))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: expected an integer label, got {s!r}") from None
    labels = np.array(out, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise ParseError(f"{path}: labels must be nonnegative")
    return labels


def read_masks(path) -> dict:
    """JSON object mapping mask names (``train``, ``val``, ``test``) to vertex lists."""
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: expected a JSON object of vertex lists")
    return {k: np.asarray(v, dtype=np.int64) for k, v in raw.items()}


def load_dataset(graph_path, features_path, labels_path, masks_path=None, *, self_loops=False, name=None) -> Dataset:
    features = read_features(features_path)
    labels = read_labels(labels_path)
    graph = read_graph(graph_path, n=features.shape[0])
    if self_loops:
        graph = add_self_loops(graph)
    masks = read_masks(masks_path) if masks_path else {}
    return Dataset(graph, features, labels, masks, name or Path(graph_path).stem)


def write_edge_list(path, a: CsrMatrix) -> None:
    r = a.row_indices()
    with open(path, "w") as f:
        for u, v, w in zip(r.tolist(), a.col_idx.tolist(), a.values.tolist()):
            f.write(f"{u} {v}\n" if w == 1.0 else f"{u} {v} {w!r}\n")


def write_labels(path, labels) -> None:
    with open(path, "w") as f:
        f.writelines(f"{int(x)}\n" for x in labels)


# -- generators ------------------------------------------------------------


def _symmetric_pattern(src, dst, n) -> CsrMatrix:
    keep = src != dst
    src, dst = src[keep], dst[keep]
    a = from_arrays(np.concatenate([src, dst]), np.concatenate([dst, src]), shape=(n, n))
    return CsrMatrix(a.rows, a.cols, a.row_ptr, a.col_idx, np.ones(a.nnz))


def _apportion(total: int, weights: np.ndarray, cap: int) -> np.ndarray:
    """Integers proportional to ``weights`` summing to ``total`` (largest remainder)."""
    share = total * weights / weights.sum()
    share = np.minimum(share, cap)
    base = np.floor(share).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        room = base < cap
        order = np.argsort(-(share - base) - np.where(room, 0, 2), kind="stable")
        base[order[:short]] += 1
    return base


def synth_graph(n: int, avg_degree: float, exponent: float, seed: int, *, feature_dim=16, num_classes=4) -> Dataset:
    """Undirected power-law graph from a configuration model.

    Vertex ``i`` (0-based) gets expected degree proportional to
    ``(i + 1) ** -exponent``, so ids are ordered by decreasing degree and
    ``exponent = 0`` gives a near-regular graph. Stubs are paired at random;
    self loops and multi-edges are dropped and the deficit is topped up with
    weighted random pairs until ``nnz / n`` is within 2% of ``avg_degree``.
    Features are standard normal and labels uniform over ``num_classes``.
    """
    if avg_degree < 1:
        raise ValueError(f"average degree must be >= 1, got {avg_degree}")
    if n < 2 or avg_degree > n - 1:
        raise ValueError(f"average degree {avg_degree} infeasible for {n} vertices")
    rng = np.random.Generator(np.random.PCG64(seed))
    target = int(round(n * avg_degree))
    target += target % 2
    weights = np.arange(1, n + 1, dtype=np.float64) ** -float(exponent)
    degrees = _apportion(target, weights, n - 1)
    stubs = rng.permutation(np.repeat(np.arange(n, dtype=np.int64), degrees))
    if stubs.size % 2:
        stubs = stubs[:-1]
    src, dst = stubs[0::2], stubs[1::2]
    a = _symmetric_pattern(src, dst, n)
    p = weights / weights.sum()
    for _ in range(50):
        deficit = target - a.nnz
        if deficit <= 0.02 * target:
            break
        extra = max(deficit // 2, 1)
        s2 = rng.choice(n, size=extra, p=p)
        d2 = rng.choice(n, size=extra, p=p)
        r = a.row_indices()
        a = _symmetric_pattern(np.concatenate([r, s2]), np.concatenate([a.col_idx.astype(np.int64), d2]), n)
    features = rng.standard_normal((n, feature_dim))
    labels = rng.integers(0, num_classes, size=n)
    return Dataset(a, features, labels, {}, f"synth-n{n}-k{avg_degree:g}-e{exponent:g}")


def two_block_graph(n: int, seed: int, *, deg_in=10.0, deg_out=1.0, feature_dim=4, noise=1.0) -> Dataset:
    """Two-community stochastic block model with noisy class-indicator features.

    Labels alternate by a random assignment; each vertex draws on average
    ``deg_in`` neighbours in its own block and ``deg_out`` in the other.
    The first two feature columns are the one-hot label plus Gaussian noise,
    the remaining columns are pure noise.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.integers(0, 2, size=n)
    blocks = [np.flatnonzero(labels == c) for c in (0, 1)]
    src, dst = [], []
    for c in (0, 1):
        mine, other = blocks[c], blocks[1 - c]
        k_in = int(round(mine.size * deg_in / 2))
        src.append(rng.choice(mine, k_in))
        dst.append(rng.choice(mine, k_in))
        if c == 0:
            k_out = int(round(n * deg_out / 2))
            src.append(rng.choice(mine, k_out))
            dst.append(rng.choice(other, k_out))
    a = _symmetric_pattern(np.concatenate(src), np.concatenate(dst), n)
    features = noise * rng.standard_normal((n, max(feature_dim, 2)))
    features[np.arange(n), labels] += 1.0
    return Dataset(a, features, labels, {}, f"two-block-n{n}")


def degree_sort_order(a: CsrMatrix) -> np.ndarray:
    """Forward map (old -> new id) placing vertices by decreasing total degree."""
    deg = a.row_nnz() + np.bincount(a.col_idx, minlength=a.cols)
    order = np.argsort(-deg, kind="stable")  # new -> old
    forward = np.empty_like(order)
    forward[order] = np.arange(order.size)
    return forward
