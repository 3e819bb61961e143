"""L-layer GCN with hand-written backward propagation.

Each worker holds a row block of every activation. The memory plan uses
``L + 3`` large buffers per worker: one output buffer per layer
(``ahw[l]``), one temporary shared by all layers (``hw``) and two broadcast
buffers (``bc1``, ``bc2``). Forward layer ``l``::

    hw      <- H_in @ W                (gemm)
    ahw[l]  <- A_hat^T @ hw            (staged SpMM)
    ahw[l]  <- relu(ahw[l])            (in place, hidden layers only)

and backward layer ``l`` (``ahw[l]`` holds the gradient w.r.t. its
pre-activation)::

    hw        <- A_hat @ ahw[l]        (staged SpMM)
    W_grad    <- H_in^T @ hw           (gemm, then all-reduce)
    ahw[l-1]  <- relu'(hw @ W^T)       (row-chunked gemm fused with the mask)

The fused last step reads the activation stored in ``ahw[l-1]`` right before
overwriting the same rows with the gradient, so no extra activation copy is
kept. Layers that widen (``d_in < d_out``) may run SpMM before GeMM; their
backward pass mirrors that order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from gcnstage.collectives import COMM, COMPUTE, Worker
from gcnstage.dense import gemm, read_dense_record, relu_backward, relu_forward, resolve_dtype, softmax_xent_sum, write_dense_record
from gcnstage.dist_spmm import DistSpmmPlan, flat_view, run_staged
from gcnstage.partition import PartitionVector, tile_rows
from gcnstage.sparse import CsrMatrix

CHUNK_ROWS = 256


class ConfigError(ValueError):
    pass


@dataclass
class GcnConfig:
    layer_dims: list
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    seed: int = 0
    permute: bool = False
    overlap: bool = False
    skip_first_backward_spmm: bool = False
    order_swap: bool = False
    dtype: str = "f64"
    add_self_loops: bool = False

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise ConfigError("layer_dims needs at least an input and an output width")
        if any(d < 1 for d in self.layer_dims):
            raise ConfigError(f"all layer widths must be >= 1: {self.layer_dims}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Adam betas must lie in [0, 1)")
        try:
            resolve_dtype(self.dtype)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def np_dtype(self) -> np.dtype:
        return resolve_dtype(self.dtype)

    def swapped(self, layer: int) -> bool:
        """Run SpMM before GeMM in this layer (the narrower side goes through SpMM)."""
        return self.order_swap and self.layer_dims[layer] < self.layer_dims[layer + 1]

    def spmm_width(self, layer: int) -> int:
        d_in, d_out = self.layer_dims[layer], self.layer_dims[layer + 1]
        return d_in if self.swapped(layer) else d_out

    @classmethod
    def from_dict(cls, d: dict) -> GcnConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "layer_dims" not in d:
            raise ConfigError("config is missing layer_dims")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> GcnConfig:
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)


class BufferPool:
    """Named flat arenas; views of any shape that fits are cut from the front.

    Every allocation is logged so tests can audit the memory plan.
    """

    def __init__(self, dtype):
        self.dtype = resolve_dtype(dtype)
        self._buffers: dict[str, np.ndarray] = {}
        self.allocations: list[tuple[str, int]] = []

    def allocate(self, name: str, elements: int) -> np.ndarray:
        if name in self._buffers:
            raise ValueError(f"buffer {name!r} already allocated")
        buf = np.zeros(int(elements), dtype=self.dtype)
        self._buffers[name] = buf
        self.allocations.append((name, buf.nbytes))
        return buf

    def flat(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def view(self, name: str, rows: int, cols: int) -> np.ndarray:
        return flat_view(self._buffers[name], rows, cols)

    @property
    def large_buffer_count(self) -> int:
        return len(self._buffers)

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in self._buffers.values())

    def names(self) -> list[str]:
        return list(self._buffers)


@dataclass
class LayerParams:
    W: np.ndarray
    W_grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray

    @classmethod
    def zeros(cls, d_in: int, d_out: int, dtype) -> LayerParams:
        return cls(*(np.zeros((d_in, d_out), dtype=dtype) for _ in range(4)))


def glorot_params(cfg: GcnConfig, seed: int | None = None) -> list[np.ndarray]:
    """Glorot-uniform weights drawn layer by layer from one PCG64 stream."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed if seed is None else seed))
    out = []
    for d_in, d_out in zip(cfg.layer_dims[:-1], cfg.layer_dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        out.append(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(cfg.np_dtype))
    return out


def init_params(cfg: GcnConfig, worker: Worker | None = None, seed: int | None = None) -> list[LayerParams]:
    """Per-layer parameters; rank 0 draws the weights and broadcasts them."""
    params = [LayerParams.zeros(a, b, cfg.np_dtype) for a, b in zip(cfg.layer_dims[:-1], cfg.layer_dims[1:])]
    if worker is None or worker.rank == 0:
        for p, w in zip(params, glorot_params(cfg, seed)):
            p.W[...] = w
    if worker is not None:
        for p in params:
            worker.broadcast(0, p.W)
    return params


def adam_update(p: LayerParams, t: int, cfg: GcnConfig) -> None:
    """Bias-corrected Adam step on one layer; clears the gradient."""
    if t < 1:
        raise ValueError(f"Adam step index starts at 1, got {t}")
    g = p.W_grad
    p.adam_m *= cfg.beta1
    p.adam_m += (1 - cfg.beta1) * g
    p.adam_v *= cfg.beta2
    p.adam_v += (1 - cfg.beta2) * g * g
    m_hat = p.adam_m / (1 - cfg.beta1**t)
    v_hat = p.adam_v / (1 - cfg.beta2**t)
    p.W -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    g.fill(0)


@dataclass(frozen=True, eq=False)
class SharedGraph:
    """Normalized adjacency in both orientations plus the row partition."""

    a_hat_t: CsrMatrix  # forward operand
    a_hat: CsrMatrix  # backward operand
    p: PartitionVector


@dataclass
class StepStats:
    loss: float
    correct: int = 0
    count: int = 0
    digest: str = ""
    extra: dict = field(default_factory=dict)


class GcnWorker:
    """One worker's share of the model: row blocks, buffers, replicated weights."""

    def __init__(
        self,
        worker: Worker,
        cfg: GcnConfig,
        graph: SharedGraph,
        x_local: np.ndarray,
        labels_local: np.ndarray,
        mask_local: np.ndarray,
        mask_total: int,
        *,
        compute_stall_s: float = 0.0,
        threads: int = 1,
        params: list[LayerParams] | None = None,
    ):
        self.worker = worker
        self.cfg = cfg
        self.graph = graph
        dt = cfg.np_dtype
        p = graph.p
        me = worker.rank
        self.rows = p.size(me)
        if x_local.shape != (self.rows, cfg.layer_dims[0]):
            raise ConfigError(
                f"local features {x_local.shape} do not match {(self.rows, cfg.layer_dims[0])}"
            )
        if mask_total < 1:
            raise ConfigError("training mask is empty")
        self.x = np.ascontiguousarray(x_local, dtype=dt)
        self.labels = np.asarray(labels_local, dtype=np.int64)
        self.mask = np.asarray(mask_local, dtype=np.bool_)
        self.mask_total = int(mask_total)
        self.step_count = 0

        L = cfg.num_layers
        dims = cfg.layer_dims
        width = max(cfg.spmm_width(l) for l in range(L))
        self.pool = BufferPool(dt)
        self.pool.allocate("hw", self.rows * width)
        self.pool.allocate("bc1", p.max_size() * width)
        self.pool.allocate("bc2", p.max_size() * width)
        for l in range(L):
            self.pool.allocate(f"ahw{l}", self.rows * dims[l + 1])
        # row-chunk scratch for the fused backward gemm; O(chunk * d), not O(n * d)
        self._scratch = np.zeros(min(CHUNK_ROWS, max(self.rows, 1)) * max(dims), dtype=dt)

        a_t = graph.a_hat_t.astype(dt)
        a = graph.a_hat.astype(dt)
        common = dict(
            my_rank=me,
            bc1=self.pool.flat("bc1"),
            bc2=self.pool.flat("bc2"),
            overlap=cfg.overlap,
            compute_stall_s=compute_stall_s,
            threads=threads,
        )
        self.fwd = DistSpmmPlan(tile_rows(a_t, p, rows_only=me), **common)
        self.bwd = DistSpmmPlan(tile_rows(a, p, rows_only=me), **common)
        self.params = params if params is not None else init_params(cfg, worker)

    # -- buffers ---------------------------------------------------------

    def ahw(self, l: int) -> np.ndarray:
        return self.pool.view(f"ahw{l}", self.rows, self.cfg.layer_dims[l + 1])

    def layer_input(self, l: int) -> np.ndarray:
        return self.x if l == 0 else self.ahw(l - 1)

    def logits(self) -> np.ndarray:
        return self.ahw(self.cfg.num_layers - 1)

    # -- passes ----------------------------------------------------------

    def forward_layer(self, l: int) -> np.ndarray:
        cfg, w = self.cfg, self.worker
        d_in, d_out = cfg.layer_dims[l], cfg.layer_dims[l + 1]
        h_in = self.layer_input(l)
        out = self.ahw(l)
        W = self.params[l].W
        if cfg.swapped(l):
            s = self.pool.view("hw", self.rows, d_in)
            run_staged(w, self.fwd, h_in, s)
            with w.timed("gemm"):
                gemm(s, W, out=out)
        else:
            hw = self.pool.view("hw", self.rows, d_out)
            with w.timed("gemm"):
                gemm(h_in, W, out=hw)
            run_staged(w, self.fwd, hw, out)
        if l < cfg.num_layers - 1:
            with w.timed("activation"):
                relu_forward(out, out)
        return out

    def forward(self) -> np.ndarray:
        for l in range(self.cfg.num_layers):
            self.forward_layer(l)
        return self.logits()

    def loss(self) -> StepStats:
        """Global mean loss; leaves ``dloss/dlogits`` in the logits buffer."""
        w = self.worker
        logits = self.logits()
        with w.timed("loss"):
            pred = logits.argmax(axis=1) if self.rows else np.zeros(0, dtype=np.int64)
            correct = int(np.count_nonzero((pred == self.labels) & self.mask))
            local = softmax_xent_sum(logits, self.labels, self.mask, 1.0 / self.mask_total, logits)
        acc = np.array([local, correct], dtype=np.float64)
        with w.timed("reduce", COMM):
            w.all_reduce_sum(acc)
        return StepStats(loss=float(acc[0]) / self.mask_total, correct=int(acc[1]), count=self.mask_total)

    def _input_grad(self, l: int, hw_g: np.ndarray) -> None:
        """``ahw[l-1] <- relu'(hw_g @ W^T)`` in row chunks."""
        act = self.ahw(l - 1)
        Wt = self.params[l].W.T
        d_in = act.shape[1]
        step = max(1, self._scratch.size // max(d_in, 1))
        for lo in range(0, self.rows, step):
            hi = min(lo + step, self.rows)
            tmp = flat_view(self._scratch, hi - lo, d_in)
            gemm(hw_g[lo:hi], Wt, out=tmp)
            relu_backward(tmp, act[lo:hi], out=act[lo:hi])

    def backward_layer(self, l: int) -> None:
        """Expects the gradient w.r.t. layer ``l``'s pre-activation in ``ahw[l]``.

        Leaves the gradient w.r.t. layer ``l-1``'s pre-activation in
        ``ahw[l-1]`` and the all-reduced weight gradient in ``W_grad``.
        """
        cfg, w = self.cfg, self.worker
        d_in, d_out = cfg.layer_dims[l], cfg.layer_dims[l + 1]
        g = self.ahw(l)
        h_in = self.layer_input(l)
        prm = self.params[l]
        skip = l == 0 and cfg.skip_first_backward_spmm
        if cfg.swapped(l):
            # W_grad = (A_hat^T H_in)^T G; the product was overwritten since
            # the forward pass, so recompute it at the narrow width
            if skip:
                s = h_in
            else:
                s = self.pool.view("hw", self.rows, d_in)
                run_staged(w, self.fwd, h_in, s)
            with w.timed("gemm"):
                gemm(s, g, transpose_a=True, out=prm.W_grad)
            self._reduce_grad(prm)
            if l > 0:
                t = self.pool.view("hw", self.rows, d_in)
                with w.timed("gemm"):
                    gemm(g, prm.W, transpose_b=True, out=t)
                # ahw[l] is free once G has been consumed; d_in < d_out so it fits
                raw = self.pool.view(f"ahw{l}", self.rows, d_in)
                run_staged(w, self.bwd, t, raw)
                act = self.ahw(l - 1)
                with w.timed("activation"):
                    relu_backward(raw, act, out=act)
            return
        if skip:
            hw_g = g
        else:
            hw_g = self.pool.view("hw", self.rows, d_out)
            run_staged(w, self.bwd, g, hw_g)
        with w.timed("gemm"):
            gemm(h_in, hw_g, transpose_a=True, out=prm.W_grad)
        self._reduce_grad(prm)
        if l > 0:
            with w.timed("gemm"):
                self._input_grad(l, hw_g)

    def _reduce_grad(self, prm: LayerParams) -> None:
        with self.worker.timed("reduce", COMM):
            self.worker.all_reduce_sum(prm.W_grad)

    def backward(self) -> None:
        for l in reversed(range(self.cfg.num_layers)):
            self.backward_layer(l)

    def adam_step(self) -> None:
        self.step_count += 1
        with self.worker.timed("adam"):
            for prm in self.params:
                adam_update(prm, self.step_count, self.cfg)

    def compute_gradients(self) -> StepStats:
        """Forward, loss and backward without touching the weights."""
        self.forward()
        stats = self.loss()
        self.backward()
        return stats

    def evaluate_loss(self) -> float:
        self.forward()
        return self.loss().loss

    def train_step(self) -> StepStats:
        stats = self.compute_gradients()
        self.adam_step()
        stats.digest = self.weights_digest()
        return stats

    def weights_digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for prm in self.params:
            h.update(prm.W.tobytes())
        return h.hexdigest()


def save_checkpoint(path, params: list[LayerParams], cfg: GcnConfig) -> None:
    """All weights as consecutive MGDM records, config in ``<path>.json``."""
    with open(path, "wb") as f:
        for prm in params:
            write_dense_record(f, prm.W)
    with open(f"{path}.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)


def load_checkpoint(path) -> tuple[list[np.ndarray], GcnConfig]:
    cfg = GcnConfig.from_json(f"{path}.json")
    weights = []
    with open(path, "rb") as f:
        while (m := read_dense_record(f)) is not None:
            weights.append(m)
    if len(weights) != cfg.num_layers:
        raise ValueError(f"checkpoint holds {len(weights)} matrices, config has {cfg.num_layers} layers")
    return weights, cfg
