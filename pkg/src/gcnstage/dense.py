"""Dense row-major matrices and the per-layer dense kernels.

A dense matrix is a C-contiguous 2-D numpy array of float32 or float64.
Kernels write into a caller-provided ``out`` so that the training loop can
route every intermediate through its preallocated buffers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from gcnstage import _kernels

MAGIC = b"MGDM"
_HEADER = struct.Struct("<4sQQB")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def resolve_dtype(dtype) -> np.dtype:
    """Accept ``"f32"``/``"f64"``, numpy dtypes, or python types."""
    aliases = {"f32": np.float32, "f64": np.float64, "float32": np.float32, "float64": np.float64}
    dt = np.dtype(aliases.get(dtype, dtype))
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported scalar type {dt}; expected float32 or float64")
    return dt


def zeros(rows: int, cols: int, dtype=np.float64) -> np.ndarray:
    return np.zeros((rows, cols), dtype=resolve_dtype(dtype))


def _check_out(out: np.ndarray, shape: tuple[int, int], what: str) -> None:
    if out.shape != shape:
        raise ShapeError(f"{what}: out has shape {out.shape}, expected {shape}")


def gemm(a, b, transpose_a=False, transpose_b=False, accumulate=False, out=None):
    """``out = [out +] op(a) @ op(b)``.

    Args:
        a, b: 2-D arrays.
        transpose_a, transpose_b: apply a transpose to the operand first.
        accumulate: add into ``out`` instead of overwriting it.
        out: result array. Allocated when omitted (not allowed with
            ``accumulate``).

    Raises:
        ShapeError: inner dimensions disagree or ``out`` has the wrong shape.
    """
    opa = a.T if transpose_a else a
    opb = b.T if transpose_b else b
    if opa.shape[1] != opb.shape[0]:
        raise ShapeError(
            f"gemm: inner dimensions differ for op(a) {opa.shape} and op(b) {opb.shape}"
        )
    shape = (opa.shape[0], opb.shape[1])
    if out is None:
        if accumulate:
            raise ValueError("gemm: accumulate requires an explicit out")
        return np.matmul(opa, opb)
    _check_out(out, shape, "gemm")
    if accumulate:
        out += np.matmul(opa, opb)
    else:
        np.matmul(opa, opb, out=out)
    return out


def relu_forward(x, out=None):
    """Elementwise ``max(0, x)``; ``out`` may be ``x`` itself."""
    if out is None:
        out = np.empty_like(x)
    _check_out(out, x.shape, "relu_forward")
    _kernels.relu_forward(x, out)
    return out


def relu_backward(upstream, activated, out=None):
    """Pass ``upstream`` where the forward output is positive, zero elsewhere.

    ``activated`` is the post-ReLU value; for ReLU ``x > 0`` iff
    ``relu(x) > 0`` so the pre-activation is not needed. ``out`` may alias
    either input.
    """
    if activated.shape != upstream.shape:
        raise ShapeError(
            f"relu_backward: upstream {upstream.shape} vs activated {activated.shape}"
        )
    if out is None:
        out = np.empty_like(upstream)
    _check_out(out, upstream.shape, "relu_backward")
    _kernels.relu_backward(upstream, activated, out)
    return out


def softmax_xent_sum(logits, labels, mask, scale, out):
    """Summed masked cross entropy; writes ``scale * dloss/dlogits`` rows to ``out``.

    This is the building block for the distributed loss: each worker sums
    its local rows and ``scale`` is ``1 / global mask size``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.bool_)
    if labels.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_xent: logits {logits.shape} vs labels {labels.shape} / mask {mask.shape}"
        )
    picked = labels[mask]
    if picked.size and (picked.min() < 0 or picked.max() >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    _check_out(out, logits.shape, "softmax_xent")
    return float(_kernels.softmax_xent_rows(logits, labels, mask, float(scale), out))


def softmax_xent(logits, labels, mask=None, out=None):
    """Mean softmax cross entropy over the masked rows.

    ``mask`` is a boolean vector or an index array; ``None`` means every row.
    Returns ``(loss, grad)`` where unmasked gradient rows are zero.
    """
    n = logits.shape[0]
    if mask is None:
        mask = np.ones(n, dtype=np.bool_)
    else:
        mask = np.asarray(mask)
        if mask.dtype != np.bool_:
            idx = mask
            mask = np.zeros(n, dtype=np.bool_)
            mask[idx] = True
    count = int(mask.sum())
    if count == 0:
        raise ValueError("softmax_xent: mask selects no rows")
    if out is None:
        out = np.empty_like(logits)
    total = softmax_xent_sum(logits, labels, mask, 1.0 / count, out)
    return total / count, out


def write_dense(path, m: np.ndarray) -> None:
    """Write one matrix in the MGDM binary layout."""
    with open(path, "wb") as f:
        write_dense_record(f, m)


def write_dense_record(f, m: np.ndarray) -> None:
    dt = resolve_dtype(m.dtype)
    f.write(_HEADER.pack(MAGIC, m.shape[0], m.shape[1], dt.itemsize))
    f.write(np.ascontiguousarray(m, dtype=dt.newbyteorder("<")).tobytes())


def read_dense_record(f) -> np.ndarray | None:
    """Read the next MGDM record from a binary stream; ``None`` at EOF."""
    head = f.read(_HEADER.size)
    if not head:
        return None
    if len(head) < _HEADER.size:
        raise ValueError("truncated MGDM header")
    magic, rows, cols, width = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if width not in _DTYPES:
        raise ValueError(f"bad dtype width {width}")
    nbytes = rows * cols * width
    payload = f.read(nbytes)
    if len(payload) != nbytes:
        raise ValueError(f"truncated MGDM payload: {len(payload)} of {nbytes} bytes")
    m = np.frombuffer(payload, dtype=_DTYPES[width]).reshape(rows, cols)
    return m.astype(m.dtype.newbyteorder("="))


def read_dense(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        m = read_dense_record(f)
    if m is None:
        raise ValueError(f"{path}: empty file")
    return m
