"""Compiled inner loops.

Every kernel here releases the GIL so simulated workers (threads) run them
concurrently. Summation order inside each kernel is fixed, which is what
makes staged and monolithic SpMM bitwise comparable.
"""

import math

import numba
import numpy as np

_jit = numba.njit(nogil=True, cache=True)


@_jit
def csr_spmm_rows(row_ptr, col_idx, values, h, out, row_lo, row_hi):
    """out[i] += sum_k values[k] * h[col_idx[k]] for i in [row_lo, row_hi)."""
    width = h.shape[1]
    for i in range(row_lo, row_hi):
        for k in range(row_ptr[i], row_ptr[i + 1]):
            v = values[k]
            c = col_idx[k]
            for j in range(width):
                out[i, j] += v * h[c, j]


@_jit
def relu_forward(x, out):
    rows, cols = x.shape
    for i in range(rows):
        for j in range(cols):
            v = x[i, j]
            out[i, j] = v if v > 0 else 0.0


@_jit
def relu_backward(upstream, activated, out):
    rows, cols = upstream.shape
    for i in range(rows):
        for j in range(cols):
            out[i, j] = upstream[i, j] if activated[i, j] > 0 else 0.0


@_jit
def softmax_xent_rows(logits, labels, mask, scale, out):
    """Row-wise stabilized softmax cross entropy.

    Returns the *sum* of per-row losses over masked rows and writes
    ``(softmax - onehot) * scale`` into masked rows of ``out`` (zeros
    elsewhere). ``out`` may alias ``logits``.
    """
    rows, cols = logits.shape
    total = 0.0
    for i in range(rows):
        if not mask[i]:
            for j in range(cols):
                out[i, j] = 0.0
            continue
        m = logits[i, 0]
        for j in range(1, cols):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(cols):
            s += math.exp(logits[i, j] - m)
        y = labels[i]
        total += math.log(s) - (logits[i, y] - m)
        for j in range(cols):
            p = math.exp(logits[i, j] - m) / s
            if j == y:
                p -= 1.0
            out[i, j] = p * scale
    return total


@_jit
def fisher_yates(draws):
    """Apply the swaps ``i <-> draws[i]`` for i = n-1 .. 1 to the identity."""
    n = draws.shape[0]
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = draws[i]
        t = perm[i]
        perm[i] = perm[j]
        perm[j] = t
    return perm
