"""Independent reference implementations used as test oracles.

Everything here is written against dense numpy arrays and plain Python so it
shares no code path with the package under test.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def dense_from_triples(n_rows, n_cols, rows, cols, vals) -> np.ndarray:
    m = np.zeros((n_rows, n_cols))
    for r, c, v in zip(rows, cols, vals):
        m[r, c] += v
    return m


def spmm_loops(dense_a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Row-by-row product summing nonzeros in column order."""
    out = np.zeros((dense_a.shape[0], h.shape[1]))
    for i in range(dense_a.shape[0]):
        for k in np.flatnonzero(dense_a[i]):
            out[i] += dense_a[i, k] * h[k]
    return out


def column_normalize(a: np.ndarray) -> np.ndarray:
    s = a.sum(axis=0)
    return np.divide(a, s, out=np.zeros_like(a), where=s != 0)


def _forward(a_hat, x, weights):
    """Logits and the ReLU activation pattern of every hidden layer."""
    h = x
    pattern = []
    L = len(weights)
    for l, w in enumerate(weights):
        z = a_hat.T @ (h @ w)
        if l < L - 1:
            pattern.append(z > 0)
            h = np.maximum(z, 0)
        else:
            h = z
    return h, pattern


def gcn_loss(a_hat: np.ndarray, x: np.ndarray, weights, labels, mask) -> float:
    """Mean masked cross entropy of ``relu(A^T ... ) ... A^T H W`` with dense math."""
    return float(_loss(_forward(a_hat, x, weights)[0], labels, mask))


def _loss(logits, labels, mask):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    idx = np.flatnonzero(mask)
    return -logp[idx, labels[idx]].mean()


def gcn_logits(a_hat, x, weights):
    return _forward(a_hat, x, weights)[0]


def finite_difference_grads(a_hat, x, weights, labels, mask, h=1e-4, min_h=1e-7):
    """Fourth-order central differences of :func:`gcn_loss` w.r.t. every weight.

    The loss is only piecewise smooth. When a stencil point flips any ReLU
    relative to the unperturbed weights the step is divided by ten, so the
    difference quotient never straddles a kink. Evaluation runs in extended
    precision so small steps do not drown in float64 rounding.
    """
    ext = np.longdouble
    a_hat, x = np.asarray(a_hat, dtype=ext), np.asarray(x, dtype=ext)
    ws = [np.asarray(w, dtype=ext).copy() for w in weights]
    _, base = _forward(a_hat, x, ws)
    grads = []
    for w in ws:
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            orig = w[idx]
            step = h
            while True:
                vals, smooth = [], True
                for s in (2 * step, step, -step, -2 * step):
                    w[idx] = orig + s
                    logits, pat = _forward(a_hat, x, ws)
                    smooth &= all(np.array_equal(p, q) for p, q in zip(pat, base))
                    vals.append(_loss(logits, labels, mask))
                w[idx] = orig
                if smooth or step / 10 < min_h:
                    break
                step /= 10
            f2, f1, fm1, fm2 = vals
            g[idx] = (-f2 + 8 * f1 - 8 * fm1 + fm2) / (12 * step)
        grads.append(g.astype(np.float64))
    return grads


def adam_scalar(w, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam over a list of gradients, textbook form."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        w = w - lr * mh / (vh**0.5 + eps)
    return w


def comm_time_reference(topology: str, strategy: str) -> Fraction:
    """Closed forms written out term by term, in units of n*d/l."""
    if topology == "asymmetric-6-link":
        if strategy == "1D":
            return 8 * Fraction(1, 8 * 6)
        return 2 * Fraction(1, 4 * 4) + Fraction(1, 4 * 2)
    if strategy == "1D":
        return 8 * Fraction(1, 8 * 12)
    return 2 * Fraction(1, 4 * 12) + Fraction(1, 4 * 12)


def fisher_yates_reference(draws) -> list[int]:
    """Classic backward Fisher-Yates: position i swaps with draws[i] in [0, i]."""
    n = len(draws)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(draws[i])
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def random_graph(rng, n, density, weighted=True):
    """Dense random adjacency with the given fill; returns (dense, rows, cols, vals)."""
    mask = rng.random((n, n)) < density
    vals = rng.uniform(0.5, 2.0, size=(n, n)) if weighted else np.ones((n, n))
    dense = np.where(mask, vals, 0.0)
    r, c = np.nonzero(dense)
    return dense, r, c, dense[r, c]
