"""Pure-numpy versions of the scoring / selection kernels.

Each function here has a twin in ``_ckernels.pyx`` with the same signature and
the same semantics; the two backends agree to a few ulps (summation order
differs).
"""
import numpy as np


def column_vote(attn, row_start, row_stop, n_cols):
    """Sum rows ``row_start:row_stop`` of ``attn`` over its first ``n_cols`` columns."""
    out = np.zeros(n_cols, dtype=np.float64)
    for i in range(row_start, row_stop):
        out += attn[i, :n_cols]
    return out


def mass_over(attn, cols):
    """Total attention mass of all rows restricted to column indices ``cols``."""
    cols = np.asarray(cols, dtype=np.int64)
    return float(attn[:, cols].sum()) if cols.size else 0.0


def topk_indices(scores, k):
    n = scores.shape[0]
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:k]).astype(np.int64)


def row_cosine(a, b):
    """Row-wise cosine similarity; rows where either side has zero norm get 1.0.

    Returns ``(cos, n_zero)``.
    """
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    dot = np.einsum("ij,ij->i", a, b)
    zero = (na == 0.0) | (nb == 0.0)
    out = np.ones(a.shape[0], dtype=np.float64)
    ok = ~zero
    # rounding can push |cos| a hair past 1
    out[ok] = np.clip(dot[ok] / (na[ok] * nb[ok]), -1.0, 1.0)
    return out, int(zero.sum())
